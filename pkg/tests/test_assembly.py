import unittest
from dataclasses import replace
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose
from scipy import sparse

from app.errors import ArgumentError, ConfigurationError, GeometryError, SolverError
from app.services.adaptivity import refine_domain, solve_problem
from app.services.assembly import (
    BoundarySpec,
    DiscreteSolution,
    Interface,
    LinearSystem,
    MultipatchDomain,
    apply_dirichlet,
    assemble,
    assemble_direct,
    build_dof_map,
    gauss_1d,
    gauss_rule,
    solve,
    transform_element,
)
from app.services.physics import dirichlet_problem, manufactured_problem, unit_square_domain
from app.services.splines import ControlNet

CORNER = [(0, 0, 0), (0, 0, 1), (0, 0, 4), (0, 0, 5)]


def dense(matrix) -> np.ndarray:
    return matrix.toarray()


class QuadratureTestCase(unittest.TestCase):
    def test_gauss_integrates_degree_2n_minus_1(self) -> None:
        x, w = gauss_1d(3)
        self.assertAlmostEqual(float(w @ x**5), 1.0 / 6.0, places=14)
        self.assertAlmostEqual(float(w.sum()), 1.0, places=14)

    def test_tensor_rule(self) -> None:
        rule = gauss_rule(2, 3)
        self.assertEqual(rule.points.shape, (6, 2))
        self.assertAlmostEqual(float(rule.weights @ (rule.points[:, 0] * rule.points[:, 1] ** 2)), 1 / 6)

    def test_empty_rule_raises(self) -> None:
        with self.assertRaises(ArgumentError):
            gauss_1d(0)

    def test_rule_size_is_capped_at_sixteen(self) -> None:
        x, w = gauss_1d(16)
        self.assertAlmostEqual(float(w @ x**31), 1.0 / 32.0, places=12)
        with self.assertRaises(ArgumentError):
            gauss_1d(17)
        with self.assertRaises(ArgumentError):
            gauss_rule(2, 17)


class SolveTestCase(unittest.TestCase):
    def test_one_by_one_system(self) -> None:
        system = LinearSystem(sparse.csr_matrix([[2.0]]), np.array([4.0]))
        assert_allclose(solve(system), [2.0])

    def test_dirichlet_values_are_eliminated(self) -> None:
        matrix = sparse.csr_matrix([[2.0, -1.0], [-1.0, 2.0]])
        system = LinearSystem(
            matrix, np.array([0.0, 0.0]), None, np.array([1]), np.array([2.0])
        )
        assert_allclose(solve(system), [1.0, 2.0])

    def test_residual_of_a_well_posed_system_is_tiny(self) -> None:
        g = np.random.default_rng(3).standard_normal((50, 50))
        a = g.T @ g + np.eye(50)
        b = np.arange(50, dtype=float)
        x = solve(LinearSystem(sparse.csr_matrix(a), b))
        scale = np.abs(a).sum(axis=1).max() * np.abs(x).max() + np.abs(b).max()
        self.assertLess(np.abs(a @ x - b).max() / scale, 1e-12)

    def test_inaccurate_factorization_raises(self) -> None:
        class WrongFactor:
            def solve(self, rhs):
                return np.full_like(rhs, 7.0)

        system = LinearSystem(sparse.csr_matrix([[2.0]]), np.array([4.0]))
        with mock.patch("app.services.assembly.splu", return_value=WrongFactor()):
            with self.assertRaisesRegex(SolverError, "relative residual"):
                solve(system)

    def test_singular_matrix_raises(self) -> None:
        system = LinearSystem(sparse.csr_matrix([[1.0, 1.0], [1.0, 1.0]]), np.ones(2))
        with self.assertRaises(SolverError):
            solve(system)

    def test_transform_shape_mismatch_raises(self) -> None:
        with self.assertRaises(ArgumentError):
            transform_element(np.eye(9), np.ones((4, 4)))


class AssemblyTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.domain = refine_domain(unit_square_domain(2, 4, 3), CORNER)
        self.problem = manufactured_problem()

    def test_stiffness_is_symmetric(self) -> None:
        system = assemble(self.domain, self.problem)
        self.assertEqual(system.n_dofs, 48)
        a = dense(system.matrix)
        assert_allclose(a, a.T, atol=1e-12)

    def test_constants_are_in_the_kernel(self) -> None:
        system = assemble(self.domain, self.problem)
        assert_allclose(system.matrix @ np.ones(system.n_dofs), 0.0, atol=1e-11)

    def test_bezier_assembly_matches_direct_assembly(self) -> None:
        dof_map = build_dof_map(self.domain)
        bezier = assemble(self.domain, self.problem, dof_map)
        direct = assemble_direct(self.domain, self.problem, dof_map)
        assert_allclose(dense(bezier.matrix), dense(direct.matrix), atol=1e-12)
        assert_allclose(bezier.rhs, direct.rhs, atol=1e-12)

    def test_threaded_assembly_matches_serial(self) -> None:
        serial = assemble(self.domain, self.problem)
        threaded = assemble(self.domain, self.problem, workers=4)
        assert_allclose(dense(serial.matrix), dense(threaded.matrix), atol=1e-14)
        assert_allclose(serial.rhs, threaded.rhs, atol=1e-14)

    def test_mirrored_geometry_raises(self) -> None:
        patch = self.domain.patches[0]
        flipped = replace(patch, net=ControlNet(patch.net.points * np.array([-1.0, 1.0])))
        with self.assertRaises(GeometryError):
            assemble(MultipatchDomain((flipped,)), self.problem)

    def test_solution_size_is_checked(self) -> None:
        dof_map = build_dof_map(self.domain)
        with self.assertRaises(ArgumentError):
            DiscreteSolution(self.domain, dof_map, np.zeros(dof_map.n_dofs + 1))


class MultipatchTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.split = unit_square_domain(2, 4, 3, split=True)

    def test_interface_dofs_are_merged(self) -> None:
        dof_map = build_dof_map(self.split)
        self.assertEqual(dof_map.n_dofs, 42)
        east = [d for d, _, _ in self.split.patches[0].space.side_dofs("east")]
        west = [d for d, _, _ in self.split.patches[1].space.side_dofs("west")]
        self.assertEqual(sorted(dof_map[0][east]), sorted(dof_map[1][west]))

    def test_mismatched_interface_raises(self) -> None:
        with self.assertRaises(ConfigurationError) as ctx:
            MultipatchDomain(self.split.patches, (Interface(0, "west", 1, "east", 0),))
        self.assertIn("non-conforming interface", str(ctx.exception))

    def test_one_sided_refinement_raises(self) -> None:
        refined = refine_domain(self.split, [(0, 0, 1)])
        with self.assertRaises(ConfigurationError):
            build_dof_map(refined)

    def test_outer_sides_skip_the_interface(self) -> None:
        sides = self.split.outer_sides()
        self.assertEqual(len(sides), 6)
        self.assertNotIn((0, "east"), sides)
        self.assertNotIn((1, "west"), sides)

    def test_odd_element_count_raises(self) -> None:
        with self.assertRaises(ArgumentError):
            unit_square_domain(2, 3, 2, split=True)


class DirichletTestCase(unittest.TestCase):
    def test_conflicting_corner_values_raise(self) -> None:
        domain = unit_square_domain(2, 4, 2)
        system = assemble(domain, manufactured_problem())
        specs = [
            BoundarySpec(((0, "south"),), lambda x: np.zeros(len(x))),
            BoundarySpec(((0, "west"),), lambda x: np.ones(len(x))),
        ]
        with self.assertRaises(ConfigurationError):
            apply_dirichlet(system, domain, specs)

    def test_homogeneous_data_fixes_every_boundary_function(self) -> None:
        domain = unit_square_domain(2, 4, 2)
        system = apply_dirichlet(
            assemble(domain, manufactured_problem()), domain, BoundarySpec(tuple(domain.outer_sides()))
        )
        self.assertEqual(system.dirichlet_dofs.size, 20)
        assert_allclose(system.dirichlet_values, 0.0)

    def test_linear_data_is_reproduced_on_two_patches(self) -> None:
        def g(x):
            x = np.atleast_2d(x)
            return x[:, 0] + 2.0 * x[:, 1]

        domain = unit_square_domain(2, 4, 2, split=True)
        solution = solve_problem(domain, dirichlet_problem(g, exact=True))
        for k, (u, v) in enumerate(np.random.default_rng(2).random((10, 2))):
            patch = k % 2
            value, grad, x = solution.evaluate(patch, float(u), float(v))
            self.assertAlmostEqual(value, float(g(x)[0]), places=10)
            assert_allclose(grad, [1.0, 2.0], atol=1e-9)


if __name__ == "__main__":
    unittest.main()
