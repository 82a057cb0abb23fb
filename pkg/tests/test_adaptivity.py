import unittest
from unittest import mock

import numpy as np
from numpy.testing import assert_allclose

from app.errors import ArgumentError, InternalError
from app.schemas import AdaptiveConfig
from app.services.adaptivity import (
    ErrorIndicators,
    adaptive_loop,
    close_marks,
    element_l2_errors,
    energy_error,
    estimate_two_mesh,
    l2_error,
    mark_doerfler,
    mark_true_error,
    mirror_marks,
    reference_solution,
    refine_domain,
    refine_domain_uniform,
    solve_problem,
)
from app.services.assembly import (
    DiscreteSolution,
    apply_dirichlet,
    assemble,
    build_dof_map,
    dirichlet_boundary,
)
from app.services.physics import (
    dirichlet_problem,
    manufactured_problem,
    poisson_peak_problem,
    unit_square_domain,
)


def indicators(values: list[float], keys: list[tuple[int, int, int]] | None = None) -> ErrorIndicators:
    keys = keys or [(0, 0, k) for k in range(len(values))]
    return ErrorIndicators(tuple(keys), np.array(values, dtype=float))


class DoerflerTestCase(unittest.TestCase):
    def test_marks_smallest_set_reaching_fraction(self) -> None:
        marked = mark_doerfler(indicators([4.0, 3.0, 2.0, 1.0]), 0.5)
        self.assertEqual(marked, [(0, 0, 0), (0, 0, 1)])

    def test_large_fraction_marks_everything(self) -> None:
        self.assertEqual(len(mark_doerfler(indicators([4.0, 3.0, 2.0, 1.0]), 0.99)), 4)

    def test_ties_prefer_coarse_levels_then_patch_then_element(self) -> None:
        keys = [(0, 1, 5), (1, 0, 3), (0, 0, 7), (0, 0, 2)]
        marked = mark_doerfler(indicators([1.0, 1.0, 1.0, 1.0], keys), 0.5)
        self.assertEqual(marked, [(0, 0, 2), (0, 0, 7)])

    def test_zero_indicators_mark_nothing(self) -> None:
        self.assertEqual(mark_doerfler(indicators([0.0, 0.0]), 0.5), [])

    def test_invalid_fraction_raises(self) -> None:
        for theta in (0.0, 1.0, -0.2):
            with self.assertRaises(ArgumentError):
                mark_doerfler(indicators([1.0]), theta)


class TrueErrorMarkingTestCase(unittest.TestCase):
    def test_compares_root_of_squared_errors(self) -> None:
        errors = {(0, 0, 0): 1e-4, (0, 0, 1): 1e-8, (1, 0, 0): 4e-6}
        self.assertEqual(mark_true_error(errors, 1e-3), [(0, 0, 0), (1, 0, 0)])

    def test_nonpositive_tolerance_raises(self) -> None:
        with self.assertRaises(ArgumentError):
            mark_true_error({}, 0.0)


class MarkClosureTestCase(unittest.TestCase):
    def test_closed_marks_always_add_dofs(self) -> None:
        domain = unit_square_domain(2, 4, 3)
        self.assertEqual(build_dof_map(refine_domain(domain, [(0, 0, 5)])).n_dofs, 36)
        closed = close_marks(domain, [(0, 0, 5)])
        self.assertEqual(closed, [(0, 0, 0), (0, 0, 1), (0, 0, 4), (0, 0, 5)])
        self.assertEqual(build_dof_map(refine_domain(domain, closed)).n_dofs, 48)

    def test_marks_are_closed_per_patch(self) -> None:
        split = unit_square_domain(2, 4, 3, split=True)
        closed = close_marks(split, [(1, 0, 5), (0, 0, 0)])
        # patch 1 is two elements wide, so a one-column block next to its east side suffices
        self.assertEqual(closed, [(0, 0, 0), (1, 0, 3), (1, 0, 5)])


class MirrorTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.split = unit_square_domain(2, 4, 3, split=True)

    def test_interface_element_gets_its_partner(self) -> None:
        # element 1 of patch 0 touches the interface, element 0 does not
        marked = mirror_marks(self.split, [(0, 0, 1), (0, 0, 0)])
        self.assertEqual(marked, [(0, 0, 0), (0, 0, 1), (1, 0, 0)])

    def test_mirrored_refinement_keeps_interface_conforming(self) -> None:
        refined = refine_domain(self.split, mirror_marks(self.split, [(0, 0, 1), (0, 0, 3)]))
        dof_map = build_dof_map(refined)
        self.assertEqual(dof_map.n_dofs, 52)


class EstimatorTestCase(unittest.TestCase):
    def test_vanishes_for_exactly_representable_solution(self) -> None:
        result = estimate_two_mesh(unit_square_domain(2, 4, 3), manufactured_problem())
        self.assertLess(result.indicators.total, 1e-20)
        self.assertEqual(len(result.indicators.keys), 16)

    def test_coarse_part_is_the_galerkin_solution(self) -> None:
        domain = refine_domain(unit_square_domain(2, 4, 3), [(0, 0, 5), (0, 0, 6)])
        problem = poisson_peak_problem(alpha=50.0)
        result = estimate_two_mesh(domain, problem)
        galerkin = solve_problem(domain, problem)
        assert_allclose(result.solution.coefficients, galerkin.coefficients, atol=1e-9)
        self.assertEqual(
            sorted(result.indicators.keys),
            sorted(el.key for el in domain.patches[0].space.elements()),
        )
        self.assertGreater(result.indicators.total, 0.0)

    def test_refining_largest_indicators_reduces_error(self) -> None:
        problem = poisson_peak_problem()
        domain = unit_square_domain(2, 4, 4)
        config = AdaptiveConfig(theta=0.5, max_iterations=2, max_levels=3)
        result = adaptive_loop(domain, problem, config)
        self.assertEqual(len(result.records), 3)
        first, last = result.records[0], result.records[-1]
        dofs = [r.dofs for r in result.records]
        self.assertTrue(all(b > a for a, b in zip(dofs, dofs[1:])), dofs)
        self.assertLess(last.l2_error, first.l2_error)
        self.assertLess(last.estimator_total, first.estimator_total)
        self.assertIsNotNone(last.relative_l2_error)

    def test_refinement_without_new_dofs_is_an_internal_error(self) -> None:
        config = AdaptiveConfig(max_iterations=1, max_levels=2)
        unclosed = mock.patch("app.services.adaptivity.close_marks", side_effect=lambda domain, marked: marked)
        with mock.patch("app.services.adaptivity.mark_doerfler", return_value=[(0, 0, 5)]), unclosed:
            with self.assertRaisesRegex(InternalError, "degrees of freedom"):
                adaptive_loop(unit_square_domain(2, 4, 3), poisson_peak_problem(), config)

    def test_loop_stops_when_estimator_vanishes(self) -> None:
        config = AdaptiveConfig(max_iterations=4, max_levels=3)
        result = adaptive_loop(unit_square_domain(2, 4, 4), manufactured_problem(), config)
        self.assertEqual(len(result.records), 1)


class UniformLoopTestCase(unittest.TestCase):
    def test_uniform_marking_refines_every_element(self) -> None:
        config = AdaptiveConfig(marking="uniform", max_iterations=2, max_levels=3)
        seen = []
        result = adaptive_loop(
            unit_square_domain(2, 2, 4),
            poisson_peak_problem(alpha=10.0),
            config,
            on_iteration=lambda it, sol: seen.append(it),
        )
        self.assertEqual([r.dofs for r in result.records], [16, 36, 100])
        self.assertEqual([r.elements_per_level for r in result.records], [[4], [0, 16], [0, 0, 64]])
        self.assertEqual(seen, [0, 1, 2])
        errors = [r.l2_error for r in result.records]
        self.assertEqual(errors, sorted(errors, reverse=True))
        self.assertTrue(all(r.seconds == 0.0 for r in result.records))

    def test_true_error_marking_needs_a_target(self) -> None:
        problem = dirichlet_problem(lambda x: np.zeros(len(x)))
        with self.assertRaises(ArgumentError):
            adaptive_loop(unit_square_domain(2, 2, 3), problem, AdaptiveConfig(marking="true_error"))


class ReferenceErrorTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.problem = poisson_peak_problem(alpha=20.0)
        self.domain = unit_square_domain(2, 2, 4)

    def test_reference_error_approximates_exact_error(self) -> None:
        reference = reference_solution(self.domain, self.problem, 2)
        self.assertEqual(reference.domain.n_elements, 64)
        solution = solve_problem(self.domain, self.problem)
        against_exact = l2_error(solution, exact=self.problem.exact)
        against_reference = l2_error(solution, reference=reference)
        self.assertLess(abs(against_exact - against_reference) / against_exact, 0.05)

    def test_errors_are_accumulated_on_adapted_elements(self) -> None:
        reference = reference_solution(self.domain, self.problem, 2)
        adapted = refine_domain(self.domain, [(0, 0, 0)])
        errors = element_l2_errors(solve_problem(adapted, self.problem), reference=reference)
        self.assertEqual(set(errors), {el.key for el in adapted.patches[0].space.elements()})

    def test_adapted_mesh_deeper_than_reference_raises(self) -> None:
        reference = reference_solution(self.domain, self.problem, 1)
        deep = refine_domain_uniform(self.domain, 2)
        with self.assertRaises(ArgumentError):
            element_l2_errors(solve_problem(deep, self.problem), reference=reference)

    def test_reference_needs_enough_levels(self) -> None:
        with self.assertRaises(ArgumentError):
            reference_solution(self.domain, self.problem, 4)

    def test_missing_target_raises(self) -> None:
        solution = solve_problem(self.domain, self.problem)
        with self.assertRaises(ArgumentError):
            element_l2_errors(solution)


def log_slope(dofs: list[int], errors: list[float]) -> float:
    return float(np.polyfit(np.log(dofs), np.log(errors), 1)[0])


class AdaptiveConvergenceTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.problem = poisson_peak_problem()
        cls.domain = unit_square_domain(2, 4, 5)
        cls.energy_errors = []
        cls.result = adaptive_loop(
            cls.domain,
            cls.problem,
            AdaptiveConfig(theta=0.5, max_iterations=5, max_levels=4),
            on_iteration=lambda it, sol: cls.energy_errors.append(
                energy_error(sol, cls.problem.exact_gradient)
            ),
        )

    def test_estimator_decays_with_the_energy_error(self) -> None:
        records = self.result.records[1:]
        dofs = [r.dofs for r in records]
        estimator = log_slope(dofs, [r.estimator_total for r in records])
        error = log_slope(dofs, self.energy_errors[1:])
        self.assertLess(estimator, 0.0)
        self.assertLess(abs(estimator - error), 0.25)
        efficiency = [r.estimator_total / e for r, e in zip(records, self.energy_errors[1:])]
        self.assertLess(max(efficiency) / min(efficiency), 2.0, efficiency)

    def test_adaptive_mesh_needs_fewer_dofs_than_uniform(self) -> None:
        last = self.result.records[-1]
        uniform_dofs, uniform_errors = [], []
        for times in range(4):
            mesh = refine_domain_uniform(self.domain, times) if times else self.domain
            solution = solve_problem(mesh, self.problem)
            uniform_dofs.append(solution.n_dofs)
            uniform_errors.append(l2_error(solution, exact=self.problem.exact))
        self.assertLess(uniform_errors[-1], uniform_errors[0])
        # uniform dofs needed for the adaptive error, interpolated in the log-log plane
        needed = np.exp(
            np.interp(np.log(last.l2_error), np.log(uniform_errors[::-1]), np.log(uniform_dofs[::-1]))
        )
        self.assertLess(last.dofs, needed)


class UniformConvergenceTestCase(unittest.TestCase):
    def test_l2_error_and_boundary_projection_converge_at_order_p_plus_one(self) -> None:
        problem = poisson_peak_problem(alpha=10.0)
        us = np.linspace(0.0, 1.0, 401)
        for degree in (1, 2):
            domain = unit_square_domain(degree, 4, 4)
            errors, traces = [], []
            for times in range(3):
                mesh = refine_domain_uniform(domain, times) if times else domain
                solution = solve_problem(mesh, problem)
                errors.append(l2_error(solution, exact=problem.exact))
                system = apply_dirichlet(
                    assemble(mesh, problem, solution.dof_map), mesh, dirichlet_boundary(mesh, problem)
                )
                lifted = np.zeros(solution.n_dofs)
                lifted[system.dirichlet_dofs] = system.dirichlet_values
                trace = DiscreteSolution(mesh, solution.dof_map, lifted)
                south = np.array([trace.evaluate(0, float(u), 0.0)[0] for u in us])
                exact = problem.exact(np.column_stack([us, np.zeros(us.size)]))
                traces.append(float(np.sqrt(np.mean((south - exact) ** 2))))
            # h halves with every refinement
            for values in (errors, traces):
                rates = np.log2(np.array(values[:-1]) / np.array(values[1:]))
                self.assertLess(abs(rates[-1] - (degree + 1)), 0.35, (degree, values))

    def test_energy_grows_monotonically_under_refinement(self) -> None:
        problem = manufactured_problem()
        coarse = unit_square_domain(1, 4, 4)
        meshes = [
            coarse,
            refine_domain(coarse, [(0, 0, 5)]),
            refine_domain(coarse, [(0, 0, 5), (0, 0, 6)]),
            refine_domain_uniform(coarse),
            refine_domain_uniform(coarse, 2),
        ]
        energies = []
        for mesh in meshes:
            solution = solve_problem(mesh, problem)
            system = assemble(mesh, problem, solution.dof_map)
            energies.append(float(solution.coefficients @ (system.matrix @ solution.coefficients)))
        for a, b in zip(energies, energies[1:]):
            self.assertGreaterEqual(b, a - 1e-15)
        self.assertGreater(energies[-1], energies[0])
        # |grad u|^2 of x(1-x)y(1-y) integrates to 1/45
        self.assertLess(energies[-1], 1.0 / 45.0)


if __name__ == "__main__":
    unittest.main()
