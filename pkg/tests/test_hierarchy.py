import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from app.errors import ArgumentError, DomainError
from app.services.hierarchy import (
    build_hierarchy,
    close_marked,
    covered_area,
    dump_hierarchy,
    eval_hier_basis,
    eval_hier_direct,
    from_active_elements,
    global_multilevel_operator,
    local_extraction,
    refine_all,
    refine_elements,
    truncate_coefficients,
)
from app.services.splines import KnotVector, SplineSpace1D, TensorSpace2D
from app.services.verification import random_hierarchy

CORNER = [0, 1, 4, 5]


def square_space(elements: int = 4, degree: int = 2) -> TensorSpace2D:
    interior = [k / elements for k in range(1, elements)]
    kv = KnotVector([0.0] * (degree + 1) + interior + [1.0] * (degree + 1), degree)
    space = SplineSpace1D(kv)
    return TensorSpace2D(space, space)


def expand(hs, el, values: np.ndarray) -> np.ndarray:
    full = np.zeros(hs.n_dofs)
    full[el.functions] = values
    return full


class HierarchyCountsTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.hs = build_hierarchy(square_space(), 3)

    def test_base_level(self) -> None:
        self.assertEqual(self.hs.n_dofs, 36)
        self.assertEqual(self.hs.n_elements, 16)
        self.assertEqual(self.hs.depth, 1)
        self.assertEqual(self.hs.elements_per_level(), [16])

    def test_corner_refinement(self) -> None:
        hs = refine_elements(self.hs, {0: CORNER})
        self.assertEqual(hs.n_dofs, 48)
        self.assertEqual(hs.elements_per_level(), [12, 16])
        self.assertEqual(hs.active_functions[0].size, 32)
        self.assertEqual(hs.active_functions[1].size, 16)
        self.assertEqual(hs.deactivated_functions[0].size, 4)
        self.assertAlmostEqual(covered_area(hs), 1.0)

    def test_uniform_refinement(self) -> None:
        hs = refine_all(self.hs)
        self.assertEqual(hs.n_dofs, 100)
        self.assertEqual(hs.elements_per_level(), [0, 64])

    def test_refining_nothing_returns_same_space(self) -> None:
        self.assertIs(refine_elements(self.hs, {0: []}), self.hs)

    def test_dof_numbering_is_level_major(self) -> None:
        hs = refine_elements(self.hs, {0: CORNER})
        info = hs.dof_info()
        self.assertEqual(len(info), hs.n_dofs)
        self.assertEqual([lvl for lvl, _ in info], sorted(lvl for lvl, _ in info))
        level, flat = info[40]
        self.assertEqual(hs.dof_of(level, flat), 40)
        with self.assertRaises(ArgumentError):
            hs.dof_of(0, 0)


class RefinementErrorsTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.hs = build_hierarchy(square_space(), 2)

    def test_inactive_element_raises(self) -> None:
        hs = refine_elements(self.hs, {0: [0]})
        with self.assertRaises(ArgumentError):
            refine_elements(hs, {0: [0]})

    def test_exceeding_max_levels_raises(self) -> None:
        hs = refine_elements(self.hs, {0: [0]})
        with self.assertRaises(ArgumentError):
            refine_elements(hs, {1: [0]})

    def test_unknown_level_raises(self) -> None:
        with self.assertRaises(ArgumentError):
            refine_elements(self.hs, {5: [0]})

    def test_multilevel_matrix_beyond_depth_raises(self) -> None:
        with self.assertRaises(ArgumentError):
            self.hs.multilevel_matrix(1)

    def test_inactive_element_lookup_raises(self) -> None:
        hs = refine_elements(self.hs, {0: [3]})
        with self.assertRaises(ArgumentError):
            local_extraction(hs, 0, 3)


class MarkClosureTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.hs = build_hierarchy(square_space(), 3)

    def test_isolated_interior_element_adds_nothing_alone(self) -> None:
        self.assertEqual(refine_elements(self.hs, {0: [5]}).n_dofs, 36)

    def test_interior_element_grows_to_a_support_block(self) -> None:
        closed = close_marked(self.hs, 0, [5])
        self.assertEqual(closed, set(CORNER))
        self.assertEqual(refine_elements(self.hs, {0: closed}).n_dofs, 48)

    def test_corner_element_is_already_closed(self) -> None:
        closed = close_marked(self.hs, 0, [0])
        self.assertEqual(closed, {0})
        self.assertGreater(refine_elements(self.hs, {0: closed}).n_dofs, 36)

    def test_bilinear_marks_stay_unchanged(self) -> None:
        hs = build_hierarchy(square_space(degree=1), 2)
        self.assertEqual(close_marked(hs, 0, [5, 10]), {5, 10})

    def test_finest_level_cannot_be_closed(self) -> None:
        with self.assertRaises(ArgumentError):
            close_marked(self.hs, 2, [0])


class ExtractionTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.rng = np.random.default_rng(11)

    def test_partition_of_unity_on_random_hierarchies(self) -> None:
        for _ in range(3):
            hs = random_hierarchy(self.rng)
            for u, v in self.rng.random((60, 2)):
                _, values, grads = eval_hier_basis(hs, float(u), float(v))
                self.assertAlmostEqual(values.sum(), 1.0, places=12)
                assert_allclose(grads.sum(axis=0), 0.0, atol=1e-9)

    def test_operator_columns_sum_to_one(self) -> None:
        hs = random_hierarchy(self.rng)
        for el in hs.elements():
            assert_allclose(el.operator.sum(axis=0), 1.0, atol=1e-12)

    def test_local_operator_matches_direct_evaluation(self) -> None:
        for truncated in (True, False):
            hs = refine_elements(build_hierarchy(square_space(), 3, truncated=truncated), {0: CORNER})
            hs = refine_elements(hs, {1: [0, 9]})
            for u, v in self.rng.random((80, 2)):
                el, values, grads = eval_hier_basis(hs, float(u), float(v))
                direct, direct_grads = eval_hier_direct(hs, float(u), float(v))
                assert_allclose(expand(hs, el, values), direct, atol=1e-12)
                full_grads = np.zeros((hs.n_dofs, 2))
                full_grads[el.functions] = grads
                assert_allclose(full_grads, direct_grads, atol=1e-10)

    def test_hierarchical_variant_is_not_a_partition_of_unity(self) -> None:
        hs = refine_elements(build_hierarchy(square_space(), 2, truncated=False), {0: CORNER})
        _, values, _ = eval_hier_basis(hs, 0.1, 0.1)
        self.assertGreater(values.sum(), 1.0 + 1e-6)

    def test_threaded_elements_match_serial(self) -> None:
        hs = random_hierarchy(self.rng)
        serial = hs.with_elements(hs.active_elements, hs.deactivated_elements).elements()
        threaded = hs.elements(workers=4)
        self.assertEqual([el.key for el in serial], [el.key for el in threaded])
        for a, b in zip(serial, threaded):
            assert_array_equal(a.functions, b.functions)
            assert_allclose(a.operator, b.operator, atol=0)

    def test_locate_returns_finest_active_element(self) -> None:
        hs = refine_elements(build_hierarchy(square_space(), 2), {0: CORNER})
        self.assertEqual(hs.locate(0.1, 0.1).level, 1)
        self.assertEqual(hs.locate(0.9, 0.9).level, 0)
        with self.assertRaises(DomainError):
            hs.locate(1.2, 0.5)

    def test_global_operator_shape(self) -> None:
        hs = refine_elements(build_hierarchy(square_space(), 2), {0: CORNER})
        m_glob = global_multilevel_operator(hs, 1)
        self.assertEqual(m_glob.shape, (48, 100))
        # every fine function column sums to one under truncation
        assert_allclose(m_glob.sum(axis=0), 1.0, atol=1e-12)


class TruncationTestCase(unittest.TestCase):
    def test_contained_coefficients_are_zeroed(self) -> None:
        hs = refine_elements(build_hierarchy(square_space(), 2), {0: CORNER})
        out = truncate_coefficients(hs, 0, np.ones(100))
        self.assertEqual(int(out.sum()), 84)

    def test_wrong_size_raises(self) -> None:
        hs = build_hierarchy(square_space(), 2)
        with self.assertRaises(ArgumentError):
            truncate_coefficients(hs, 0, np.ones(36))
        with self.assertRaises(ArgumentError):
            truncate_coefficients(hs, 1, np.ones(100))


class PersistenceTestCase(unittest.TestCase):
    def setUp(self) -> None:
        self.base = square_space()
        self.hs = refine_elements(build_hierarchy(self.base, 3), {0: CORNER})

    def test_rebuild_from_element_sets(self) -> None:
        rebuilt = from_active_elements(
            self.base, 3, self.hs.active_elements, self.hs.deactivated_elements
        )
        self.assertEqual(rebuilt.n_dofs, self.hs.n_dofs)
        for a, b in zip(rebuilt.elements(), self.hs.elements()):
            assert_allclose(a.operator, b.operator)

    def test_rebuild_rejects_holes(self) -> None:
        active = [set(self.hs.active_elements[0]) - {15}, self.hs.active_elements[1]]
        with self.assertRaises(ArgumentError):
            from_active_elements(self.base, 3, active, self.hs.deactivated_elements)

    def test_dump_lists_every_element(self) -> None:
        text = dump_hierarchy(self.hs)
        lines = text.splitlines()
        self.assertEqual(lines[0], "hierarchy patch=0 levels=3 truncated=True")
        self.assertEqual(sum(line.startswith("element ") for line in lines), 28)


if __name__ == "__main__":
    unittest.main()
