"""Error estimation, marking and the solve-estimate-mark-refine loop."""
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy import sparse

from app.config import CONVERGED_ESTIMATOR
from app.errors import ArgumentError, InternalError
from app.schemas import AdaptiveConfig, ConvergenceRecord
from app.services.assembly import (
    BoundarySpec,
    DiscreteSolution,
    MultipatchDomain,
    LinearSystem,
    apply_dirichlet,
    assemble,
    build_dof_map,
    dirichlet_boundary,
    element_data,
    element_stiffness_bezier,
    gauss_rule,
    solve,
)
from app.services.hierarchy import close_marked, refine_all, refine_elements
from app.services.physics import PhysicsProblem
from app.services.splines import bernstein_eval, bernstein_subdivision

logger = logging.getLogger(__name__)

ElementKey = tuple[int, int, int]  # (patch, level, flat element index)


@dataclass(frozen=True, eq=False)
class ErrorIndicators:
    """Squared per-element error indicators keyed by (patch, level, element)."""

    keys: tuple[ElementKey, ...]
    values: np.ndarray
    iteration: int = 0

    @property
    def total(self) -> float:
        return float(np.sum(self.values))

    def as_dict(self) -> dict[ElementKey, float]:
        return dict(zip(self.keys, self.values.tolist()))


@dataclass(frozen=True, eq=False)
class EstimatorResult:
    solution: DiscreteSolution
    correction: DiscreteSolution
    indicators: ErrorIndicators


@dataclass(frozen=True, eq=False)
class AdaptiveResult:
    records: list[ConvergenceRecord]
    solution: DiscreteSolution
    domain: MultipatchDomain


def solve_problem(
    domain: MultipatchDomain, problem: PhysicsProblem, workers: int = 1
) -> DiscreteSolution:
    """Assemble, apply Dirichlet data and solve on the current spaces."""
    dof_map = build_dof_map(domain)
    system = assemble(domain, problem, dof_map, workers=workers)
    system = apply_dirichlet(system, domain, dirichlet_boundary(domain, problem))
    return DiscreteSolution(domain, dof_map, solve(system))


def refine_domain(
    domain: MultipatchDomain, marked: Iterable[ElementKey]
) -> MultipatchDomain:
    grouped: dict[int, dict[int, set[int]]] = {}
    for patch, level, flat in marked:
        grouped.setdefault(patch, {}).setdefault(level, set()).add(flat)
    spaces = [
        refine_elements(p.space, grouped[k]) if k in grouped else p.space
        for k, p in enumerate(domain.patches)
    ]
    return domain.with_spaces(spaces)


def refine_domain_uniform(domain: MultipatchDomain, times: int = 1) -> MultipatchDomain:
    for _ in range(times):
        domain = domain.with_spaces([refine_all(p.space) for p in domain.patches])
    return domain


def estimate_two_mesh(
    domain: MultipatchDomain, problem: PhysicsProblem, workers: int = 1
) -> EstimatorResult:
    """Two-level estimator on the current mesh and its uniform refinement.

    Solves the saddle point system [[A, B], [B^T, 0]] [p; u] = [f; g] where A is
    the stiffness on the fine space, B couples fine test functions to coarse
    trial functions and f is the fine load. g is the coarse load integrated on
    the fine elements minus the coarse load of the coarse assembly, which makes
    u the coarse Galerkin solution of `solve_problem`. p is the fine minus the
    coarse solution, vanishes on the boundary, and the indicator of a coarse
    element is the sum of integral |grad p|^2 over its four children.
    """
    fine = refine_domain_uniform(domain)
    dm_c = build_dof_map(domain)
    dm_f = build_dof_map(fine)
    fine_system = assemble(fine, problem, dm_f, workers=workers)
    coarse_system = assemble(domain, problem, dm_c, workers=workers)
    coarse_load_on_fine = np.zeros(dm_c.n_dofs)

    p, q = domain.patches[0].space.degrees
    restrict = {
        (cu, cv): np.kron(bernstein_subdivision(q, cv), bernstein_subdivision(p, cu))
        for cu in (0, 1)
        for cv in (0, 1)
    }
    rows, cols, data = [], [], []
    for k, patch in enumerate(fine.patches):
        coarse_space = domain.patches[k].space
        for el in patch.space.elements(workers):
            eu, ev = el.index
            parent_level = el.level - 1
            parent_flat = coarse_space.levels[parent_level].element_flat(eu >> 1, ev >> 1)
            parent = coarse_space.element(parent_level, parent_flat)
            k_bez, f_bez = element_stiffness_bezier(el, patch, problem)
            coarse_on_child = parent.operator @ restrict[(eu & 1, ev & 1)]
            block = el.operator @ k_bez @ coarse_on_child.T
            r = dm_f[k][el.functions]
            c = dm_c[k][parent.functions]
            np.add.at(coarse_load_on_fine, c, coarse_on_child @ f_bez)
            rows.append(np.repeat(r, c.size))
            cols.append(np.tile(c, r.size))
            data.append(block.ravel())
    coupling = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(dm_f.n_dofs, dm_c.n_dofs),
    ).tocsr()

    coarse_bc = apply_dirichlet(coarse_system, domain, dirichlet_boundary(domain, problem))
    fine_bc = apply_dirichlet(fine_system, fine, BoundarySpec(tuple(fine.outer_sides())))
    free_f, free_c = fine_bc.free_dofs, coarse_bc.free_dofs
    a_ff = fine_system.matrix[free_f][:, free_f]
    b_fc = coupling[free_f][:, free_c]
    rhs_f = fine_system.rhs[free_f]
    if coarse_bc.dirichlet_dofs.size:
        rhs_f = rhs_f - coupling[free_f][:, coarse_bc.dirichlet_dofs] @ coarse_bc.dirichlet_values
    saddle = sparse.bmat([[a_ff, b_fc], [b_fc.T, None]], format="csr")
    rhs_c = (coarse_load_on_fine - coarse_system.rhs)[free_c]
    rhs = np.concatenate([rhs_f, rhs_c])
    x = solve(LinearSystem(saddle, rhs))

    p_full = np.zeros(dm_f.n_dofs)
    p_full[free_f] = x[: free_f.size]
    u_full = coarse_bc.expand(x[free_f.size :])
    correction = DiscreteSolution(fine, dm_f, p_full)
    solution = DiscreteSolution(domain, dm_c, u_full)

    sums: dict[ElementKey, float] = {}
    for k, patch in enumerate(fine.patches):
        pp, qq = patch.space.degrees
        rule = gauss_rule(pp + 1, qq + 1)
        coarse_space = domain.patches[k].space
        for el in patch.space.elements():
            data_el = element_data(el, patch, rule)
            coef = correction.bezier_coefficients(el)
            grad = np.einsum("qbi,b->qi", data_el.gradients, coef)
            contrib = float(data_el.dx @ np.sum(grad**2, axis=1))
            eu, ev = el.index
            parent_flat = coarse_space.levels[el.level - 1].element_flat(eu >> 1, ev >> 1)
            key = (k, el.level - 1, parent_flat)
            sums[key] = sums.get(key, 0.0) + contrib
    keys = tuple(sorted(sums))
    indicators = ErrorIndicators(keys, np.array([sums[key] for key in keys]))
    logger.info("two-mesh estimator: total %.6e over %d elements", indicators.total, len(keys))
    return EstimatorResult(solution, correction, indicators)


def mark_doerfler(indicators: ErrorIndicators, theta: float) -> list[ElementKey]:
    """Smallest set of largest indicators whose sum reaches theta times the total.

    Ties are broken by (level, patch, element index); all-zero indicators mark nothing.
    """
    if not 0.0 < theta < 1.0:
        raise ArgumentError(f"theta must lie in (0, 1), got {theta}")
    total = indicators.total
    if total <= 0.0:
        return []
    order = sorted(
        range(len(indicators.keys)),
        key=lambda i: (
            -indicators.values[i],
            indicators.keys[i][1],
            indicators.keys[i][0],
            indicators.keys[i][2],
        ),
    )
    cumulative = np.cumsum(indicators.values[order])
    count = int(np.searchsorted(cumulative, theta * total, side="left")) + 1
    return [indicators.keys[i] for i in order[: min(count, len(order))]]


def mark_true_error(errors: Mapping[ElementKey, float], tol: float) -> list[ElementKey]:
    """Elements whose L2 error (square root of the stored squared value) exceeds tol."""
    if tol <= 0:
        raise ArgumentError("tolerance must be positive")
    return sorted(key for key, err2 in errors.items() if math.sqrt(max(err2, 0.0)) > tol)


def close_marks(domain: MultipatchDomain, marked: Iterable[ElementKey]) -> list[ElementKey]:
    """Extend marks per patch and level so that refining them adds degrees of freedom."""
    grouped: dict[tuple[int, int], set[int]] = {}
    for patch, level, flat in marked:
        grouped.setdefault((patch, level), set()).add(flat)
    result = []
    for (patch, level), elems in sorted(grouped.items()):
        closed = close_marked(domain.patches[patch].space, level, elems)
        if len(closed) > len(elems):
            logger.debug(
                "patch %d level %d: %d marks closed to %d", patch, level, len(elems), len(closed)
            )
        result += [(patch, level, flat) for flat in closed]
    return sorted(result)


def mirror_marks(
    domain: MultipatchDomain, marked: Iterable[ElementKey]
) -> list[ElementKey]:
    """Close a marked set under reflection across patch interfaces."""
    result = set(marked)
    pairs = []
    for iface in domain.interfaces:
        pairs.append((iface.patch_a, iface.side_a, iface.patch_b, iface.side_b, iface.flip))
        pairs.append((iface.patch_b, iface.side_b, iface.patch_a, iface.side_a, iface.flip))
    frontier = set(result)
    while frontier:
        added = set()
        for patch, level, flat in frontier:
            for pa, sa, pb, sb, flip in pairs:
                if pa != patch:
                    continue
                partner = _partner_element(domain, pa, sa, pb, sb, flip, level, flat)
                if partner is None or partner in result:
                    continue
                if domain.patches[pb].space.is_active(level, partner[2]):
                    added.add(partner)
                else:
                    logger.warning(
                        "mirror of element %s across %s/%s is not active on level %d",
                        (patch, level, flat), sa, sb, level,
                    )
        result |= added
        frontier = added
    return sorted(result)


def _partner_element(domain, pa, sa, pb, sb, flip, level, flat) -> ElementKey | None:
    ls_a = domain.patches[pa].space.levels[level]
    ls_b = domain.patches[pb].space.levels[level]
    eu, ev = ls_a.element_index(flat)
    nu_a, nv_a = ls_a.element_shape
    touching = {"south": ev == 0, "north": ev == nv_a - 1, "west": eu == 0, "east": eu == nu_a - 1}
    if not touching[sa]:
        return None
    along = eu if sa in ("south", "north") else ev
    nu_b, nv_b = ls_b.element_shape
    n_along = nu_b if sb in ("south", "north") else nv_b
    if flip:
        along = n_along - 1 - along
    bu, bv = {
        "south": (along, 0),
        "north": (along, nv_b - 1),
        "west": (0, along),
        "east": (nu_b - 1, along),
    }[sb]
    return pb, level, ls_b.element_flat(bu, bv)


def _quadrature_error(solution: DiscreteSolution, target: Callable) -> dict[ElementKey, float]:
    errors = {}
    for k, patch in enumerate(solution.domain.patches):
        p, q = patch.space.degrees
        rule = gauss_rule(p + 2, q + 2)
        for el in patch.space.elements():
            data = element_data(el, patch, rule)
            uh = data.values @ solution.bezier_coefficients(el)
            diff = target(k, el, data) - uh
            errors[el.key] = float(data.dx @ diff**2)
    return errors


def element_l2_errors(
    solution: DiscreteSolution,
    exact: Callable[[np.ndarray], np.ndarray] | None = None,
    reference: DiscreteSolution | None = None,
) -> dict[ElementKey, float]:
    """Squared L2 error per active element of `solution`.

    Against a reference the integrals run over reference elements and are
    accumulated on the ancestor element of the adapted mesh.
    """
    if exact is not None:
        return _quadrature_error(solution, lambda k, el, data: exact(data.points))
    if reference is None:
        raise ArgumentError("either an exact solution or a reference solution is required")
    domain = solution.domain
    if len(reference.domain.patches) != len(domain.patches):
        raise ArgumentError("reference solution lives on a different domain")
    errors = {el.key: 0.0 for patch in domain.patches for el in patch.space.elements()}
    for k, ref_patch in enumerate(reference.domain.patches):
        space = domain.patches[k].space
        ref_levels = set(l for l, a in enumerate(ref_patch.space.active_elements) if a)
        if len(ref_levels) != 1:
            raise ArgumentError("reference solution must live on a uniform level")
        ref_level = ref_levels.pop()
        if space.depth - 1 > ref_level:
            raise ArgumentError(
                f"adapted mesh reaches level {space.depth - 1}, reference only level {ref_level}"
            )
        p, q = ref_patch.space.degrees
        rule = gauss_rule(p + 2, q + 2)
        for el in ref_patch.space.elements():
            data = element_data(el, ref_patch, rule)
            u_ref = data.values @ reference.bezier_coefficients(el)
            (u0, u1), (v0, v1) = el.bounds
            owner = space.locate(0.5 * (u0 + u1), 0.5 * (v0 + v1))
            s, t = owner.local_coordinates(
                u0 + (u1 - u0) * rule.points[:, 0], v0 + (v1 - v0) * rule.points[:, 1]
            )
            uh = _bernstein_values(p, q, s, t) @ solution.bezier_coefficients(owner)
            errors[owner.key] += float(data.dx @ (u_ref - uh) ** 2)
    return errors


def _bernstein_values(p: int, q: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    bu = bernstein_eval(p, s)[0]
    bv = bernstein_eval(q, t)[0]
    return np.einsum("kj,ki->kji", bv, bu).reshape(s.size, -1)


def l2_error(
    solution: DiscreteSolution,
    exact: Callable[[np.ndarray], np.ndarray] | None = None,
    reference: DiscreteSolution | None = None,
) -> float:
    return math.sqrt(sum(element_l2_errors(solution, exact, reference).values()))


def l2_norm(solution: DiscreteSolution) -> float:
    return l2_error(solution, exact=lambda x: np.zeros(len(x)))


def energy_error(solution: DiscreteSolution, exact_gradient: Callable[[np.ndarray], np.ndarray]) -> float:
    """H1 seminorm of the error, the norm the two-mesh estimator measures."""
    total = 0.0
    for patch in solution.domain.patches:
        p, q = patch.space.degrees
        rule = gauss_rule(p + 2, q + 2)
        for el in patch.space.elements():
            data = element_data(el, patch, rule)
            grad_h = np.einsum("kbd,b->kd", data.gradients, solution.bezier_coefficients(el))
            diff = np.asarray(exact_gradient(data.points)) - grad_h
            total += float(data.dx @ np.sum(diff**2, axis=1))
    return math.sqrt(total)


def reference_solution(
    domain: MultipatchDomain, problem: PhysicsProblem, levels: int, workers: int = 1
) -> DiscreteSolution:
    """Solution on `levels` uniform refinements of the initial mesh."""
    for patch in domain.patches:
        if patch.space.depth != 1:
            raise ArgumentError("reference solutions start from an unrefined mesh")
        if levels >= patch.space.max_levels:
            raise ArgumentError(
                f"{levels} reference levels need a hierarchy with more than {levels} levels"
            )
    fine = refine_domain_uniform(domain, levels)
    logger.info("reference solution on %d elements", fine.n_elements)
    return solve_problem(fine, problem, workers)


def _level_cap(domain: MultipatchDomain, config: AdaptiveConfig, reference_level: int | None) -> int:
    cap = min(config.max_levels, domain.patches[0].space.max_levels)
    if reference_level is not None:
        cap = min(cap, reference_level + 1)
    return cap


def adaptive_loop(
    domain: MultipatchDomain,
    problem: PhysicsProblem,
    config: AdaptiveConfig,
    reference: DiscreteSolution | None = None,
    workers: int = 1,
    record_timings: bool = False,
    on_iteration: Callable[[int, DiscreteSolution], None] | None = None,
) -> AdaptiveResult:
    """SOLVE -> ESTIMATE -> MARK -> REFINE until the iteration or level budget is exhausted."""
    if config.marking == "true_error" and reference is None and problem.exact is None:
        raise ArgumentError("true-error marking needs an exact or reference solution")
    reference_level = None
    if reference is not None:
        reference_level = reference.domain.patches[0].space.depth - 1
    cap = _level_cap(domain, config, reference_level)
    if config.marking == "estimator" and cap >= domain.patches[0].space.max_levels:
        cap = domain.patches[0].space.max_levels - 1

    ref_norm = None
    if reference is not None and problem.exact is None:
        ref_norm = l2_norm(reference)

    records: list[ConvergenceRecord] = []
    current = domain
    solution = None
    for iteration in range(config.max_iterations + 1):
        start = time.perf_counter()
        estimator_total = None
        if config.marking == "estimator":
            estimate = estimate_two_mesh(current, problem, workers)
            solution = estimate.solution
            indicators = estimate.indicators
            estimator_total = math.sqrt(indicators.total)
        else:
            solution = solve_problem(current, problem, workers)

        errors = None
        l2 = relative = None
        if problem.exact is not None:
            errors = element_l2_errors(solution, exact=problem.exact)
            l2 = math.sqrt(sum(errors.values()))
            exact_norm = _exact_norm(solution, problem)
            relative = l2 / exact_norm if exact_norm > 0 else None
        elif reference is not None:
            errors = element_l2_errors(solution, reference=reference)
            l2 = math.sqrt(sum(errors.values()))
            relative = l2 / ref_norm if ref_norm else None

        record = ConvergenceRecord(
            iteration=iteration,
            dofs=solution.n_dofs,
            elements=current.n_elements,
            elements_per_level=current.elements_per_level(),
            l2_error=l2,
            relative_l2_error=relative,
            estimator_total=estimator_total,
            seconds=time.perf_counter() - start if record_timings else 0.0,
        )
        records.append(record)
        logger.info(
            "iteration %d: %d dofs, %d elements, l2 %s, estimator %s",
            iteration, record.dofs, record.elements,
            "-" if l2 is None else f"{l2:.6e}",
            "-" if estimator_total is None else f"{estimator_total:.6e}",
        )
        if on_iteration is not None:
            on_iteration(iteration, solution)
        if iteration == config.max_iterations:
            break
        if estimator_total is not None and estimator_total**2 < CONVERGED_ESTIMATOR:
            logger.info("estimator below %g, stopping", CONVERGED_ESTIMATOR)
            break

        if config.marking == "estimator":
            marked = mark_doerfler(indicators, config.theta)
        elif config.marking == "true_error":
            marked = mark_true_error(errors, config.tolerance)
        else:
            marked = [el.key for p in current.patches for el in p.space.elements()]
        marked = [key for key in marked if key[1] + 1 < cap]
        if not marked:
            logger.info("nothing left to refine below level %d, stopping", cap)
            break
        marked = mirror_marks(current, close_marks(current, marked))

        refined = refine_domain(current, marked)
        if all(
            a.space.active_elements == b.space.active_elements
            for a, b in zip(current.patches, refined.patches)
        ):
            raise InternalError("refinement left the mesh unchanged")
        n_refined = build_dof_map(refined).n_dofs
        if n_refined <= solution.n_dofs:
            raise InternalError(
                f"refinement of {len(marked)} elements left {n_refined} degrees of freedom "
                f"(was {solution.n_dofs})"
            )
        current = refined

    return AdaptiveResult(records, solution, current)


def _exact_norm(solution: DiscreteSolution, problem: PhysicsProblem) -> float:
    zero = DiscreteSolution(solution.domain, solution.dof_map, np.zeros(solution.n_dofs))
    return l2_error(zero, exact=problem.exact)
