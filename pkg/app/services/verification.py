"""Self-checks of the discretization run by `verify`."""
import logging
import math
from dataclasses import replace

import numpy as np

from app.schemas import CheckResult
from app.services.adaptivity import l2_error, refine_domain, refine_domain_uniform, solve_problem
from app.services.assembly import assemble, assemble_direct, build_dof_map
from app.services.hierarchy import (
    HierarchicalSpace,
    build_hierarchy,
    eval_hier_basis,
    eval_hier_direct,
    refine_elements,
)
from app.services.physics import manufactured_problem, poisson_peak_problem, unit_square_domain
from app.services.splines import (
    KnotVector,
    SplineSpace1D,
    TensorSpace2D,
    bernstein_eval,
    bezier_extraction,
    eval_basis,
    refine_dyadic,
)

logger = logging.getLogger(__name__)


def random_hierarchy(rng: np.random.Generator, levels: int = 4, degree: int = 2) -> HierarchicalSpace:
    """4x4 base mesh refined at random elements down to `levels` levels."""
    kv = KnotVector([0.0] * (degree + 1) + [0.25, 0.5, 0.75] + [1.0] * (degree + 1), degree)
    space = SplineSpace1D(kv)
    hs = build_hierarchy(TensorSpace2D(space, space), levels)
    for level in range(levels - 1):
        active = sorted(hs.active_elements[level])
        if not active:
            break
        count = max(1, len(active) // 3)
        chosen = rng.choice(active, size=count, replace=False)
        hs = refine_elements(hs, {level: chosen.tolist()})
    return hs


def check_partition_of_unity(rng: np.random.Generator, configs: int = 5, points: int = 200) -> CheckResult:
    worst = 0.0
    for _ in range(configs):
        hs = random_hierarchy(rng)
        for u, v in rng.random((points, 2)):
            _, values, _ = eval_hier_basis(hs, float(u), float(v))
            worst = max(worst, abs(values.sum() - 1.0))
    return CheckResult(
        name="partition_of_unity",
        passed=worst < 1e-12,
        detail=f"max |sum - 1| = {worst:.3e} over {configs} random hierarchies",
    )


def check_subdivision_identity(rng: np.random.Generator, points: int = 50) -> CheckResult:
    kv = KnotVector([0, 0, 0, 0.25, 0.5, 0.75, 0.75, 1, 1, 1], 2)
    coarse = SplineSpace1D(kv)
    fine, sub = refine_dyadic(coarse)
    worst = 0.0
    for xi in rng.random(points):
        span_c, n_c = eval_basis(coarse.knot_vector, float(xi))
        span_f, n_f = eval_basis(fine.knot_vector, float(xi))
        full_c = np.zeros(coarse.n_basis)
        full_f = np.zeros(fine.n_basis)
        full_c[span_c - 2 : span_c + 1] = n_c
        full_f[span_f - 2 : span_f + 1] = n_f
        worst = max(worst, float(np.abs(sub.matrix.T @ full_f - full_c).max()))
    return CheckResult(
        name="subdivision_identity",
        passed=worst < 1e-13,
        detail=f"max |S^T N_fine - N_coarse| = {worst:.3e}",
    )


def check_bezier_extraction(rng: np.random.Generator, points: int = 50) -> CheckResult:
    kv = KnotVector([0, 0, 0, 0.25, 0.5, 0.75, 0.75, 1, 1, 1], 2)
    space = SplineSpace1D(kv)
    ops = bezier_extraction(space)
    worst = 0.0
    for xi in rng.random(points):
        e = space.element_of(float(xi))
        a, b = space.element_bounds(e)
        _, values = eval_basis(kv, float(xi))
        bern = bernstein_eval(2, (float(xi) - a) / (b - a))[0]
        worst = max(worst, float(np.abs(ops[e].matrix @ bern - values).max()))
    return CheckResult(
        name="bezier_extraction",
        passed=worst < 1e-13,
        detail=f"max |E B - N| = {worst:.3e}",
    )


def check_local_extraction(rng: np.random.Generator, configs: int = 3, points: int = 10) -> CheckResult:
    worst = 0.0
    for _ in range(configs):
        hs = random_hierarchy(rng)
        for el in hs.elements():
            (u0, u1), (v0, v1) = el.bounds
            for s, t in rng.random((points, 2)):
                u, v = u0 + s * (u1 - u0), v0 + t * (v1 - v0)
                located, values, grads = eval_hier_basis(hs, u, v)
                if located is not el:
                    continue
                direct, direct_grads = eval_hier_direct(hs, u, v)
                full = np.zeros(hs.n_dofs)
                full[el.functions] = values
                worst = max(worst, float(np.abs(full - direct).max()))
    return CheckResult(
        name="local_extraction",
        passed=worst < 1e-12,
        detail=f"max |C^e B - direct| = {worst:.3e}",
    )


def check_assembly_equivalence(inject_fault: bool = False) -> CheckResult:
    """Bezier-element assembly against direct hierarchical quadrature on a corner-refined square."""
    domain = unit_square_domain(degree=2, elements=4, max_levels=3)
    domain = refine_domain(domain, [(0, 0, 0), (0, 0, 1), (0, 0, 4), (0, 0, 5)])
    problem = manufactured_problem()
    dof_map = build_dof_map(domain)
    elements = [list(p.space.elements()) for p in domain.patches]
    if inject_fault:
        el = elements[0][0]
        corrupted = el.operator.copy()
        corrupted[0, 0] += 0.25
        elements[0][0] = replace(el, operator=corrupted)
        logger.warning("verify: corrupted one entry of C^e on element %s", el.key)
    bezier = assemble(domain, problem, dof_map, elements=elements).matrix
    direct = assemble_direct(domain, problem, dof_map).matrix
    diff = float(np.linalg.norm((bezier - direct).toarray()))
    rel = diff / float(np.linalg.norm(direct.toarray()))
    return CheckResult(
        name="assembly_equivalence",
        passed=rel < 1e-10,
        detail=f"relative Frobenius difference {rel:.3e}",
    )


def check_convergence_rate(start: int = 8, steps: int = 4, degree: int = 2) -> CheckResult:
    """Uniform refinement of the peak problem; L2 slope against h should be degree + 1."""
    problem = poisson_peak_problem()
    domain = unit_square_domain(degree, start, steps + 1)
    errors, sizes = [], []
    for step in range(steps + 1):
        if step:
            domain = refine_domain_uniform(domain)
        solution = solve_problem(domain, problem)
        errors.append(l2_error(solution, exact=problem.exact))
        sizes.append(1.0 / (start * 2**step))
    slope = float(np.polyfit(np.log(sizes[-3:]), np.log(errors[-3:]), 1)[0])
    expected = degree + 1
    return CheckResult(
        name="convergence_rate",
        passed=math.isfinite(slope) and abs(slope - expected) <= 0.2,
        detail=f"fitted slope {slope:.3f} (expected {expected}), errors "
        + ", ".join(f"{e:.3e}" for e in errors),
    )


def run_checks(inject_fault: bool = False, seed: int = 0, quick: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = [
        check_partition_of_unity(rng),
        check_subdivision_identity(rng),
        check_bezier_extraction(rng),
        check_local_extraction(rng),
        check_assembly_equivalence(inject_fault),
        check_convergence_rate(steps=3 if quick else 4),
    ]
    for r in results:
        log = logger.info if r.passed else logger.error
        log("%s: %s (%s)", r.name, "ok" if r.passed else "FAILED", r.detail)
    return results
