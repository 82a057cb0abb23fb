"""Model problems, materials and the domains they are posed on.

A PhysicsProblem bundles the coefficient functions of
-div(nu grad A) = J + curl(nu B_r) together with optional Dirichlet data and
an exact solution for error measurement.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from app.config import HORSESHOE_GEOMETRY, MU_0
from app.errors import ArgumentError, ConfigurationError
from app.schemas import FieldSample, MaterialParams
from app.services.assembly import DiscreteSolution, Interface, MultipatchDomain, Patch
from app.services.geometry_io import GeometryModel, PatchRecord, read_geometry
from app.services.hierarchy import build_hierarchy
from app.services.splines import (
    ControlNet,
    KnotVector,
    SplineSpace1D,
    TensorSpace2D,
    uniform_refinement,
)

logger = logging.getLogger(__name__)

PointFunction = Callable[[np.ndarray], np.ndarray]
PatchFunction = Callable[[Patch, np.ndarray], np.ndarray]


def _constant(value: float) -> PatchFunction:
    return lambda patch, x: np.full(len(x), value)


@dataclass(frozen=True, eq=False)
class PhysicsProblem:
    name: str
    diffusion: PatchFunction
    source: PatchFunction
    magnetization: PatchFunction | None = None
    dirichlet: PointFunction | None = None
    exact: PointFunction | None = None
    exact_gradient: PointFunction | None = None
    materials: Mapping[str, MaterialParams] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def integrands(
        self, patch: Patch, x: np.ndarray, values: np.ndarray, gradients: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        return magnetostatic_weak_form(self, patch, x, values, gradients)


def magnetostatic_weak_form(
    problem: PhysicsProblem,
    patch: Patch,
    x: np.ndarray,
    values: np.ndarray,
    gradients: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Reluctivity and load integrand at quadrature points.

    The load tested against v is J v + nu (B_rx dv/dy - B_ry dv/dx), which is
    curl(nu B_r) moved onto the test function. Returns nu (nq,) and the
    load (nq, nb) for the nb basis functions sampled in `values`/`gradients`.
    """
    nu = np.asarray(problem.diffusion(patch, x), dtype=float)
    load = np.asarray(problem.source(patch, x), dtype=float)[:, None] * values
    if problem.magnetization is not None:
        br = np.asarray(problem.magnetization(patch, x), dtype=float)
        load = load + nu[:, None] * (
            br[:, 0, None] * gradients[:, :, 1] - br[:, 1, None] * gradients[:, :, 0]
        )
    return nu, load


def poisson_peak_problem(alpha: float = 100.0, center=(0.5, 0.5)) -> PhysicsProblem:
    """-lap u = f on the unit square with the exact solution exp(-alpha |x - c|^2)."""
    if alpha <= 0:
        raise ArgumentError("alpha must be positive")
    c = np.asarray(center, dtype=float)

    def exact(x):
        r2 = np.sum((np.atleast_2d(x) - c) ** 2, axis=1)
        return np.exp(-alpha * r2)

    def gradient(x):
        x = np.atleast_2d(x)
        return -2.0 * alpha * (x - c) * exact(x)[:, None]

    def source(patch, x):
        r2 = np.sum((x - c) ** 2, axis=1)
        return (4.0 * alpha - 4.0 * alpha**2 * r2) * np.exp(-alpha * r2)

    return PhysicsProblem(
        name="poisson_peak",
        diffusion=_constant(1.0),
        source=source,
        dirichlet=exact,
        exact=exact,
        exact_gradient=gradient,
        metadata={"alpha": alpha, "center": c.tolist()},
    )


def manufactured_problem(nu: float = 1.0) -> PhysicsProblem:
    """Polynomial solution A = x(1-x)y(1-y) with homogeneous Dirichlet data."""

    def exact(x):
        x = np.atleast_2d(x)
        return x[:, 0] * (1 - x[:, 0]) * x[:, 1] * (1 - x[:, 1])

    def gradient(x):
        x = np.atleast_2d(x)
        gx = (1 - 2 * x[:, 0]) * x[:, 1] * (1 - x[:, 1])
        gy = x[:, 0] * (1 - x[:, 0]) * (1 - 2 * x[:, 1])
        return np.column_stack([gx, gy])

    def source(patch, x):
        return 2.0 * nu * (x[:, 0] * (1 - x[:, 0]) + x[:, 1] * (1 - x[:, 1]))

    return PhysicsProblem(
        name="manufactured",
        diffusion=_constant(nu),
        source=source,
        exact=exact,
        exact_gradient=gradient,
        metadata={"nu": nu},
    )


def dirichlet_problem(g: PointFunction, nu: float = 1.0, exact: bool = False) -> PhysicsProblem:
    """Source-free problem driven only by boundary data g; g is the solution when harmonic."""
    return PhysicsProblem(
        name="dirichlet",
        diffusion=_constant(nu),
        source=_constant(0.0),
        dirichlet=g,
        exact=g if exact else None,
        metadata={"nu": nu},
    )


def default_materials() -> dict[str, MaterialParams]:
    """Air, iron and a magnet polarized along +y; configuration defaults, override per run."""
    return {
        "air": MaterialParams(mu_r=1.0),
        "iron": MaterialParams(mu_r=2000.0),
        "magnet": MaterialParams(mu_r=1.05, br_y=1.2),
    }


def resolve_materials(overrides: Mapping[str, MaterialParams] | None) -> dict[str, MaterialParams]:
    """Defaults updated field by field with the explicitly set override values."""
    materials = default_materials()
    for tag, params in (overrides or {}).items():
        base = materials.get(tag, MaterialParams())
        update = {name: getattr(params, name) for name in params.model_fields_set}
        materials[tag] = base.model_copy(update=update)
    return materials


def magnetostatic_problem(
    domain: MultipatchDomain, materials: Mapping[str, MaterialParams] | None = None
) -> PhysicsProblem:
    """Vector-potential problem with piecewise constant materials and A = 0 on the outer boundary."""
    materials = dict(materials) if materials is not None else default_materials()
    missing = sorted({p.material for p in domain.patches} - set(materials))
    if missing:
        raise ConfigurationError(f"no material parameters for tags {missing}")

    def diffusion(patch, x):
        return np.full(len(x), 1.0 / (MU_0 * materials[patch.material].mu_r))

    def source(patch, x):
        return np.full(len(x), materials[patch.material].jz)

    def magnetization(patch, x):
        return np.tile(np.asarray(materials[patch.material].remanence), (len(x), 1))

    return PhysicsProblem(
        name="magnetostatic",
        diffusion=diffusion,
        source=source,
        magnetization=magnetization,
        materials=materials,
        metadata={tag: m.model_dump() for tag, m in materials.items()},
    )


def _identity_net(space: TensorSpace2D, x0: float, x1: float, y0: float, y1: float) -> ControlNet:
    gu = space.space_u.greville
    gv = space.space_v.greville
    xx, yy = np.meshgrid(x0 + (x1 - x0) * gu, y0 + (y1 - y0) * gv)
    return ControlNet(np.column_stack([xx.ravel(), yy.ravel()]))


def _solution_space(geometry: TensorSpace2D, elements: int, max_levels: int, truncated: bool, patch: int):
    base = TensorSpace2D(
        uniform_refinement(geometry.space_u, elements),
        uniform_refinement(geometry.space_v, elements),
    )
    return build_hierarchy(base, max_levels, truncated, patch)


def unit_square_domain(
    degree: int = 2,
    elements: int = 4,
    max_levels: int = 4,
    split: bool = False,
    truncated: bool = True,
) -> MultipatchDomain:
    """Unit square as one patch or as two patches split at x = 1/2."""
    kv = KnotVector([0.0] * (degree + 1) + [1.0] * (degree + 1), degree)
    geometry = TensorSpace2D(SplineSpace1D(kv), SplineSpace1D(kv))
    if not split:
        net = _identity_net(geometry, 0.0, 1.0, 0.0, 1.0)
        space = _solution_space(geometry, elements, max_levels, truncated, 0)
        return MultipatchDomain((Patch(geometry, net, "air", space),), (), "unit_square")
    if elements % 2:
        raise ArgumentError("a split unit square needs an even number of elements")
    patches = []
    for k, (x0, x1) in enumerate([(0.0, 0.5), (0.5, 1.0)]):
        net = _identity_net(geometry, x0, x1, 0.0, 1.0)
        base = TensorSpace2D(
            uniform_refinement(geometry.space_u, elements // 2),
            uniform_refinement(geometry.space_v, elements),
        )
        patches.append(Patch(geometry, net, "air", build_hierarchy(base, max_levels, truncated, k)))
    return MultipatchDomain(tuple(patches), (Interface(0, "east", 1, "west", 0),), "unit_square_split")


def build_domain(
    model: GeometryModel,
    degree: int | None,
    elements: int,
    max_levels: int,
    truncated: bool = True,
    name: str = "domain",
) -> MultipatchDomain:
    """Multipatch domain from a parsed geometry file, pre-refined uniformly."""
    patches = []
    for k, record in enumerate(model.patches):
        geometry = _record_space(record)
        if degree is not None and geometry.degrees != (degree, degree):
            raise ConfigurationError(
                f"patch {k} has degree {geometry.degrees}, run asks for {degree}; "
                "degree elevation is not supported"
            )
        if record.weights is not None and np.any(record.weights != 1.0):
            logger.warning("patch %d: control point weights are ignored", k)
        net = ControlNet(record.points)
        space = _solution_space(geometry, elements, max_levels, truncated, k)
        patches.append(Patch(geometry, net, record.material, space))
    interfaces = tuple(
        Interface(i.patch_a, i.side_a, i.patch_b, i.side_b, i.flip) for i in model.interfaces
    )
    return MultipatchDomain(tuple(patches), interfaces, name)


def _record_space(record: PatchRecord) -> TensorSpace2D:
    p, q = record.degree
    space = TensorSpace2D(
        SplineSpace1D(KnotVector(record.knots_u, p)),
        SplineSpace1D(KnotVector(record.knots_v, q)),
    )
    if space.n_basis != len(record.points):
        raise ConfigurationError(
            f"patch {record.index}: {len(record.points)} control points for {space.n_basis} functions"
        )
    return space


def horseshoe_domain(
    path: Path | None = None,
    degree: int | None = None,
    elements: int = 2,
    max_levels: int = 4,
    truncated: bool = True,
) -> MultipatchDomain:
    """Horseshoe magnet above an iron sheet in an air box (bundled geometry by default)."""
    model = read_geometry(path or HORSESHOE_GEOMETRY)
    return build_domain(model, degree, elements, max_levels, truncated, "horseshoe")


def locate_point(
    domain: MultipatchDomain, x: np.ndarray, tol: float = 1e-10
) -> tuple[int, float, float] | None:
    """Patch and parameters of a physical point by Newton inversion of each patch map."""
    x = np.asarray(x, dtype=float)
    for k, patch in enumerate(domain.patches):
        pts = patch.net.points[:, :2]
        margin = tol * (1.0 + np.abs(pts).max())
        if np.any(x < pts.min(axis=0) - margin) or np.any(x > pts.max(axis=0) + margin):
            continue
        lo_u, hi_u = patch.geometry.space_u.knot_vector.domain
        lo_v, hi_v = patch.geometry.space_v.knot_vector.domain
        u, v = 0.5 * (lo_u + hi_u), 0.5 * (lo_v + hi_v)
        scale = 1.0 + np.abs(pts).max()
        for _ in range(50):
            point, jac = patch.map([u], [v])
            residual = point[0, 0] - x
            if np.linalg.norm(residual) <= tol * scale:
                return k, u, v
            try:
                step = np.linalg.solve(jac[0, 0], residual)
            except np.linalg.LinAlgError:
                break
            u = float(np.clip(u - step[0], lo_u, hi_u))
            v = float(np.clip(v - step[1], lo_v, hi_v))
        point, _ = patch.map([u], [v])
        if np.linalg.norm(point[0, 0] - x) <= tol * scale:
            return k, u, v
    return None


def postprocess_B(solution: DiscreteSolution, points: np.ndarray) -> list[FieldSample]:
    """Flux density B = (dA/dy, -dA/dx) at physical points; points outside are skipped."""
    samples = []
    for x in np.atleast_2d(points):
        found = locate_point(solution.domain, x)
        if found is None:
            logger.warning("point (%g, %g) lies outside the domain, skipped", x[0], x[1])
            continue
        k, u, v = found
        value, grad, _ = solution.evaluate(k, u, v)
        samples.append(
            FieldSample(
                point=(float(x[0]), float(x[1])),
                patch=k,
                parameter=(u, v),
                az=value,
                b=(float(grad[1]), float(-grad[0])),
            )
        )
    return samples
