"""Multipatch domains, element integration on Bezier elements and global assembly.

Element matrices are integrated against the Bernstein basis of the element and
mapped to hierarchical functions with C^e K C^e^T. Patches are glued by merging
the degrees of freedom whose Greville anchors coincide in physical space.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import norm as sparse_norm
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from app.config import (
    COINCIDENCE_TOLERANCE,
    DIRICHLET_CONFLICT_TOLERANCE,
    INTERFACE_TOLERANCE,
    MAX_GAUSS_POINTS,
    REFINEMENT_STEPS,
    SOLVER_TOLERANCE,
)
from app.errors import ArgumentError, ConfigurationError, GeometryError, SolverError
from app.services.hierarchy import SIDES, HierarchicalSpace, HierElement
from app.services.splines import (
    ControlNet,
    TensorSpace2D,
    basis_matrix,
    bernstein_eval,
)

if TYPE_CHECKING:
    from app.services.physics import PhysicsProblem

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Interface:
    """Shared side of two patches; flip=1 when the sides run in opposite directions."""

    patch_a: int
    side_a: str
    patch_b: int
    side_b: str
    flip: int = 0

    def __post_init__(self) -> None:
        if self.side_a not in SIDES or self.side_b not in SIDES:
            raise ArgumentError(f"unknown interface side in {self}")
        if self.flip not in (0, 1):
            raise ArgumentError("interface flip must be 0 or 1")


@dataclass(frozen=True, eq=False)
class Patch:
    geometry: TensorSpace2D
    net: ControlNet
    material: str
    space: HierarchicalSpace

    def map(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        """Physical points and Jacobians on the tensor grid u x v.

        Returns points (len(v), len(u), 2) and Jacobians (len(v), len(u), 2, 2)
        with J[..., a, b] = d x_a / d u_b.
        """
        u = np.atleast_1d(np.asarray(u, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        n_u, n_v = self.geometry.shape
        grid = self.net.grid(n_u, n_v)[..., :2]
        nu = basis_matrix(self.geometry.space_u.knot_vector, u, 1)
        nv = basis_matrix(self.geometry.space_v.knot_vector, v, 1)
        points = np.einsum("bj,ai,jid->bad", nv[0], nu[0], grid)
        du = np.einsum("bj,ai,jid->bad", nv[0], nu[1], grid)
        dv = np.einsum("bj,ai,jid->bad", nv[1], nu[0], grid)
        return points, np.stack([du, dv], axis=-1)

    def point(self, u: float, v: float) -> np.ndarray:
        return self.map([u], [v])[0][0, 0]

    def side_points(self, side: str) -> np.ndarray:
        n_u, n_v = self.geometry.shape
        grid = self.net.grid(n_u, n_v)
        return {
            "south": grid[0, :],
            "north": grid[-1, :],
            "west": grid[:, 0],
            "east": grid[:, -1],
        }[side]

    def side_knots(self, side: str) -> np.ndarray:
        space = self.geometry.space_u if side in ("south", "north") else self.geometry.space_v
        return space.knots


@dataclass(frozen=True, eq=False)
class MultipatchDomain:
    patches: tuple[Patch, ...]
    interfaces: tuple[Interface, ...] = ()
    name: str = "domain"

    def __post_init__(self) -> None:
        if not self.patches:
            raise ConfigurationError("a domain needs at least one patch")
        for iface in self.interfaces:
            for idx in (iface.patch_a, iface.patch_b):
                if not 0 <= idx < len(self.patches):
                    raise ConfigurationError(f"interface refers to missing patch {idx}")
            a = self.patches[iface.patch_a]
            b = self.patches[iface.patch_b]
            pts_a, pts_b = a.side_points(iface.side_a), b.side_points(iface.side_b)
            knots_a, knots_b = a.side_knots(iface.side_a), b.side_knots(iface.side_b)
            if iface.flip:
                pts_b = pts_b[::-1]
                knots_b = knots_b[0] + knots_b[-1] - knots_b[::-1]
            if (
                pts_a.shape != pts_b.shape
                or not np.allclose(pts_a, pts_b, rtol=0, atol=COINCIDENCE_TOLERANCE)
                or knots_a.shape != knots_b.shape
                or not np.allclose(knots_a, knots_b, rtol=0, atol=COINCIDENCE_TOLERANCE)
            ):
                raise ConfigurationError(
                    f"non-conforming interface: patch {iface.patch_a} {iface.side_a} / "
                    f"patch {iface.patch_b} {iface.side_b}"
                )

    @property
    def n_elements(self) -> int:
        return sum(p.space.n_elements for p in self.patches)

    def with_spaces(self, spaces: Sequence[HierarchicalSpace]) -> "MultipatchDomain":
        patches = tuple(replace(p, space=s) for p, s in zip(self.patches, spaces, strict=True))
        return MultipatchDomain(patches, self.interfaces, self.name)

    def outer_sides(self) -> list[tuple[int, str]]:
        inner = {(i.patch_a, i.side_a) for i in self.interfaces}
        inner |= {(i.patch_b, i.side_b) for i in self.interfaces}
        return [(k, s) for k in range(len(self.patches)) for s in SIDES if (k, s) not in inner]

    def elements_per_level(self) -> list[int]:
        depth = max(p.space.depth for p in self.patches)
        counts = [0] * depth
        for p in self.patches:
            for level, n in enumerate(p.space.elements_per_level()):
                counts[level] += n
        return counts


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Tensor Gauss-Legendre rule on [0, 1]^2; point k = b * n_u + a."""

    nodes_u: np.ndarray
    weights_u: np.ndarray
    nodes_v: np.ndarray
    weights_v: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.outer(self.weights_v, self.weights_u).ravel()

    @property
    def points(self) -> np.ndarray:
        uu, vv = np.meshgrid(self.nodes_u, self.nodes_v)
        return np.column_stack([uu.ravel(), vv.ravel()])


def gauss_1d(n: int) -> tuple[np.ndarray, np.ndarray]:
    if not 1 <= n <= MAX_GAUSS_POINTS:
        raise ArgumentError(f"quadrature takes 1 to {MAX_GAUSS_POINTS} points, got {n}")
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_rule(n_u: int, n_v: int | None = None) -> QuadratureRule:
    xu, wu = gauss_1d(n_u)
    xv, wv = gauss_1d(n_u if n_v is None else n_v)
    return QuadratureRule(xu, wu, xv, wv)


@dataclass(frozen=True, eq=False)
class ElementData:
    """Quadrature data of one Bezier element in physical space."""

    points: np.ndarray     # (nq, 2)
    dx: np.ndarray         # (nq,) quadrature weight times |det J| times element area
    values: np.ndarray     # (nq, nb) Bernstein values
    gradients: np.ndarray  # (nq, nb, 2) physical Bernstein gradients


def element_data(el: HierElement, patch: Patch, rule: QuadratureRule) -> ElementData:
    p, q = patch.space.degrees
    (u0, _), (v0, _) = el.bounds
    hu, hv = el.sizes
    us = u0 + hu * rule.nodes_u
    vs = v0 + hv * rule.nodes_v
    x, jac = patch.map(us, vs)
    x = x.reshape(-1, 2)
    jac = jac.reshape(-1, 2, 2)
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    if np.any(det <= 0.0):
        raise GeometryError(
            f"non-positive Jacobian on patch {el.patch}, element {el.flat} of level {el.level}"
        )
    bu = bernstein_eval(p, rule.nodes_u, 1)
    bv = bernstein_eval(q, rule.nodes_v, 1)
    nq, nb = rule.weights.size, (p + 1) * (q + 1)
    values = np.einsum("bj,ai->baji", bv[0], bu[0]).reshape(nq, nb)
    grad_u = np.einsum("bj,ai->baji", bv[0], bu[1]).reshape(nq, nb) / hu
    grad_v = np.einsum("bj,ai->baji", bv[1], bu[0]).reshape(nq, nb) / hv
    param = np.stack([grad_u, grad_v], axis=-1)
    inv = np.linalg.inv(jac)
    gradients = np.einsum("qji,qkj->qki", inv, param)
    dx = rule.weights * det * hu * hv
    return ElementData(x, dx, values, gradients)


def element_stiffness_bezier(
    el: HierElement,
    patch: Patch,
    problem: "PhysicsProblem",
    rule: QuadratureRule | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stiffness matrix and load vector against the element's Bernstein basis."""
    p, q = patch.space.degrees
    rule = rule or gauss_rule(p + 1, q + 1)
    data = element_data(el, patch, rule)
    nu, load = problem.integrands(patch, data.points, data.values, data.gradients)
    k_bez = np.einsum("q,qai,qbi->ab", data.dx * nu, data.gradients, data.gradients)
    f_bez = data.dx @ load
    return 0.5 * (k_bez + k_bez.T), f_bez


def transform_element(k_bez: np.ndarray, operator: np.ndarray) -> np.ndarray:
    """Element matrix C K C^T in the hierarchical basis."""
    if operator.shape[1] != k_bez.shape[0]:
        raise ArgumentError(
            f"extraction operator with {operator.shape[1]} columns does not match "
            f"a {k_bez.shape[0]}x{k_bez.shape[1]} Bezier matrix"
        )
    ke = operator @ k_bez @ operator.T
    return 0.5 * (ke + ke.T)


@dataclass(frozen=True, eq=False)
class DofMap:
    """Patch-local hierarchical DOF -> global DOF."""

    local_to_global: tuple[np.ndarray, ...]
    n_dofs: int

    def __getitem__(self, patch: int) -> np.ndarray:
        return self.local_to_global[patch]


def _side_anchors(patch: Patch, side: str) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Physical Greville anchors of side functions grouped by level."""
    hs = patch.space
    out: dict[int, tuple[list, list]] = {}
    for dof, level, flat in hs.side_dofs(side):
        u, v = hs.function_anchor(level, flat)
        dofs, pts = out.setdefault(level, ([], []))
        dofs.append(dof)
        pts.append(patch.point(u, v))
    return {l: (np.array(d), np.array(p)) for l, (d, p) in out.items()}


def build_dof_map(domain: MultipatchDomain) -> DofMap:
    """Glue patch DOFs along interfaces; merged DOFs take the smallest global index."""
    offsets = np.cumsum([0] + [p.space.n_dofs for p in domain.patches])
    total = int(offsets[-1])
    rows, cols = [], []
    for iface in domain.interfaces:
        anchors_a = _side_anchors(domain.patches[iface.patch_a], iface.side_a)
        anchors_b = _side_anchors(domain.patches[iface.patch_b], iface.side_b)
        where = (
            f"patch {iface.patch_a} {iface.side_a} / patch {iface.patch_b} {iface.side_b}"
        )
        if sorted(anchors_a) != sorted(anchors_b):
            raise ConfigurationError(f"non-conforming refinement on interface {where}")
        for level, (dofs_a, pts_a) in anchors_a.items():
            dofs_b, pts_b = anchors_b[level]
            if dofs_a.size != dofs_b.size:
                raise ConfigurationError(
                    f"non-conforming refinement on level {level} of interface {where}"
                )
            dist, idx = cKDTree(pts_b).query(pts_a, distance_upper_bound=INTERFACE_TOLERANCE)
            if np.any(~np.isfinite(dist)) or np.unique(idx).size != idx.size:
                raise ConfigurationError(
                    f"interface functions do not match on level {level} of {where}"
                )
            rows.append(offsets[iface.patch_a] + dofs_a)
            cols.append(offsets[iface.patch_b] + dofs_b[idx])
    if rows:
        r, c = np.concatenate(rows), np.concatenate(cols)
        graph = sparse.coo_matrix((np.ones(r.size), (r, c)), shape=(total, total))
        _, labels = connected_components(graph, directed=False)
    else:
        labels = np.arange(total)
    l2g = tuple(labels[offsets[k] : offsets[k + 1]].astype(np.int64) for k in range(len(domain.patches)))
    n_dofs = int(labels.max()) + 1 if total else 0
    logger.debug("dof map: %d patch DOFs merged into %d global DOFs", total, n_dofs)
    return DofMap(l2g, n_dofs)


@dataclass(frozen=True, eq=False)
class LinearSystem:
    matrix: sparse.csr_matrix
    rhs: np.ndarray
    dof_map: DofMap | None = None
    dirichlet_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dirichlet_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_dofs(self) -> int:
        return self.matrix.shape[0]

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return np.flatnonzero(mask)

    def reduced(self) -> tuple[sparse.csr_matrix, np.ndarray]:
        """Free-free block and right-hand side with the Dirichlet columns moved over."""
        free = self.free_dofs
        matrix = self.matrix[free][:, free]
        rhs = self.rhs[free]
        if self.dirichlet_dofs.size:
            rhs = rhs - self.matrix[free][:, self.dirichlet_dofs] @ self.dirichlet_values
        return matrix.tocsr(), rhs

    def expand(self, free_values: np.ndarray) -> np.ndarray:
        full = np.zeros(self.n_dofs)
        full[self.free_dofs] = free_values
        full[self.dirichlet_dofs] = self.dirichlet_values
        return full


def _assemble_elements(
    domain: MultipatchDomain,
    problem: "PhysicsProblem",
    dof_map: DofMap,
    elements: Sequence[Sequence[HierElement]],
    workers: int,
) -> LinearSystem:
    jobs = [(k, el) for k, els in enumerate(elements) for el in els]

    def integrate(job):
        k, el = job
        patch = domain.patches[k]
        k_bez, f_bez = element_stiffness_bezier(el, patch, problem)
        return dof_map[k][el.functions], transform_element(k_bez, el.operator), el.operator @ f_bez

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(integrate, jobs))
    else:
        results = [integrate(job) for job in jobs]

    n = dof_map.n_dofs
    rhs = np.zeros(n)
    rows, cols, data = [], [], []
    for dofs, ke, fe in results:
        m = dofs.size
        rows.append(np.repeat(dofs, m))
        cols.append(np.tile(dofs, m))
        data.append(ke.ravel())
        np.add.at(rhs, dofs, fe)
    if rows:
        matrix = sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
    else:
        matrix = sparse.csr_matrix((n, n))
    return LinearSystem(matrix, rhs, dof_map)


def assemble(
    domain: MultipatchDomain,
    problem: "PhysicsProblem",
    dof_map: DofMap | None = None,
    elements: Sequence[Sequence[HierElement]] | None = None,
    workers: int = 1,
) -> LinearSystem:
    """Global stiffness matrix and load vector via multi-level Bezier extraction.

    `elements` replaces the cached per-patch element lists when given.
    """
    dof_map = dof_map or build_dof_map(domain)
    if elements is None:
        elements = [p.space.elements(workers) for p in domain.patches]
    system = _assemble_elements(domain, problem, dof_map, elements, workers)
    logger.info(
        "assembled %d x %d system from %d elements (%d nonzeros)",
        system.n_dofs, system.n_dofs, domain.n_elements, system.matrix.nnz,
    )
    return system


def assemble_direct(
    domain: MultipatchDomain, problem: "PhysicsProblem", dof_map: DofMap | None = None
) -> LinearSystem:
    """Reference assembly that evaluates hierarchical functions through the global chain.

    Each element's basis comes from M_glob of its level times the tensor
    B-spline basis, without any Bezier extraction.
    """
    dof_map = dof_map or build_dof_map(domain)
    n = dof_map.n_dofs
    rows, cols, data = [], [], []
    rhs = np.zeros(n)
    for k, patch in enumerate(domain.patches):
        hs = patch.space
        p, q = hs.degrees
        rule = gauss_rule(p + 1, q + 1)
        m_globs = {level: hs.multilevel_matrix(level) for level in range(hs.depth)}
        for el in hs.elements():
            m_glob = m_globs[el.level]
            space = hs.levels[el.level].space
            (u0, _), (v0, _) = el.bounds
            hu, hv = el.sizes
            us, vs = u0 + hu * rule.nodes_u, v0 + hv * rule.nodes_v
            nu = basis_matrix(space.space_u.knot_vector, us, 1)
            nv = basis_matrix(space.space_v.knot_vector, vs, 1)
            local = space.element_functions(*el.index)
            nu = nu[:, :, local[: p + 1] % space.shape[0]]
            nv = nv[:, :, local[:: p + 1] // space.shape[0]]
            block = m_glob[:, local]
            support = np.flatnonzero(np.any(block != 0.0, axis=1))
            block = block[support]
            nq = rule.weights.size
            vals = np.einsum("bj,ai->baji", nv[0], nu[0]).reshape(nq, -1) @ block.T
            gu = np.einsum("bj,ai->baji", nv[0], nu[1]).reshape(nq, -1) @ block.T
            gv = np.einsum("bj,ai->baji", nv[1], nu[0]).reshape(nq, -1) @ block.T
            x, jac = patch.map(us, vs)
            x, jac = x.reshape(-1, 2), jac.reshape(-1, 2, 2)
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            if np.any(det <= 0.0):
                raise GeometryError(f"non-positive Jacobian on patch {k}")
            grads = np.einsum("qji,qkj->qki", np.linalg.inv(jac), np.stack([gu, gv], axis=-1))
            dx = rule.weights * det * hu * hv
            nu_coef, load = problem.integrands(patch, x, vals, grads)
            ke = np.einsum("q,qai,qbi->ab", dx * nu_coef, grads, grads)
            dofs = dof_map[k][support]
            rows.append(np.repeat(dofs, dofs.size))
            cols.append(np.tile(dofs, dofs.size))
            data.append(0.5 * (ke + ke.T).ravel())
            np.add.at(rhs, dofs, dx @ load)
    matrix = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    return LinearSystem(matrix, rhs, dof_map)


@dataclass(frozen=True)
class BoundarySpec:
    """Dirichlet data g imposed on the listed (patch, side) pairs; g=None means homogeneous."""

    sides: tuple[tuple[int, str], ...]
    g: Callable[[np.ndarray], np.ndarray] | None = None


def _side_corners(hs: HierarchicalSpace, side: str) -> set[int]:
    """Local DOFs of the two corner functions at the ends of `side`."""
    corners = set()
    for dof, level, flat in hs.side_dofs(side):
        n_u, n_v = hs.levels[level].space.shape
        i, j = flat % n_u, flat // n_u
        along, n_along = (i, n_u) if side in ("south", "north") else (j, n_v)
        if along in (0, n_along - 1):
            corners.add(dof)
    return corners


def _project_side(
    patch: Patch, side: str, g: Callable[[np.ndarray], np.ndarray]
) -> dict[int, float]:
    """Constrained L2 projection of g onto the trace space of one side (local DOFs)."""
    hs = patch.space
    side_dofs = [dof for dof, _, _ in hs.side_dofs(side)]
    corners = _side_corners(hs, side)
    values: dict[int, float] = {}
    info = hs.dof_info()
    for dof in corners:
        level, flat = info[dof]
        u, v = hs.function_anchor(level, flat)
        lo_u, hi_u = hs.levels[0].space.space_u.knot_vector.domain
        lo_v, hi_v = hs.levels[0].space.space_v.knot_vector.domain
        u = lo_u if u <= 0.5 * (lo_u + hi_u) else hi_u
        v = lo_v if v <= 0.5 * (lo_v + hi_v) else hi_v
        values[dof] = float(g(patch.point(u, v)[None, :])[0])
    interior = [d for d in side_dofs if d not in corners]
    if not interior:
        return values

    index = {d: r for r, d in enumerate(side_dofs)}
    mass = np.zeros((len(side_dofs), len(side_dofs)))
    load = np.zeros(len(side_dofs))
    p, q = hs.degrees
    along_u = side in ("south", "north")
    n_gauss = (p if along_u else q) + 2
    xs, ws = gauss_1d(n_gauss)
    fixed = {"south": 0.0, "west": 0.0, "north": 1.0, "east": 1.0}[side]
    for el in hs.side_elements(side):
        (u0, u1), (v0, v1) = el.bounds
        if along_u:
            us = u0 + (u1 - u0) * xs
            vs = np.array([v0 if fixed == 0.0 else v1])
            s, t = xs, np.array([fixed])
            length = u1 - u0
        else:
            us = np.array([u0 if fixed == 0.0 else u1])
            vs = v0 + (v1 - v0) * xs
            s, t = np.array([fixed]), xs
            length = v1 - v0
        x, jac = patch.map(us, vs)
        x, jac = x.reshape(-1, 2), jac.reshape(-1, 2, 2)
        tangent = jac[:, :, 0] if along_u else jac[:, :, 1]
        ds = ws * np.linalg.norm(tangent, axis=1) * length
        bern = np.einsum(
            "bj,ai->baji", bernstein_eval(q, t)[0], bernstein_eval(p, s)[0]
        ).reshape(xs.size, -1)
        phi = bern @ el.operator.T
        keep = [r for r, f in enumerate(el.functions) if int(f) in index]
        phi = phi[:, keep]
        loc = np.array([index[int(el.functions[r])] for r in keep])
        gx = np.asarray(g(x), dtype=float)
        mass[np.ix_(loc, loc)] += np.einsum("q,qa,qb->ab", ds, phi, phi)
        load[loc] += np.einsum("q,q,qa->a", ds, gx, phi)

    free = np.array([index[d] for d in interior])
    fixed_idx = np.array([index[d] for d in corners], dtype=np.int64)
    rhs = load[free]
    if fixed_idx.size:
        rhs = rhs - mass[np.ix_(free, fixed_idx)] @ np.array([values[d] for d in corners])
    try:
        coef = np.linalg.solve(mass[np.ix_(free, free)], rhs)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"boundary projection on {side} side is singular") from exc
    values.update({d: float(c) for d, c in zip(interior, coef)})
    return values


def apply_dirichlet(
    system: LinearSystem,
    domain: MultipatchDomain,
    boundary: BoundarySpec | Sequence[BoundarySpec],
) -> LinearSystem:
    """Attach Dirichlet DOFs and values; elimination happens in `reduced`.

    DOFs shared by several sides (corners, interface end points) must receive
    the same value from every side.
    """
    dof_map = system.dof_map or build_dof_map(domain)
    specs = [boundary] if isinstance(boundary, BoundarySpec) else list(boundary)
    assigned: dict[int, float] = {}
    for k, side, g in ((k, s, spec.g) for spec in specs for k, s in spec.sides):
        patch = domain.patches[k]
        if g is None:
            local = {dof: 0.0 for dof, _, _ in patch.space.side_dofs(side)}
        else:
            local = _project_side(patch, side, g)
        for dof, value in local.items():
            gdof = int(dof_map[k][dof])
            old = assigned.get(gdof)
            if old is not None and abs(old - value) > DIRICHLET_CONFLICT_TOLERANCE:
                raise ConfigurationError(
                    f"conflicting Dirichlet values at global DOF {gdof} "
                    f"(patch {k} {side}: {value!r} vs {old!r})"
                )
            assigned[gdof] = value
    dofs = np.array(sorted(assigned), dtype=np.int64)
    values = np.array([assigned[d] for d in dofs])
    return replace(system, dirichlet_dofs=dofs, dirichlet_values=values)


def dirichlet_boundary(domain: MultipatchDomain, problem: "PhysicsProblem") -> BoundarySpec:
    return BoundarySpec(tuple(domain.outer_sides()), problem.dirichlet)


def solve(system: LinearSystem) -> np.ndarray:
    """Direct sparse solve of the reduced system; returns the full coefficient vector.

    The relative residual is the normwise backward error
    |Ax - b| / (|A| |x| + |b|) in the infinity norm. Up to
    REFINEMENT_STEPS steps of iterative refinement are taken while it exceeds
    SOLVER_TOLERANCE; a solve that stays above it raises SolverError.
    """
    matrix, rhs = system.reduced()
    if matrix.shape[0] == 0:
        return system.expand(np.zeros(0))
    try:
        lu = splu(matrix.tocsc())
        x = lu.solve(rhs)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    a_norm = sparse_norm(matrix, np.inf)
    for step in range(REFINEMENT_STEPS + 1):
        if not np.all(np.isfinite(x)):
            raise SolverError("solution contains non-finite values")
        r = rhs - matrix @ x
        scale = a_norm * np.linalg.norm(x, np.inf) + np.linalg.norm(rhs, np.inf)
        residual = np.linalg.norm(r, np.inf) / scale if scale > 0 else 0.0
        if residual <= SOLVER_TOLERANCE or step == REFINEMENT_STEPS:
            break
        x = x + lu.solve(r)
    if residual > SOLVER_TOLERANCE:
        raise SolverError(
            f"relative residual {residual:.3e} exceeds {SOLVER_TOLERANCE:g} "
            f"after {REFINEMENT_STEPS} refinement steps"
        )
    logger.debug("relative residual %.3e after %d refinement steps", residual, step)
    return system.expand(x)


class DiscreteSolution:
    """Coefficient vector on a domain, evaluable per element via Bernstein coefficients."""

    def __init__(self, domain: MultipatchDomain, dof_map: DofMap, coefficients: np.ndarray):
        if coefficients.shape != (dof_map.n_dofs,):
            raise ArgumentError(
                f"expected {dof_map.n_dofs} coefficients, got {coefficients.shape}"
            )
        self.domain = domain
        self.dof_map = dof_map
        self.coefficients = coefficients
        self._bezier: dict[tuple[int, int, int], np.ndarray] = {}

    @property
    def n_dofs(self) -> int:
        return self.dof_map.n_dofs

    def bezier_coefficients(self, el: HierElement) -> np.ndarray:
        key = el.key
        coef = self._bezier.get(key)
        if coef is None:
            coef = el.operator.T @ self.coefficients[self.dof_map[el.patch][el.functions]]
            self._bezier[key] = coef
        return coef

    def evaluate(self, patch: int, u: float, v: float) -> tuple[float, np.ndarray, np.ndarray]:
        """Value, physical gradient and physical point at parametric (u, v)."""
        pt = self.domain.patches[patch]
        el = pt.space.locate(u, v)
        p, q = pt.space.degrees
        s, t = el.local_coordinates(u, v)
        bu = bernstein_eval(p, float(s), 1)
        bv = bernstein_eval(q, float(t), 1)
        coef = self.bezier_coefficients(el)
        hu, hv = el.sizes
        value = float(np.kron(bv[0], bu[0]) @ coef)
        grad_param = np.array(
            [np.kron(bv[0], bu[1]) @ coef / hu, np.kron(bv[1], bu[0]) @ coef / hv]
        )
        x, jac = pt.map([u], [v])
        grad = np.linalg.solve(jac[0, 0].T, grad_param)
        return value, grad, x[0, 0]
