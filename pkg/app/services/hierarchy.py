"""Hierarchical B-spline spaces on nested dyadic levels and their multi-level extraction.

A HierarchicalSpace is immutable. Refinement returns a new space; derived data
(element extraction operators, the multi-level chain) is computed lazily and
cached on the instance.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from threading import Lock
from typing import Iterable, Mapping

import numpy as np
from scipy import sparse

from app.errors import ArgumentError, DomainError
from app.services.splines import (
    SplineSpace1D,
    TensorSpace2D,
    bernstein_eval,
    bezier_extraction,
    eval_basis_derivs,
    refine_dyadic,
)

logger = logging.getLogger(__name__)

SIDES = ("south", "east", "north", "west")


@dataclass(frozen=True, eq=False)
class LevelSpace:
    """Tensor space of one level plus the operators linking it to its neighbours."""

    level: int
    space: TensorSpace2D
    extraction_u: tuple[np.ndarray, ...]
    extraction_v: tuple[np.ndarray, ...]
    subdivision_u: np.ndarray | None = None
    subdivision_v: np.ndarray | None = None

    @property
    def element_shape(self) -> tuple[int, int]:
        return self.space.element_shape

    @cached_property
    def subdivision(self) -> sparse.csr_matrix | None:
        """Two-dimensional subdivision S = S_v (x) S_u, shape (n_{l+1}, n_l)."""
        if self.subdivision_u is None:
            return None
        return sparse.kron(
            sparse.csr_matrix(self.subdivision_v),
            sparse.csr_matrix(self.subdivision_u),
            format="csr",
        )

    def element_flat(self, eu: int, ev: int) -> int:
        return ev * self.element_shape[0] + eu

    def element_index(self, flat: int) -> tuple[int, int]:
        nel_u = self.element_shape[0]
        return flat % nel_u, flat // nel_u

    def element_bounds(self, flat: int) -> tuple[tuple[float, float], tuple[float, float]]:
        eu, ev = self.element_index(flat)
        return self.space.space_u.element_bounds(eu), self.space.space_v.element_bounds(ev)


def build_levels(base: TensorSpace2D, max_levels: int) -> tuple[LevelSpace, ...]:
    if max_levels < 1:
        raise ArgumentError("max_levels must be at least 1")
    space_u, space_v = base.space_u, base.space_v
    levels = []
    for level in range(max_levels):
        ext_u = tuple(op.matrix for op in bezier_extraction(space_u))
        ext_v = tuple(op.matrix for op in bezier_extraction(space_v))
        if level < max_levels - 1:
            child_u, sub_u = refine_dyadic(space_u)
            child_v, sub_v = refine_dyadic(space_v)
            levels.append(
                LevelSpace(level, TensorSpace2D(space_u, space_v), ext_u, ext_v,
                           sub_u.matrix, sub_v.matrix)
            )
            space_u, space_v = child_u, child_v
        else:
            levels.append(LevelSpace(level, TensorSpace2D(space_u, space_v), ext_u, ext_v))
    return tuple(levels)


@dataclass(frozen=True, eq=False)
class HierElement:
    """Active element with its local multi-level extraction operator C^e.

    Row r of `operator` holds the Bernstein coefficients of the hierarchical
    function `functions[r]` restricted to this element.
    """

    patch: int
    level: int
    index: tuple[int, int]
    flat: int
    bounds: tuple[tuple[float, float], tuple[float, float]]
    functions: np.ndarray
    operator: np.ndarray

    @property
    def key(self) -> tuple[int, int, int]:
        return self.patch, self.level, self.flat

    @property
    def sizes(self) -> tuple[float, float]:
        (u0, u1), (v0, v1) = self.bounds
        return u1 - u0, v1 - v0

    def local_coordinates(self, u, v):
        (u0, _), (v0, _) = self.bounds
        hu, hv = self.sizes
        return (np.asarray(u) - u0) / hu, (np.asarray(v) - v0) / hv


class _BoxCounter:
    """Counts marked elements inside the support rectangle of every tensor function."""

    def __init__(self, space: TensorSpace2D):
        self.fu, self.lu = space.space_u.support_elements
        self.fv, self.lv = space.space_v.support_elements
        self.area = (self.lu - self.fu + 1)[None, :] * (self.lv - self.fv + 1)[:, None]

    def count(self, mask: np.ndarray) -> np.ndarray:
        sat = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
        sat[1:, 1:] = mask.cumsum(axis=0).cumsum(axis=1)
        u0, u1 = self.fu[None, :], self.lu[None, :] + 1
        v0, v1 = self.fv[:, None], self.lv[:, None] + 1
        return sat[v1, u1] - sat[v0, u1] - sat[v1, u0] + sat[v0, u0]


@dataclass(frozen=True, eq=False)
class HierarchicalSpace:
    levels: tuple[LevelSpace, ...]
    active_elements: tuple[frozenset[int], ...]
    deactivated_elements: tuple[frozenset[int], ...]
    truncated: bool = True
    patch: int = 0
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: Lock = field(default_factory=Lock, repr=False)

    def __post_init__(self) -> None:
        if len(self.active_elements) != len(self.levels) or len(
            self.deactivated_elements
        ) != len(self.levels):
            raise ArgumentError("element sets must be given for every level")

    @property
    def max_levels(self) -> int:
        return len(self.levels)

    @property
    def degrees(self) -> tuple[int, int]:
        return self.levels[0].space.degrees

    @property
    def depth(self) -> int:
        """Number of levels holding active elements (deepest nonempty level + 1)."""
        return max(l for l, act in enumerate(self.active_elements) if act) + 1

    @property
    def n_elements(self) -> int:
        return sum(len(a) for a in self.active_elements)

    def elements_per_level(self) -> list[int]:
        return [len(self.active_elements[l]) for l in range(self.depth)]

    @cached_property
    def _masks(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        domain, active = [], []
        for lvl, ls in enumerate(self.levels):
            nel_u, nel_v = ls.element_shape
            dom = np.zeros(nel_u * nel_v, dtype=bool)
            act = np.zeros(nel_u * nel_v, dtype=bool)
            act[list(self.active_elements[lvl])] = True
            dom[list(self.active_elements[lvl] | self.deactivated_elements[lvl])] = True
            domain.append(dom.reshape(nel_v, nel_u))
            active.append(act.reshape(nel_v, nel_u))
        return domain, active

    @cached_property
    def _function_state(self) -> tuple[list[np.ndarray], ...]:
        """Per level flat masks: active, deactivated, contained in the level domain, touching it."""
        domain, active = self._masks
        act_f, deact_f, contained, relevant = [], [], [], []
        for lvl, ls in enumerate(self.levels):
            counter = _BoxCounter(ls.space)
            inside = counter.count(domain[lvl])
            cont = (inside == counter.area).ravel()
            meets = (counter.count(active[lvl]) > 0).ravel()
            act_f.append(cont & meets)
            deact_f.append(cont & ~meets)
            contained.append(cont)
            relevant.append((inside > 0).ravel())
        return act_f, deact_f, contained, relevant

    @cached_property
    def active_functions(self) -> tuple[np.ndarray, ...]:
        """Sorted flat indices of active functions per level."""
        return tuple(np.flatnonzero(m) for m in self._function_state[0])

    @cached_property
    def deactivated_functions(self) -> tuple[np.ndarray, ...]:
        return tuple(np.flatnonzero(m) for m in self._function_state[1])

    @cached_property
    def level_offsets(self) -> np.ndarray:
        counts = [f.size for f in self.active_functions]
        return np.concatenate([[0], np.cumsum(counts)])

    @property
    def n_dofs(self) -> int:
        return int(self.level_offsets[-1])

    def dof_of(self, level: int, flat: int) -> int:
        """Global hierarchical index of active function `flat` on `level`."""
        funcs = self.active_functions[level]
        pos = int(np.searchsorted(funcs, flat))
        if pos >= funcs.size or funcs[pos] != flat:
            raise ArgumentError(f"function {flat} is not active on level {level}")
        return int(self.level_offsets[level]) + pos

    def dof_info(self) -> list[tuple[int, int]]:
        """(level, flat function index) for every global DOF in canonical order."""
        return [(l, int(f)) for l in range(self.max_levels) for f in self.active_functions[l]]

    def is_active(self, level: int, flat: int) -> bool:
        return 0 <= level < self.max_levels and flat in self.active_elements[level]

    def with_elements(self, active, deactivated) -> "HierarchicalSpace":
        return HierarchicalSpace(
            self.levels,
            tuple(frozenset(a) for a in active),
            tuple(frozenset(d) for d in deactivated),
            self.truncated,
            self.patch,
        )

    def _chain(self, full: bool) -> list[tuple[sparse.csc_matrix, np.ndarray]]:
        """Multi-level matrices M_L (rows = DOFs of levels <= L) per level.

        With full=False only level-L columns whose support meets the level-L
        subdomain are kept; those are the only ones an active level-L element
        can see.
        """
        key = ("chain", full)
        if key in self._cache:
            return self._cache[key]
        _, _, contained, relevant = self._function_state
        chain = []
        matrix = None
        cols = None
        for lvl in range(self.depth):
            n_l = self.levels[lvl].space.n_basis
            new_cols = np.arange(n_l) if full else np.flatnonzero(relevant[lvl])
            funcs = self.active_functions[lvl]
            select = sparse.csr_matrix(
                (np.ones(funcs.size), (np.arange(funcs.size), np.searchsorted(new_cols, funcs))),
                shape=(funcs.size, new_cols.size),
            )
            if matrix is None:
                matrix = select
            else:
                sub = self.levels[lvl - 1].subdivision[new_cols][:, cols]
                keep = np.ones(new_cols.size)
                if self.truncated:
                    keep[contained[lvl][new_cols]] = 0.0
                matrix = sparse.vstack(
                    [matrix @ sub.T @ sparse.diags(keep), select], format="csr"
                )
            cols = new_cols
            chain.append((matrix.tocsc(), cols))
        with self._lock:
            self._cache[key] = chain
        return chain

    def multilevel_matrix(self, level: int) -> np.ndarray:
        """Dense M_glob for `level`: row k = DOF k in the full level-`level` basis."""
        if level < 0 or level >= self.depth:
            raise ArgumentError(f"level {level} holds no active elements")
        matrix, cols = self._chain(full=True)[level]
        full = np.zeros((matrix.shape[0], self.levels[level].space.n_basis))
        full[:, cols] = matrix.toarray()
        return full

    def _build_element(self, level: int, flat: int) -> HierElement:
        ls = self.levels[level]
        eu, ev = ls.element_index(flat)
        matrix, cols = self._chain(full=False)[level]
        local = ls.space.element_functions(eu, ev)
        block = matrix[:, np.searchsorted(cols, local)]
        rows = np.unique(block.indices)
        m_local = block.tocsr()[rows].toarray()
        bezier = np.kron(ls.extraction_v[ev], ls.extraction_u[eu])
        op = m_local @ bezier
        return HierElement(
            patch=self.patch,
            level=level,
            index=(eu, ev),
            flat=flat,
            bounds=ls.element_bounds(flat),
            functions=rows.astype(np.int64),
            operator=op,
        )

    def elements(self, workers: int = 1) -> tuple[HierElement, ...]:
        """All active elements sorted by (level, flat index), with C^e computed."""
        cached = self._cache.get("elements")
        if cached is not None:
            return cached
        keys = [(l, e) for l in range(self.max_levels) for e in sorted(self.active_elements[l])]
        if workers > 1 and len(keys) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                built = tuple(pool.map(lambda k: self._build_element(*k), keys))
        else:
            built = tuple(self._build_element(l, e) for l, e in keys)
        with self._lock:
            self._cache["elements"] = built
            self._cache["lookup"] = {(el.level, el.flat): el for el in built}
        logger.debug("patch %d: built %d element operators", self.patch, len(built))
        return built

    def element(self, level: int, flat: int) -> HierElement:
        if not self.is_active(level, flat):
            raise ArgumentError(f"element {flat} on level {level} is not active")
        self.elements()
        return self._cache["lookup"][(level, flat)]

    def locate(self, u: float, v: float) -> HierElement:
        """Active element containing the parametric point (u, v)."""
        for level, ls in enumerate(self.levels):
            eu = ls.space.space_u.element_of(u)
            ev = ls.space.space_v.element_of(v)
            flat = ls.element_flat(eu, ev)
            if flat in self.active_elements[level]:
                return self.element(level, flat)
            if flat not in self.deactivated_elements[level]:
                break
        raise DomainError(f"no active element contains ({u}, {v})")

    def function_anchor(self, level: int, flat: int) -> tuple[float, float]:
        space = self.levels[level].space
        n_u = space.shape[0]
        return (
            float(space.space_u.greville[flat % n_u]),
            float(space.space_v.greville[flat // n_u]),
        )

    def side_dofs(self, side: str) -> list[tuple[int, int, int]]:
        """(dof, level, flat) of active functions whose trace on `side` is nonzero."""
        if side not in SIDES:
            raise ArgumentError(f"unknown side {side!r}")
        out = []
        for level in range(self.max_levels):
            n_u, n_v = self.levels[level].space.shape
            for pos, f in enumerate(self.active_functions[level]):
                i, j = int(f) % n_u, int(f) // n_u
                on_side = {
                    "south": j == 0,
                    "north": j == n_v - 1,
                    "west": i == 0,
                    "east": i == n_u - 1,
                }[side]
                if on_side:
                    out.append((int(self.level_offsets[level]) + pos, level, int(f)))
        return out

    def side_elements(self, side: str) -> list[HierElement]:
        """Active elements with an edge on `side`, sorted along the side."""
        out = []
        for el in self.elements():
            nel_u, nel_v = self.levels[el.level].element_shape
            eu, ev = el.index
            if {
                "south": ev == 0,
                "north": ev == nel_v - 1,
                "west": eu == 0,
                "east": eu == nel_u - 1,
            }[side]:
                out.append(el)
        along = 0 if side in ("south", "north") else 1
        return sorted(out, key=lambda el: el.bounds[along][0])


def build_hierarchy(
    base: TensorSpace2D, max_levels: int, truncated: bool = True, patch: int = 0
) -> HierarchicalSpace:
    """Hierarchy with every level-0 element active."""
    levels = build_levels(base, max_levels)
    active = [frozenset(range(base.n_elements))] + [frozenset()] * (max_levels - 1)
    deactivated = [frozenset()] * max_levels
    return HierarchicalSpace(levels, tuple(active), tuple(deactivated), truncated, patch)


def from_active_elements(
    base: TensorSpace2D,
    max_levels: int,
    active: list[Iterable[int]],
    deactivated: list[Iterable[int]],
    truncated: bool = True,
    patch: int = 0,
) -> HierarchicalSpace:
    """Rebuild a hierarchy from stored element sets and check that it tiles the domain."""
    levels = build_levels(base, max_levels)
    active = list(active) + [()] * (max_levels - len(active))
    deactivated = list(deactivated) + [()] * (max_levels - len(deactivated))
    hs = HierarchicalSpace(
        levels,
        tuple(frozenset(int(e) for e in a) for a in active),
        tuple(frozenset(int(e) for e in d) for d in deactivated),
        truncated,
        patch,
    )
    if not np.isclose(covered_area(hs), 1.0, rtol=0, atol=1e-12):
        raise ArgumentError("stored element sets do not tile the parametric domain")
    return hs


def covered_area(hs: HierarchicalSpace) -> float:
    """Parametric area covered by active elements, relative to the whole domain."""
    total = 0.0
    for level, ls in enumerate(hs.levels):
        for flat in hs.active_elements[level]:
            (u0, u1), (v0, v1) = ls.element_bounds(flat)
            total += (u1 - u0) * (v1 - v0)
    su = hs.levels[0].space.space_u.knot_vector.domain
    sv = hs.levels[0].space.space_v.knot_vector.domain
    return total / ((su[1] - su[0]) * (sv[1] - sv[0]))


def refine_elements(
    hs: HierarchicalSpace, marked: Mapping[int, Iterable[int]]
) -> HierarchicalSpace:
    """Replace marked active elements by their four children on the next level."""
    active = [set(a) for a in hs.active_elements]
    deactivated = [set(d) for d in hs.deactivated_elements]
    changed = False
    for level, elems in sorted(marked.items()):
        elems = set(int(e) for e in elems)
        if not elems:
            continue
        if level < 0 or level >= hs.max_levels:
            raise ArgumentError(f"level {level} does not exist")
        missing = elems - hs.active_elements[level]
        if missing:
            raise ArgumentError(
                f"elements {sorted(missing)[:5]} on level {level} are not active"
            )
        if level + 1 >= hs.max_levels:
            raise ArgumentError(
                f"refining level {level} would exceed max_levels={hs.max_levels}"
            )
        ls, child = hs.levels[level], hs.levels[level + 1]
        for flat in elems:
            eu, ev = ls.element_index(flat)
            for b in (0, 1):
                for a in (0, 1):
                    active[level + 1].add(child.element_flat(2 * eu + a, 2 * ev + b))
        active[level] -= elems
        deactivated[level] |= elems
        changed = True
    if not changed:
        return hs
    return hs.with_elements(active, deactivated)


def close_marked(hs: HierarchicalSpace, level: int, marked: Iterable[int]) -> set[int]:
    """Grow a marked set on `level` so refining it activates a new function near every mark.

    For each marked element the level+1 function overlapping its children whose
    parent block needs the fewest extra active elements is chosen, and that block
    is added. Ties go to the lowest function index. Marks with no such function
    (the block would leave the level domain) are kept unchanged.
    """
    if level < 0 or level + 1 >= hs.max_levels:
        raise ArgumentError(f"level {level} has no finer level to refine into")
    ls, fine = hs.levels[level], hs.levels[level + 1]
    fu, lu = fine.space.space_u.support_elements
    fv, lv = fine.space.space_v.support_elements
    domain = hs.active_elements[level] | hs.deactivated_elements[level]
    closed = set(int(e) for e in marked)
    for flat in sorted(closed):
        eu, ev = ls.element_index(flat)
        cand_u = np.flatnonzero((fu <= 2 * eu + 1) & (lu >= 2 * eu))
        cand_v = np.flatnonzero((fv <= 2 * ev + 1) & (lv >= 2 * ev))
        best = None
        for j in cand_v:
            for i in cand_u:
                block = {
                    ls.element_flat(a, b)
                    for b in range(fv[j] // 2, lv[j] // 2 + 1)
                    for a in range(fu[i] // 2, lu[i] // 2 + 1)
                }
                if not block <= domain:
                    continue
                extra = (block & hs.active_elements[level]) - closed
                if best is None or len(extra) < len(best):
                    best = extra
                if not best:
                    break
            if best is not None and not best:
                break
        if best is None:
            logger.debug("no function fits around element %d on level %d", flat, level)
            continue
        closed |= best
    return closed


def refine_all(hs: HierarchicalSpace) -> HierarchicalSpace:
    """One uniform dyadic refinement of every active element."""
    return refine_elements(hs, {l: hs.active_elements[l] for l in range(hs.max_levels)})


def local_extraction(hs: HierarchicalSpace, level: int, flat: int) -> HierElement:
    """Element data with its extraction operator C^e for an active element."""
    return hs.element(level, flat)


def global_multilevel_operator(hs: HierarchicalSpace, level: int) -> np.ndarray:
    return hs.multilevel_matrix(level)


def truncate_coefficients(
    hs: HierarchicalSpace, level: int, coefficients: np.ndarray
) -> np.ndarray:
    """Zero the level-(level+1) coefficients of functions contained in the finer subdomain."""
    if level + 1 >= hs.max_levels:
        raise ArgumentError(f"level {level} has no finer level")
    coefficients = np.asarray(coefficients, dtype=float)
    contained = hs._function_state[2][level + 1]
    if coefficients.shape != contained.shape:
        raise ArgumentError(
            f"expected {contained.size} coefficients on level {level + 1}, got {coefficients.size}"
        )
    out = coefficients.copy()
    out[contained] = 0.0
    return out


def eval_hier_basis(
    hs: HierarchicalSpace, u: float, v: float
) -> tuple[HierElement, np.ndarray, np.ndarray]:
    """Nonzero hierarchical functions at (u, v) through C^e and the Bernstein basis.

    Returns the element, values for `element.functions` and parametric
    gradients shaped (n, 2).
    """
    el = hs.locate(u, v)
    p, q = hs.degrees
    s, t = el.local_coordinates(u, v)
    bu = bernstein_eval(p, float(s), 1)
    bv = bernstein_eval(q, float(t), 1)
    hu, hv = el.sizes
    values = el.operator @ np.kron(bv[0], bu[0])
    grads = np.stack(
        [
            el.operator @ np.kron(bv[0], bu[1]) / hu,
            el.operator @ np.kron(bv[1], bu[0]) / hv,
        ],
        axis=-1,
    )
    return el, values, grads


def eval_hier_direct(
    hs: HierarchicalSpace, u: float, v: float
) -> tuple[np.ndarray, np.ndarray]:
    """All hierarchical functions at (u, v) from the chained subdivision operators.

    Uses the deepest level's B-spline basis and M_glob, so no Bezier
    extraction is involved. Returns values (n_dofs,) and gradients (n_dofs, 2).
    """
    level = hs.depth - 1
    space = hs.levels[level].space
    m_glob = hs.multilevel_matrix(level)
    p, q = space.degrees
    su, du = eval_basis_derivs(space.space_u.knot_vector, u, min(1, p))
    sv, dv = eval_basis_derivs(space.space_v.knot_vector, v, min(1, q))
    local = (
        np.arange(sv - q, sv + 1)[:, None] * space.shape[0] + np.arange(su - p, su + 1)[None, :]
    ).ravel()
    du = du if du.shape[0] > 1 else np.vstack([du, np.zeros_like(du)])
    dv = dv if dv.shape[0] > 1 else np.vstack([dv, np.zeros_like(dv)])
    block = m_glob[:, local]
    values = block @ np.kron(dv[0], du[0])
    grads = np.stack([block @ np.kron(dv[0], du[1]), block @ np.kron(dv[1], du[0])], axis=-1)
    return values, grads


def dump_hierarchy(hs: HierarchicalSpace) -> str:
    """Plain-text listing of levels, active sets and every C^e (17 significant digits)."""
    lines = [f"hierarchy patch={hs.patch} levels={hs.max_levels} truncated={hs.truncated}"]
    for level in range(hs.max_levels):
        lines.append(
            f"level {level} active_elements {sorted(hs.active_elements[level])} "
            f"active_functions {hs.active_functions[level].tolist()}"
        )
    for el in hs.elements():
        lines.append(
            f"element level={el.level} index={el.flat} functions={el.functions.tolist()}"
        )
        for row in el.operator:
            lines.append("  " + " ".join(format(x, ".17g") for x in row))
    return "\n".join(lines) + "\n"
