"""Univariate and tensor-product B-spline kernels.

Everything here works on open (clamped) knot vectors. Basis evaluation follows
the classic Cox-de Boor triangular scheme, knot insertion builds Boehm
matrices, and the Bezier extraction operators are read off the knot vector
obtained by raising every interior breakpoint to full multiplicity.
"""
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import comb

from app.config import MAX_DEGREE
from app.errors import ArgumentError, DomainError

# Tolerance used when a parameter sits on the boundary of [0, 1] or of the knot span
PARAM_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Open knot vector with its polynomial degree."""

    knots: np.ndarray
    degree: int

    def __post_init__(self) -> None:
        knots = np.array(self.knots, dtype=float)
        p = int(self.degree)
        if knots.ndim != 1:
            raise ArgumentError("knot vector must be one-dimensional")
        if p < 0 or p > MAX_DEGREE:
            raise ArgumentError(f"degree {p} outside supported range 0..{MAX_DEGREE}")
        if not np.all(np.isfinite(knots)):
            raise ArgumentError("knot vector contains non-finite values")
        if np.any(np.diff(knots) < 0):
            raise ArgumentError("knot vector must be non-decreasing")
        if knots.size - p - 1 < p + 1:
            raise ArgumentError(
                f"knot vector of length {knots.size} is too short for degree {p}"
            )
        if knots[0] == knots[-1]:
            raise ArgumentError("knot vector spans an empty parametric domain")
        first_ok = np.all(knots[: p + 1] == knots[0]) and knots[p + 1] > knots[0]
        last_ok = np.all(knots[-p - 1 :] == knots[-1]) and knots[-p - 2] < knots[-1]
        if not (first_ok and last_ok):
            raise ArgumentError("knot vector must be open with end multiplicity degree+1")
        _, counts = np.unique(knots, return_counts=True)
        # Degree 0 spaces are piecewise constant, so simple interior knots are allowed
        if counts.size > 2 and counts[1:-1].max() > max(p, 1):
            raise ArgumentError(
                "interior knot multiplicity exceeds the degree; the space would be discontinuous"
            )
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "degree", p)

    @property
    def n_basis(self) -> int:
        return self.knots.size - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    @cached_property
    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    def multiplicity(self, value: float) -> int:
        return int(np.count_nonzero(self.knots == value))

    def __len__(self) -> int:
        return self.knots.size

    def __repr__(self) -> str:
        return f"KnotVector(degree={self.degree}, knots={self.knots.tolist()})"


@dataclass(frozen=True, eq=False)
class SplineSpace1D:
    """Univariate spline space: a knot vector plus its element structure."""

    knot_vector: KnotVector

    @property
    def degree(self) -> int:
        return self.knot_vector.degree

    @property
    def knots(self) -> np.ndarray:
        return self.knot_vector.knots

    @property
    def n_basis(self) -> int:
        return self.knot_vector.n_basis

    @property
    def breakpoints(self) -> np.ndarray:
        return self.knot_vector.breakpoints

    @property
    def n_elements(self) -> int:
        return self.breakpoints.size - 1

    @cached_property
    def element_spans(self) -> np.ndarray:
        """Knot span index of every element (knots[span] <= xi < knots[span + 1])."""
        return np.searchsorted(self.knots, self.breakpoints[:-1], side="right") - 1

    @cached_property
    def support_elements(self) -> tuple[np.ndarray, np.ndarray]:
        """First and last element index (inclusive) in the support of every function."""
        p = self.degree
        idx = np.arange(self.n_basis)
        first = np.searchsorted(self.breakpoints, self.knots[idx], side="left")
        last = np.searchsorted(self.breakpoints, self.knots[idx + p + 1], side="left") - 1
        return first, last

    @cached_property
    def greville(self) -> np.ndarray:
        """Greville abscissae, one per basis function."""
        p = self.degree
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        windows = np.lib.stride_tricks.sliding_window_view(self.knots[1:-1], p)
        return windows.mean(axis=1)

    def element_bounds(self, element: int) -> tuple[float, float]:
        return float(self.breakpoints[element]), float(self.breakpoints[element + 1])

    def element_of(self, xi: float) -> int:
        """Index of the element containing xi; the last element is closed on the right."""
        lo, hi = self.knot_vector.domain
        if xi < lo - PARAM_TOL or xi > hi + PARAM_TOL:
            raise DomainError(f"parameter {xi!r} outside [{lo}, {hi}]")
        e = int(np.searchsorted(self.breakpoints, xi, side="right")) - 1
        return min(max(e, 0), self.n_elements - 1)

    def element_functions(self, element: int) -> np.ndarray:
        span = int(self.element_spans[element])
        return np.arange(span - self.degree, span + 1)


@dataclass(frozen=True, eq=False)
class TensorSpace2D:
    """Tensor product of two univariate spaces; function (i, j) has flat index j * n_u + i."""

    space_u: SplineSpace1D
    space_v: SplineSpace1D

    @property
    def degrees(self) -> tuple[int, int]:
        return self.space_u.degree, self.space_v.degree

    @property
    def shape(self) -> tuple[int, int]:
        return self.space_u.n_basis, self.space_v.n_basis

    @property
    def n_basis(self) -> int:
        return self.space_u.n_basis * self.space_v.n_basis

    @property
    def element_shape(self) -> tuple[int, int]:
        return self.space_u.n_elements, self.space_v.n_elements

    @property
    def n_elements(self) -> int:
        return self.space_u.n_elements * self.space_v.n_elements

    def element_functions(self, eu: int, ev: int) -> np.ndarray:
        """Flat indices of the functions supported on element (eu, ev), v-major."""
        iu = self.space_u.element_functions(eu)
        jv = self.space_v.element_functions(ev)
        return (jv[:, None] * self.space_u.n_basis + iu[None, :]).ravel()


@dataclass(frozen=True, eq=False)
class ExtractionOperator:
    """Dense linear map with explicit row and column index sets.

    Row r expresses target function rows[r] as a combination of the source
    functions listed in cols.
    """

    matrix: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self) -> None:
        matrix = np.asarray(self.matrix, dtype=float)
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        if matrix.shape != (rows.size, cols.size):
            raise ArgumentError(
                f"operator shape {matrix.shape} does not match index sets "
                f"({rows.size}, {cols.size})"
            )
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass(frozen=True, eq=False)
class ControlNet:
    """Control points of a polynomial curve or surface, stored flat as (n, dim)."""

    points: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=float)))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def grid(self, n_u: int, n_v: int) -> np.ndarray:
        """Points as an (n_v, n_u, dim) array."""
        if n_u * n_v != self.n_points:
            raise ArgumentError(
                f"control net of {self.n_points} points does not match a {n_u} x {n_v} grid"
            )
        return self.points.reshape(n_v, n_u, self.dim)


def find_span(kv: KnotVector, xi: float) -> int:
    """Index i with knots[i] <= xi < knots[i+1]; xi at the right end maps to the last nonempty span."""
    lo, hi = kv.domain
    if xi < lo - PARAM_TOL or xi > hi + PARAM_TOL:
        raise DomainError(f"parameter {xi!r} outside [{lo}, {hi}]")
    if xi >= hi:
        return kv.n_basis - 1
    if xi <= lo:
        return kv.degree
    return int(np.searchsorted(kv.knots, xi, side="right")) - 1


def eval_basis(kv: KnotVector, xi: float) -> tuple[int, np.ndarray]:
    """Nonzero basis values N_{span-p..span}(xi)."""
    span = find_span(kv, xi)
    xi = min(max(xi, kv.domain[0]), kv.domain[1])
    return span, _basis_funs(kv.knots, kv.degree, span, xi)


def _basis_funs(knots: np.ndarray, p: int, span: int, xi: float) -> np.ndarray:
    values = np.zeros(p + 1)
    values[0] = 1.0
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    for j in range(1, p + 1):
        left[j] = xi - knots[span + 1 - j]
        right[j] = knots[span + j] - xi
        saved = 0.0
        for r in range(j):
            denom = right[r + 1] + left[j - r]
            temp = values[r] / denom if denom != 0.0 else 0.0
            values[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        values[j] = saved
    return values


def eval_basis_derivs(kv: KnotVector, xi: float, order: int) -> tuple[int, np.ndarray]:
    """Basis values and derivatives up to `order`, shaped (order + 1, p + 1)."""
    p = kv.degree
    if order < 0 or order > p:
        raise ArgumentError(f"derivative order {order} must lie in 0..{p}")
    span = find_span(kv, xi)
    xi = min(max(xi, kv.domain[0]), kv.domain[1])
    knots = kv.knots

    ndu = np.zeros((p + 1, p + 1))
    ndu[0, 0] = 1.0
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    for j in range(1, p + 1):
        left[j] = xi - knots[span + 1 - j]
        right[j] = knots[span + j] - xi
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r] if ndu[j, r] != 0.0 else 0.0
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((order + 1, p + 1))
    ders[0] = ndu[:, p]
    a = np.zeros((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, order + 1):
            d = 0.0
            rk, pk = r - k, p - k
            if r >= k:
                a[s2, 0] = _safe_div(a[s1, 0], ndu[pk + 1, rk])
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = _safe_div(a[s1, j] - a[s1, j - 1], ndu[pk + 1, rk + j])
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = _safe_div(-a[s1, k - 1], ndu[pk + 1, r])
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1

    factor = p
    for k in range(1, order + 1):
        ders[k] *= factor
        factor *= p - k
    return span, ders


def _safe_div(num: float, den: float) -> float:
    return num / den if den != 0.0 else 0.0


def basis_matrix(kv: KnotVector, xs: np.ndarray, order: int = 0) -> np.ndarray:
    """Dense (order + 1, len(xs), n_basis) collocation array of the full basis."""
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    p = kv.degree
    out = np.zeros((order + 1, xs.size, kv.n_basis))
    for k, xi in enumerate(xs):
        span, ders = eval_basis_derivs(kv, float(xi), min(order, p))
        out[: ders.shape[0], k, span - p : span + 1] = ders
    return out


def eval_curve(kv: KnotVector, net: ControlNet, xi: float) -> np.ndarray:
    if net.n_points != kv.n_basis:
        raise ArgumentError(
            f"control net has {net.n_points} points, space has {kv.n_basis} functions"
        )
    span, values = eval_basis(kv, xi)
    return values @ net.points[span - kv.degree : span + 1]


def eval_surface(
    space: TensorSpace2D, net: ControlNet, u: float, v: float
) -> tuple[np.ndarray, np.ndarray]:
    """Point and Jacobian (dim, 2) of a tensor-product surface at (u, v)."""
    n_u, n_v = space.shape
    grid = net.grid(n_u, n_v)
    p, q = space.degrees
    su, du = eval_basis_derivs(space.space_u.knot_vector, u, min(1, p))
    sv, dv = eval_basis_derivs(space.space_v.knot_vector, v, min(1, q))
    local = grid[sv - q : sv + 1, su - p : su + 1]
    if du.shape[0] == 1:
        du = np.vstack([du, np.zeros_like(du)])
    if dv.shape[0] == 1:
        dv = np.vstack([dv, np.zeros_like(dv)])
    point = np.einsum("j,i,jid->d", dv[0], du[0], local)
    jac = np.stack(
        [
            np.einsum("j,i,jid->d", dv[0], du[1], local),
            np.einsum("j,i,jid->d", dv[1], du[0], local),
        ],
        axis=-1,
    )
    return point, jac


def bernstein_eval(p: int, u, derivs: int = 0) -> np.ndarray:
    """Bernstein polynomials of degree p on [0, 1] and their derivatives.

    Returns shape (derivs + 1, p + 1) for a scalar u and
    (derivs + 1, len(u), p + 1) for an array.
    """
    scalar = np.ndim(u) == 0
    t = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(t < -PARAM_TOL) or np.any(t > 1.0 + PARAM_TOL):
        raise DomainError("Bernstein parameter outside [0, 1]")
    t = np.clip(t, 0.0, 1.0)
    out = np.zeros((derivs + 1, t.size, p + 1))
    for r in range(min(derivs, p) + 1):
        low = p - r
        k = np.arange(low + 1)
        base = comb(low, k) * t[:, None] ** k * (1.0 - t[:, None]) ** (low - k)
        scale = np.prod(np.arange(low + 1, p + 1, dtype=float))
        for i in range(r + 1):
            out[r, :, i : i + low + 1] += (-1.0) ** (r - i) * comb(r, i) * base
        out[r] *= scale
    return out[:, 0, :] if scalar else out


def bernstein_subdivision(p: int, child: int) -> np.ndarray:
    """Matrix D with B_parent(t) = D @ B_child(s) on half `child` (t = (s + child) / 2)."""
    if child not in (0, 1):
        raise ArgumentError("child must be 0 or 1")
    if p == 0:
        return np.ones((1, 1))
    s = np.linspace(0.0, 1.0, p + 1)
    at_child = bernstein_eval(p, s)[0]
    at_parent = bernstein_eval(p, 0.5 * (s + child))[0]
    return np.linalg.solve(at_child, at_parent).T


def knot_insertion(
    kv: KnotVector, new_knots
) -> tuple[KnotVector, ExtractionOperator]:
    """Insert knots and return the refined vector with T such that N_old = T^T N_new.

    T has shape (n_new, n_old): coarse function i equals sum_j T[j, i] N_new_j.
    """
    new_knots = np.sort(np.atleast_1d(np.asarray(new_knots, dtype=float)))
    lo, hi = kv.domain
    if new_knots.size and (new_knots[0] <= lo or new_knots[-1] >= hi):
        raise ArgumentError("inserted knots must lie strictly inside the domain")
    p = kv.degree
    knots = kv.knots.copy()
    transform = np.eye(kv.n_basis)
    for x in new_knots:
        n_cur = knots.size - p - 1
        k = int(np.searchsorted(knots, x, side="right")) - 1
        boehm = np.zeros((n_cur + 1, n_cur))
        for j in range(n_cur + 1):
            if j <= k - p:
                alpha = 1.0
            elif j >= k + 1:
                alpha = 0.0
            else:
                alpha = (x - knots[j]) / (knots[j + p] - knots[j])
            if j < n_cur:
                boehm[j, j] = alpha
            if j >= 1:
                boehm[j, j - 1] = 1.0 - alpha
        transform = boehm @ transform
        knots = np.insert(knots, k + 1, x)
    try:
        refined = KnotVector(knots, p)
    except ArgumentError as exc:
        raise ArgumentError(f"knot insertion produced an invalid knot vector: {exc}") from exc
    op = ExtractionOperator(transform, np.arange(refined.n_basis), np.arange(kv.n_basis))
    return refined, op


def refine_dyadic(space: SplineSpace1D) -> tuple[SplineSpace1D, ExtractionOperator]:
    """Halve every element; returns the child space and its subdivision matrix."""
    mids = 0.5 * (space.breakpoints[:-1] + space.breakpoints[1:])
    refined, op = knot_insertion(space.knot_vector, mids)
    return SplineSpace1D(refined), op


def subdivision_matrix(space: SplineSpace1D) -> ExtractionOperator:
    """S with N_coarse_i = sum_j S[j, i] N_fine_j for the dyadic child space."""
    return refine_dyadic(space)[1]


def uniform_refinement(space: SplineSpace1D, n: int) -> SplineSpace1D:
    """Split every element of `space` into n equal parts."""
    if n < 1:
        raise ArgumentError("number of subdivisions must be positive")
    if n == 1:
        return space
    bp = space.breakpoints
    fractions = np.arange(1, n) / n
    new = (bp[:-1, None] + (bp[1:] - bp[:-1])[:, None] * fractions[None, :]).ravel()
    refined, _ = knot_insertion(space.knot_vector, new)
    return SplineSpace1D(refined)


def bezier_extraction(space: SplineSpace1D) -> list[ExtractionOperator]:
    """Per-element E with N_local = E @ B, rows = global B-spline indices."""
    p = space.degree
    kv = space.knot_vector
    if p == 0:
        return [
            ExtractionOperator(np.ones((1, 1)), [int(space.element_spans[e])], [0])
            for e in range(space.n_elements)
        ]
    missing = []
    for b in space.breakpoints[1:-1]:
        missing.extend([b] * (p - kv.multiplicity(b)))
    _, transform = knot_insertion(kv, missing)
    t = transform.matrix
    ops = []
    for e in range(space.n_elements):
        span = int(space.element_spans[e])
        rows = np.arange(span - p, span + 1)
        block = t[e * p : e * p + p + 1][:, rows].T
        ops.append(ExtractionOperator(block, rows, np.arange(p + 1)))
    return ops
