"""Writers for field samples, mesh outlines, convergence tables and debug dumps."""
import csv
import logging
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import sparse

from app.errors import ConfigurationError
from app.schemas import ConvergenceRecord
from app.services.assembly import DiscreteSolution, MultipatchDomain
from app.services.hierarchy import dump_hierarchy

logger = logging.getLogger(__name__)

CSV_HEADER = ["iter", "dofs", "elements", "l2_error", "estimator_total", "seconds"]


def _real(value: float | None) -> str:
    return "" if value is None else format(float(value), ".17g")


def sample_patch(solution: DiscreteSolution, patch: int, resolution: int) -> dict[str, np.ndarray]:
    """Evaluate A_z, B and the element level on a uniform parametric grid of one patch."""
    pt = solution.domain.patches[patch]
    lo_u, hi_u = pt.geometry.space_u.knot_vector.domain
    lo_v, hi_v = pt.geometry.space_v.knot_vector.domain
    us = np.linspace(lo_u, hi_u, resolution)
    vs = np.linspace(lo_v, hi_v, resolution)
    n = resolution * resolution
    out = {name: np.zeros(n) for name in ("az", "bx", "by", "bmag", "level")}
    out["points"] = np.zeros((n, 2))
    for b, v in enumerate(vs):
        for a, u in enumerate(us):
            k = b * resolution + a
            value, grad, x = solution.evaluate(patch, float(u), float(v))
            out["points"][k] = x
            out["az"][k] = value
            out["bx"][k] = grad[1]
            out["by"][k] = -grad[0]
            out["level"][k] = pt.space.locate(float(u), float(v)).level
    out["bmag"] = np.hypot(out["bx"], out["by"])
    return out


def export_fields(solution: DiscreteSolution, resolution: int, path: Path | str) -> Path:
    """Legacy VTK structured grids, one block per patch, concatenated into a single file."""
    if resolution < 2:
        raise ConfigurationError(f"field resolution must be at least 2, got {resolution}")
    path = Path(path)
    blocks = []
    for k in range(len(solution.domain.patches)):
        data = sample_patch(solution, k, resolution)
        n = resolution * resolution
        lines = [
            "# vtk DataFile Version 3.0",
            f"patch {k}",
            "ASCII",
            "DATASET STRUCTURED_GRID",
            f"DIMENSIONS {resolution} {resolution} 1",
            f"POINTS {n} double",
        ]
        lines += [f"{x:.9g} {y:.9g} 0" for x, y in data["points"]]
        lines.append(f"POINT_DATA {n}")
        for name, key in (("Az", "az"), ("Bx", "bx"), ("By", "by"), ("Bmag", "bmag")):
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{value:.9g}" for value in data[key]]
        lines += ["SCALARS level int 1", "LOOKUP_TABLE default"]
        lines += [str(int(level)) for level in data["level"]]
        blocks.append("\n".join(lines))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(blocks) + "\n")
    logger.info("wrote field samples of %d patches to %s", len(blocks), path)
    return path


def mesh_segments(domain: MultipatchDomain) -> list[tuple[int, int, tuple[float, float, float, float]]]:
    """Unique active element edges as (patch, level, (u0, v0, u1, v1)) in parametric space."""
    seen: dict[tuple[int, tuple[float, float, float, float]], int] = {}
    for k, patch in enumerate(domain.patches):
        for el in patch.space.elements():
            (u0, u1), (v0, v1) = el.bounds
            for edge in ((u0, v0, u1, v0), (u1, v0, u1, v1), (u0, v1, u1, v1), (u0, v0, u0, v1)):
                seen.setdefault((k, edge), el.level)
    return [(k, level, edge) for (k, edge), level in seen.items()]


def export_mesh(domain: MultipatchDomain, path: Path | str, samples: int = 5) -> int:
    """Physical polylines of all active element edges tagged with their level."""
    path = Path(path)
    segments = mesh_segments(domain)
    t = np.linspace(0.0, 1.0, samples)
    lines = [f"# mesh segments: {len(segments)}", "# patch level x0 y0 x1 y1 ..."]
    for k, level, (u0, v0, u1, v1) in segments:
        patch = domain.patches[k]
        pts = [patch.point(u0 + (u1 - u0) * s, v0 + (v1 - v0) * s) for s in t]
        coords = " ".join(f"{x:.9g} {y:.9g}" for x, y in pts)
        lines.append(f"{k} {level} {coords}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return len(segments)


def write_convergence_csv(records: Iterable[ConvergenceRecord], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for rec in records:
            writer.writerow(
                [
                    rec.iteration,
                    rec.dofs,
                    rec.elements,
                    _real(rec.l2_error),
                    _real(rec.estimator_total),
                    _real(rec.seconds),
                ]
            )
    return path


def write_hierarchy_dump(domain: MultipatchDomain, path: Path | str) -> Path:
    """Concatenated hierarchy dumps of every patch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(dump_hierarchy(p.space) for p in domain.patches))
    return path


def write_triplets(matrix: sparse.spmatrix, path: Path | str) -> int:
    """Nonzeros as `row col value` lines sorted by (row, col)."""
    coo = sparse.coo_matrix(matrix)
    coo.sum_duplicates()
    order = np.lexsort((coo.col, coo.row))
    lines = [
        f"{int(coo.row[i])} {int(coo.col[i])} {coo.data[i]:.17g}" for i in order
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    return len(lines)
