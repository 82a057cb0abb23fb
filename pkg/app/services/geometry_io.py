"""Text formats: multipatch geometry files and run configuration files.

Geometry file layout, one record per line, '#' starts a comment:

    patch <index> material <tag>
    degree <p> <q>
    knots_u <k0> <k1> ...
    knots_v <k0> <k1> ...
    points <n_u> <n_v>
    <x> <y> [<w>]          (n_u * n_v rows, u fastest; w is read and ignored)
    end
    interface <patch_a> <side_a> <patch_b> <side_b> <flip>
"""
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from dotenv import dotenv_values
from pydantic import ValidationError

from app.errors import ConfigurationError, GeometryFileError
from app.schemas import RunConfig

logger = logging.getLogger(__name__)

SIDE_NAMES = ("south", "east", "north", "west")


@dataclass(frozen=True, eq=False)
class PatchRecord:
    index: int
    material: str
    degree: tuple[int, int]
    knots_u: np.ndarray
    knots_v: np.ndarray
    shape: tuple[int, int]
    points: np.ndarray
    weights: np.ndarray | None = None  # written back on save, never used for the map


@dataclass(frozen=True)
class InterfaceRecord:
    patch_a: int
    side_a: str
    patch_b: int
    side_b: str
    flip: int = 0


@dataclass(frozen=True, eq=False)
class GeometryModel:
    patches: tuple[PatchRecord, ...]
    interfaces: tuple[InterfaceRecord, ...]


def _fail(path, lineno: int, message: str) -> GeometryFileError:
    return GeometryFileError(f"{path}:{lineno}: {message}")


def _numbers(tokens: list[str], cast, path, lineno: int):
    try:
        return [cast(t) for t in tokens]
    except ValueError:
        raise _fail(path, lineno, f"expected numbers, got {' '.join(tokens)!r}") from None


def read_geometry(path: Path | str) -> GeometryModel:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise GeometryFileError(f"cannot read geometry file {path}: {exc}") from exc

    lines = [
        (n, line.split("#", 1)[0].split())
        for n, line in enumerate(text.splitlines(), start=1)
    ]
    lines = [(n, tokens) for n, tokens in lines if tokens]
    patches: list[PatchRecord] = []
    interfaces: list[InterfaceRecord] = []
    pos = 0
    while pos < len(lines):
        lineno, tokens = lines[pos]
        keyword = tokens[0]
        if keyword == "patch":
            record, pos = _read_patch(lines, pos, path)
            if record.index != len(patches):
                raise _fail(path, lineno, f"patch {record.index} out of order, expected {len(patches)}")
            patches.append(record)
        elif keyword == "interface":
            if len(tokens) != 6:
                raise _fail(path, lineno, "interface needs: patch_a side_a patch_b side_b flip")
            a, b, flip = _numbers([tokens[1], tokens[3], tokens[5]], int, path, lineno)
            if tokens[2] not in SIDE_NAMES or tokens[4] not in SIDE_NAMES:
                raise _fail(path, lineno, f"unknown side in {' '.join(tokens)!r}")
            if flip not in (0, 1):
                raise _fail(path, lineno, "flip must be 0 or 1")
            interfaces.append(InterfaceRecord(a, tokens[2], b, tokens[4], flip))
            pos += 1
        else:
            raise _fail(path, lineno, f"unexpected keyword {keyword!r}")

    if not patches:
        raise GeometryFileError(f"{path}: no patches defined")
    for iface in interfaces:
        for idx in (iface.patch_a, iface.patch_b):
            if not 0 <= idx < len(patches):
                raise GeometryFileError(f"{path}: interface refers to missing patch {idx}")
    logger.debug("read %d patches and %d interfaces from %s", len(patches), len(interfaces), path)
    return GeometryModel(tuple(patches), tuple(interfaces))


def _read_patch(lines, pos: int, path) -> tuple[PatchRecord, int]:
    lineno, tokens = lines[pos]
    if len(tokens) != 4 or tokens[2] != "material":
        raise _fail(path, lineno, "patch header must be: patch <index> material <tag>")
    index = _numbers([tokens[1]], int, path, lineno)[0]
    material = tokens[3]
    fields: dict[str, tuple[int, list[str]]] = {}
    pos += 1
    while pos < len(lines) and lines[pos][1][0] in ("degree", "knots_u", "knots_v"):
        n, toks = lines[pos]
        fields[toks[0]] = (n, toks[1:])
        pos += 1
    for key in ("degree", "knots_u", "knots_v"):
        if key not in fields:
            raise _fail(path, lineno, f"patch {index} is missing '{key}'")
    degree = _numbers(fields["degree"][1], int, path, fields["degree"][0])
    if len(degree) != 2:
        raise _fail(path, fields["degree"][0], "degree needs two integers")
    knots_u = np.array(_numbers(fields["knots_u"][1], float, path, fields["knots_u"][0]))
    knots_v = np.array(_numbers(fields["knots_v"][1], float, path, fields["knots_v"][0]))

    if pos >= len(lines) or lines[pos][1][0] != "points":
        raise _fail(path, lineno, f"patch {index} is missing 'points'")
    n, toks = lines[pos]
    shape = _numbers(toks[1:], int, path, n)
    if len(shape) != 2 or min(shape) < 1:
        raise _fail(path, n, "points needs two positive counts")
    count = shape[0] * shape[1]
    rows = lines[pos + 1 : pos + 1 + count]
    if len(rows) < count:
        raise _fail(path, n, f"expected {count} control points")
    coords = []
    for rn, rtoks in rows:
        values = _numbers(rtoks, float, path, rn)
        if len(values) not in (2, 3):
            raise _fail(path, rn, "control point needs x y [w]")
        coords.append(values)
    widths = {len(c) for c in coords}
    if len(widths) != 1:
        raise _fail(path, n, "mixed weighted and unweighted control points")
    data = np.array(coords)
    pos += 1 + count
    if pos >= len(lines) or lines[pos][1] != ["end"]:
        end_line = lines[pos][0] if pos < len(lines) else lines[-1][0]
        raise _fail(path, end_line, f"patch {index} must close with 'end'")
    record = PatchRecord(
        index=index,
        material=material,
        degree=(degree[0], degree[1]),
        knots_u=knots_u,
        knots_v=knots_v,
        shape=(shape[0], shape[1]),
        points=data[:, :2],
        weights=data[:, 2] if data.shape[1] == 3 else None,
    )
    return record, pos + 1


def write_geometry(model: GeometryModel, path: Path | str) -> None:
    """Write a geometry file; reals use 17 significant digits so reading it back is exact."""
    out = []
    for rec in model.patches:
        out.append(f"patch {rec.index} material {rec.material}")
        out.append(f"degree {rec.degree[0]} {rec.degree[1]}")
        out.append("knots_u " + " ".join(format(k, ".17g") for k in rec.knots_u))
        out.append("knots_v " + " ".join(format(k, ".17g") for k in rec.knots_v))
        out.append(f"points {rec.shape[0]} {rec.shape[1]}")
        for r, pt in enumerate(rec.points):
            row = [format(c, ".17g") for c in pt]
            if rec.weights is not None:
                row.append(format(rec.weights[r], ".17g"))
            out.append(" ".join(row))
        out.append("end")
    for i in model.interfaces:
        out.append(f"interface {i.patch_a} {i.side_a} {i.patch_b} {i.side_b} {i.flip}")
    Path(path).write_text("\n".join(out) + "\n")


def _nest(flat: dict[str, str | None]) -> dict:
    nested: dict = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"key {key!r} conflicts with a scalar setting")
        node[parts[-1]] = value
    return nested


def _line_of(text: str, key: str) -> int | None:
    pattern = re.compile(rf"^\s*(export\s+)?{re.escape(key)}\s*=")
    for n, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return n
    return None


def load_run_config(path: Path | str) -> RunConfig:
    """Parse a `key = value` run file with dotted keys into a validated RunConfig.

    Relative geometry and output paths are taken relative to the config file.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    text = path.read_text()
    flat = dotenv_values(path, interpolate=False)
    for key in ("geometry", "export.output_dir"):
        value = flat.get(key)
        if value and not Path(value).is_absolute():
            flat[key] = str((path.parent / value).resolve())
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            field = ".".join(str(part) for part in err["loc"])
            line = _line_of(text, field)
            where = f"{path}:{line}" if line else str(path)
            problems.append(f"{where}: {field or 'config'}: {err['msg']}")
        raise ConfigurationError("invalid run configuration\n" + "\n".join(problems)) from exc
