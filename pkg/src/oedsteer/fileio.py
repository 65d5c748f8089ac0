"""Plain-text artifacts: field files, wind files and measurement CSVs.

Field file::

    FIELD nx ny x0 y0 dx dy t
    <ny lines of nx values, first line at y0; obstacles written as nan>

Wind file::

    WIND nx ny x0 y0 dx dy
    <ny lines of nx+1 u-face values>
    <ny+1 lines of nx v-face values>

Floats are written with ``repr`` so a write/read round trip is exact.
"""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Union

import numpy as np

from .domain import Grid, ScalarField, WindField

PathLike = Union[str, Path]


class FileFormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    if np.isnan(x):
        return "nan"
    return repr(float(x))


def _rows(arr: np.ndarray) -> str:
    return "".join(" ".join(_fmt(v) for v in row) + "\n" for row in arr)


def format_field(field: ScalarField, t: float = 0.0) -> str:
    g = field.grid
    head = f"FIELD {g.nx} {g.ny} {_fmt(g.x0)} {_fmt(g.y0)} {_fmt(g.dx)} {_fmt(g.dy)} {_fmt(t)}\n"
    return head + _rows(g.to_array(field.values))


def write_field(path: PathLike, field: ScalarField, t: float = 0.0) -> None:
    Path(path).write_text(format_field(field, t), encoding="utf-8")


def read_field_array(path: PathLike):
    """Parse a field file into ``(header, array)``; the array is ``(ny, nx)``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("FIELD"):
        raise FileFormatError(f"{path}: missing FIELD header")
    parts = lines[0].split()
    if len(parts) != 8:
        raise FileFormatError(f"{path}: header needs 7 values, got {len(parts) - 1}")
    try:
        nx, ny = int(parts[1]), int(parts[2])
        x0, y0, dx, dy, t = (float(p) for p in parts[3:])
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad header: {exc}") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != ny:
        raise FileFormatError(f"{path}: expected {ny} value rows, got {len(body)}")
    arr = np.empty((ny, nx))
    for j, ln in enumerate(body):
        vals = ln.split()
        if len(vals) != nx:
            raise FileFormatError(f"{path}: row {j + 2} has {len(vals)} values, expected {nx}")
        try:
            arr[j] = [float(v) for v in vals]
        except ValueError as exc:
            raise FileFormatError(f"{path}: row {j + 2}: {exc}") from None
    header = dict(nx=nx, ny=ny, x0=x0, y0=y0, dx=dx, dy=dy, t=t)
    return header, arr


def read_field(path: PathLike, grid: Grid) -> ScalarField:
    """Read a field file defined on ``grid`` (geometry and mask must agree)."""
    header, arr = read_field_array(path)
    probe = Grid(header["nx"], header["ny"], header["dx"], header["dy"], header["x0"], header["y0"])
    if not grid.same_geometry(probe):
        raise FileFormatError(f"{path}: grid geometry does not match")
    if not np.array_equal(np.isnan(arr), grid.mask):
        raise FileFormatError(f"{path}: nan pattern does not match the obstacle mask")
    return ScalarField(grid, grid.from_array(arr))


def write_wind(path: PathLike, wind: WindField) -> None:
    g = wind.grid
    head = f"WIND {g.nx} {g.ny} {_fmt(g.x0)} {_fmt(g.y0)} {_fmt(g.dx)} {_fmt(g.dy)}\n"
    Path(path).write_text(head + _rows(wind.u_face) + _rows(wind.v_face), encoding="utf-8")


def read_wind(path: PathLike, grid: Grid) -> WindField:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("WIND"):
        raise FileFormatError(f"{path}: missing WIND header")
    parts = lines[0].split()
    if len(parts) != 7:
        raise FileFormatError(f"{path}: header needs 6 values")
    nx, ny = int(parts[1]), int(parts[2])
    x0, y0, dx, dy = (float(p) for p in parts[3:])
    probe = Grid(nx, ny, dx, dy, x0, y0)
    if not grid.same_geometry(probe):
        raise FileFormatError(f"{path}: grid geometry does not match")
    vals = np.array([float(v) for v in " ".join(lines[1:]).split()])
    nu, nv = (nx + 1) * ny, nx * (ny + 1)
    if vals.size != nu + nv:
        raise FileFormatError(f"{path}: expected {nu + nv} face values, got {vals.size}")
    return WindField(grid, vals[:nu].reshape(ny, nx + 1), vals[nu:].reshape(ny + 1, nx))


def format_observations(times, xs, ys, values) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "t", "x", "y", "value"])
    for k, (t, x, y, v) in enumerate(zip(times, xs, ys, values)):
        w.writerow([k, _fmt(t), _fmt(x), _fmt(y), _fmt(v)])
    return buf.getvalue()


def write_observations(path: PathLike, times, xs, ys, values) -> None:
    Path(path).write_text(format_observations(times, xs, ys, values), encoding="utf-8")


def read_observations(path: PathLike) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0]) != ["index", "t", "x", "y", "value"]:
        raise FileFormatError(f"{path}: unexpected columns {list(rows[0])}")
    out = {k: np.array([float(r[k]) for r in rows]) for k in ("t", "x", "y", "value")}
    return out


def write_csv(path: PathLike, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def format_float(x: float) -> str:
    return _fmt(x)

