"""Structured cell grid with obstacles, grid functions and wind fields.

Cells are indexed ``(i, j)`` with ``i`` along x and ``j`` along y; flat cell
numbers are row-major from the lower-left corner (``j * nx + i``). Only fluid
cells carry degrees of freedom and are enumerated in that same order.

Face velocities are stored on a staggered layout: ``u_face`` has shape
``(ny, nx + 1)`` (x-velocity on vertical faces) and ``v_face`` shape
``(ny + 1, nx)`` (y-velocity on horizontal faces).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .numcore import ContractError

SIDES = ("south", "north", "east", "west")


class DegenerateDomainError(ValueError):
    """No usable fluid region (fully masked grid, isolated pockets, ...)."""


class DegenerateRegionError(ValueError):
    """A region selects no fluid cell."""


@dataclass(frozen=True)
class RegionRect:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(f"empty rectangle {self}")

    def contains(self, x, y):
        return (x >= self.xmin) & (x <= self.xmax) & (y >= self.ymin) & (y <= self.ymax)

    def clip(self, other: "RegionRect") -> "RegionRect":
        return RegionRect(max(self.xmin, other.xmin), min(self.xmax, other.xmax),
                          max(self.ymin, other.ymin), min(self.ymax, other.ymax))

    @classmethod
    def centered(cls, cx: float, cy: float, side: float) -> "RegionRect":
        h = 0.5 * side
        return cls(cx - h, cx + h, cy - h, cy + h)


@dataclass(frozen=True)
class QoiSpec:
    """Region and time window of a goal functional.

    ``t_start == t_end == 0`` selects the initial-condition functional
    ``m -> int_P m``; otherwise the functional integrates the transported
    concentration over ``[t_start, t_end] x P``.
    """

    region: RegionRect
    t_start: float = 0.0
    t_end: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.t_start <= self.t_end:
            raise ValueError(f"invalid QoI window [{self.t_start}, {self.t_end}]")

    @property
    def is_initial(self) -> bool:
        return self.t_start == 0.0 and self.t_end == 0.0


@dataclass(eq=False)
class Grid:
    nx: int
    ny: int
    dx: float
    dy: float
    x0: float = 0.0
    y0: float = 0.0
    mask: Optional[np.ndarray] = None  # (ny, nx), True = solid

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ContractError("grid needs at least 4 cells per direction")
        if self.dx <= 0 or self.dy <= 0:
            raise ContractError("cell sizes must be positive")
        if self.mask is None:
            self.mask = np.zeros((self.ny, self.nx), dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.ny, self.nx):
            raise ContractError("mask shape must be (ny, nx)")
        self.mask.setflags(write=False)
        fluid = ~self.mask.ravel()
        if not fluid.any():
            raise DegenerateDomainError("every cell is masked as solid")
        self.cells = np.flatnonzero(fluid)
        index = np.full(self.nx * self.ny, -1, dtype=np.int64)
        index[self.cells] = np.arange(self.cells.size)
        self.active_index = index.reshape(self.ny, self.nx)
        self.active_index.setflags(write=False)
        jj, ii = np.divmod(self.cells, self.nx)
        self.ci = ii
        self.cj = jj
        self.xc = self.x0 + (ii + 0.5) * self.dx
        self.yc = self.y0 + (jj + 0.5) * self.dy

    @property
    def n_dof(self) -> int:
        return self.cells.size

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def width(self) -> float:
        return self.nx * self.dx

    @property
    def height(self) -> float:
        return self.ny * self.dy

    @property
    def bounds(self) -> RegionRect:
        return RegionRect(self.x0, self.x0 + self.width, self.y0, self.y0 + self.height)

    def mass(self) -> np.ndarray:
        """Lumped mass matrix diagonal (cell areas)."""
        return np.full(self.n_dof, self.cell_area)

    def locate(self, x: float, y: float) -> int:
        """Degree of freedom of the fluid cell containing ``(x, y)``."""
        i = int(np.floor((x - self.x0) / self.dx))
        j = int(np.floor((y - self.y0) / self.dy))
        # points on the far edge belong to the last cell
        if i == self.nx and np.isclose(x, self.x0 + self.width):
            i -= 1
        if j == self.ny and np.isclose(y, self.y0 + self.height):
            j -= 1
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise ContractError(f"point ({x}, {y}) outside the grid")
        dof = self.active_index[j, i]
        if dof < 0:
            raise ContractError(f"point ({x}, {y}) lies in an obstacle")
        return int(dof)

    def center(self, dof: int) -> tuple[float, float]:
        return float(self.xc[dof]), float(self.yc[dof])

    def to_array(self, values: np.ndarray) -> np.ndarray:
        """Scatter dof values into a ``(ny, nx)`` array with NaN in obstacles."""
        out = np.full(self.nx * self.ny, np.nan)
        out[self.cells] = values
        return out.reshape(self.ny, self.nx)

    def from_array(self, arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr, dtype=float).ravel()[self.cells]

    def same_geometry(self, other: "Grid") -> bool:
        return (self.nx == other.nx and self.ny == other.ny
                and np.isclose(self.dx, other.dx) and np.isclose(self.dy, other.dy)
                and np.isclose(self.x0, other.x0) and np.isclose(self.y0, other.y0))


@dataclass(eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_dof,):
            raise ContractError(
                f"field has {self.values.shape} values, grid has {self.grid.n_dof} dofs")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def integral(self) -> float:
        return float(self.grid.mass() @ self.values)


@dataclass(eq=False)
class WindField:
    grid: Grid
    u_face: np.ndarray
    v_face: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        g = self.grid
        self.u_face = np.asarray(self.u_face, dtype=float).reshape(g.ny, g.nx + 1)
        self.v_face = np.asarray(self.v_face, dtype=float).reshape(g.ny + 1, g.nx)
        if self.check:
            solid_u, solid_v = _solid_faces(g)
            if np.any(self.u_face[solid_u] != 0) or np.any(self.v_face[solid_v] != 0):
                raise ValueError("faces touching obstacles must carry zero normal velocity")
            vmax = self.max_speed()
            div = np.abs(self.divergence())
            bound = 1e-8 * vmax / min(g.dx, g.dy)
            if div.size and div.max() > bound:
                raise ValueError(f"wind field not divergence free: max |div| = {div.max():.3e}")

    def max_speed(self) -> float:
        return float(max(np.abs(self.u_face).max(), np.abs(self.v_face).max()))

    def divergence(self) -> np.ndarray:
        """Discrete divergence per fluid cell [1/s]."""
        g = self.grid
        div = ((self.u_face[:, 1:] - self.u_face[:, :-1]) / g.dx
               + (self.v_face[1:, :] - self.v_face[:-1, :]) / g.dy)
        return div.ravel()[g.cells]

    def boundary_flux(self) -> tuple[float, float]:
        """Total (influx, outflux) through the outer boundary [m^2/s]."""
        g = self.grid
        out = np.concatenate([-self.u_face[:, 0] * g.dy, self.u_face[:, -1] * g.dy,
                              -self.v_face[0, :] * g.dx, self.v_face[-1, :] * g.dx])
        return float(-out[out < 0].sum()), float(out[out > 0].sum())


def _solid_faces(g: Grid):
    """Boolean masks of faces with a solid cell on at least one side."""
    m = g.mask
    su = np.zeros((g.ny, g.nx + 1), dtype=bool)
    su[:, :-1] |= m
    su[:, 1:] |= m
    sv = np.zeros((g.ny + 1, g.nx), dtype=bool)
    sv[:-1, :] |= m
    sv[1:, :] |= m
    return su, sv


def build_grid(nx: int, ny: int, extent: tuple[float, float],
               obstacles: Iterable[RegionRect] = (),
               origin: tuple[float, float] = (0.0, 0.0)) -> Grid:
    """Uniform grid over ``origin + [0, width] x [0, height]``.

    Cells whose centers fall inside any obstacle rectangle are solid.
    """
    width, height = extent
    dx, dy = width / nx, height / ny
    x0, y0 = origin
    box = RegionRect(x0, x0 + width, y0, y0 + height)
    xc = x0 + (np.arange(nx) + 0.5) * dx
    yc = y0 + (np.arange(ny) + 0.5) * dy
    X, Y = np.meshgrid(xc, yc)
    mask = np.zeros((ny, nx), dtype=bool)
    for ob in obstacles:
        if (ob.xmin < box.xmin - 1e-9 or ob.xmax > box.xmax + 1e-9
                or ob.ymin < box.ymin - 1e-9 or ob.ymax > box.ymax + 1e-9):
            raise ContractError(f"obstacle {ob} leaves the domain {box}")
        mask |= ob.contains(X, Y)
    return Grid(nx, ny, dx, dy, x0, y0, mask)


def _face_lists(g: Grid):
    """Interior fluid-fluid faces: ``(a_v, b_v, a_h, b_h)``.

    Vertical faces have ``a_v`` west of ``b_v``; horizontal faces have ``a_h``
    south of ``b_h``.
    """
    idx = g.active_index
    a_v = idx[:, :-1].ravel()
    b_v = idx[:, 1:].ravel()
    keep = (a_v >= 0) & (b_v >= 0)
    a_h = idx[:-1, :].ravel()
    b_h = idx[1:, :].ravel()
    keep_h = (a_h >= 0) & (b_h >= 0)
    return (a_v[keep], b_v[keep], a_h[keep_h], b_h[keep_h])


def _boundary_faces(g: Grid, side: str):
    """Fluid cells touching one outer side, with their face positions."""
    idx = g.active_index
    if side == "south":
        dofs, pos = idx[0, :], np.arange(g.nx)
    elif side == "north":
        dofs, pos = idx[-1, :], np.arange(g.nx)
    elif side == "west":
        dofs, pos = idx[:, 0], np.arange(g.ny)
    elif side == "east":
        dofs, pos = idx[:, -1], np.arange(g.ny)
    else:
        raise ValueError(f"unknown side {side!r}; expected one of {SIDES}")
    keep = dofs >= 0
    return dofs[keep], pos[keep]


_OPPOSITE = {"south": "north", "north": "south", "east": "west", "west": "east"}


def potential_flow_wind(grid: Grid, inflow_speed: float, inflow_side: str = "south") -> WindField:
    """Divergence-free wind from a discrete potential-flow problem.

    Uniform influx ``inflow_speed`` enters through the fluid faces of
    ``inflow_side``; the opposite side holds the potential at zero (free
    outflow), and obstacles plus the lateral sides are impermeable. Velocity
    is ``-grad(phi)`` evaluated on faces, so the discrete divergence vanishes
    up to the direct solver's round-off.
    """
    if inflow_speed <= 0:
        raise ContractError("inflow_speed must be positive")
    g = grid
    n = g.n_dof
    av, bv, ah, bh = _face_lists(g)
    cond_v = g.dy / g.dx
    cond_h = g.dx / g.dy
    rows = np.concatenate([av, bv, av, bv, ah, bh, ah, bh])
    cols = np.concatenate([av, bv, bv, av, ah, bh, bh, ah])
    vals = np.concatenate([np.full(av.size, cond_v), np.full(av.size, cond_v),
                           np.full(av.size, -cond_v), np.full(av.size, -cond_v),
                           np.full(ah.size, cond_h), np.full(ah.size, cond_h),
                           np.full(ah.size, -cond_h), np.full(ah.size, -cond_h)])
    out_side = _OPPOSITE[inflow_side]
    out_dofs, _ = _boundary_faces(g, out_side)
    if out_dofs.size == 0:
        raise DegenerateDomainError(f"outflow side {out_side} is fully blocked")
    vertical_out = out_side in ("east", "west")
    face_len = g.dy if vertical_out else g.dx
    half = 0.5 * (g.dx if vertical_out else g.dy)
    cond_d = face_len / half
    rows = np.concatenate([rows, out_dofs])
    cols = np.concatenate([cols, out_dofs])
    vals = np.concatenate([vals, np.full(out_dofs.size, cond_d)])
    lap = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    adjacency = sp.csr_matrix((np.ones(av.size + ah.size),
                               (np.concatenate([av, ah]), np.concatenate([bv, bh]))), shape=(n, n))
    n_comp, labels = csgraph.connected_components(adjacency, directed=False)
    drained = np.zeros(n_comp, dtype=bool)
    drained[labels[out_dofs]] = True
    if not drained.all():
        raise DegenerateDomainError(
            f"{int((~drained).sum())} fluid pocket(s) are not connected to the outflow side")

    in_dofs, in_pos = _boundary_faces(g, inflow_side)
    in_len = g.dy if inflow_side in ("east", "west") else g.dx
    rhs = np.zeros(n)
    np.add.at(rhs, in_dofs, inflow_speed * in_len)
    phi = spla.spsolve(lap.tocsc(), rhs)

    full = np.zeros(g.nx * g.ny)
    full[g.cells] = phi
    full = full.reshape(g.ny, g.nx)
    m = g.mask
    u = np.zeros((g.ny, g.nx + 1))
    v = np.zeros((g.ny + 1, g.nx))
    open_u = ~(m[:, :-1] | m[:, 1:])
    u[:, 1:-1] = np.where(open_u, (full[:, :-1] - full[:, 1:]) / g.dx, 0.0)
    open_v = ~(m[:-1, :] | m[1:, :])
    v[1:-1, :] = np.where(open_v, (full[:-1, :] - full[1:, :]) / g.dy, 0.0)

    sign_in = {"south": 1.0, "west": 1.0, "north": -1.0, "east": -1.0}[inflow_side]
    _, out_pos = _boundary_faces(g, out_side)
    phi_out = phi[out_dofs] / half  # |velocity| leaving through the Dirichlet side
    if inflow_side == "south":
        v[0, in_pos] = sign_in * inflow_speed
        v[-1, out_pos] = phi_out
    elif inflow_side == "north":
        v[-1, in_pos] = sign_in * inflow_speed
        v[0, out_pos] = -phi_out
    elif inflow_side == "west":
        u[in_pos, 0] = sign_in * inflow_speed
        u[out_pos, -1] = phi_out
    else:
        u[in_pos, -1] = sign_in * inflow_speed
        u[out_pos, 0] = -phi_out
    return WindField(g, u, v)


def uniform_wind(grid: Grid, u: float, v: float) -> WindField:
    """Constant wind; only divergence free on obstacle-free grids."""
    uf = np.full((grid.ny, grid.nx + 1), float(u))
    vf = np.full((grid.ny + 1, grid.nx), float(v))
    return WindField(grid, uf, vf)


def gaussian_blob(grid: Grid, center: Sequence[float], radius: float,
                  cap: float = 0.5, eps: float = 0.001) -> ScalarField:
    """Capped radial bump ``min(cap, eps ** (|x - center|^2 / radius^2))``.

    The bump decays from the cap at the center to ``eps`` at distance
    ``radius``.
    """
    if radius <= 0 or cap <= 0 or not 0 < eps < 1:
        raise ContractError("need radius > 0, cap > 0 and 0 < eps < 1")
    d2 = (grid.xc - center[0]) ** 2 + (grid.yc - center[1]) ** 2
    return ScalarField(grid, np.minimum(cap, eps ** (d2 / radius ** 2)))


def region_indicator(grid: Grid, region: RegionRect) -> ScalarField:
    """1 on fluid cells whose centers lie in ``region``, 0 elsewhere."""
    ind = region.contains(grid.xc, grid.yc).astype(float)
    if not ind.any():
        raise DegenerateRegionError(f"region {region} contains no fluid cell center")
    return ScalarField(grid, ind)
