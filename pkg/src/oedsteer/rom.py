"""Truncated-SVD surrogates of the parameter-to-observable map.

The SVD is taken of the Euclidean matrix ``Fhat = F M^-1/2`` (or, for the
prior-preconditioned variant, ``Ghat = F A^-1 M^1/2``). Writing
``Fhat ~ V diag(S) Zhat^T`` and ``U = M^-1/2 Zhat`` gives factors with
``U^T M U = I`` and ``V^T V = I``, and the online rules

    ``rom_apply(m) = V S U^T M m``,   ``rom_apply_adjoint(y) = U S V^T y``,

which form an exact adjoint pair in ``(<.,.>_M, <.,.>)``. The preconditioned
ROM approximates ``G = F A^-1 M``; the forward map is recovered as
``F m ~ V S U^T A m``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .numcore import DEFAULT_SEED, ContractError, LinearMap, randomized_svd
from .prior import BiLaplacianPrior
from .transport import ForwardMap


@dataclass(eq=False)
class RomOperator:
    U: np.ndarray  # n_dof x r, M-orthonormal
    S: np.ndarray
    V: np.ndarray  # q x r, orthonormal
    preconditioned: bool
    mass: np.ndarray
    truncation_error: float = float("nan")
    build_seconds: float = float("nan")

    def __post_init__(self):
        if self.U.shape[1] != self.S.size or self.V.shape[1] != self.S.size:
            raise ContractError("ROM factor widths disagree")
        if np.any(self.S < 0) or np.any(np.diff(self.S) > 0):
            raise ContractError("singular values must be non-negative and descending")

    @property
    def rank(self) -> int:
        return self.S.size

    @property
    def n_dof(self) -> int:
        return self.U.shape[0]

    @property
    def n_meas(self) -> int:
        return self.V.shape[0]

    def truncate(self, rank: int) -> "RomOperator":
        return RomOperator(self.U[:, :rank], self.S[:rank], self.V[:, :rank], self.preconditioned,
                           self.mass, self.S[rank] / self.S[0] if rank < self.rank else self.truncation_error)

    def save(self, path) -> None:
        fmt = lambda a: " ".join(repr(float(v)) for v in a)  # noqa: E731
        lines = [f"ROM {self.rank} {self.n_dof} {self.n_meas} {int(self.preconditioned)}",
                 fmt(self.S)]
        lines += [fmt(self.U[:, i]) for i in range(self.rank)]
        lines += [fmt(self.V[:, i]) for i in range(self.rank)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, mass: np.ndarray) -> "RomOperator":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = lines[0].split() if lines else []
        if len(head) != 5 or head[0] != "ROM":
            raise ValueError(f"{path}: missing ROM header")
        r, n, q, flag = (int(v) for v in head[1:])
        if n != mass.size:
            raise ContractError(f"{path}: n_dof {n} does not match the grid ({mass.size})")
        if len(lines) < 2 + 2 * r:
            raise ValueError(f"{path}: truncated ROM file")
        s = np.array([float(v) for v in lines[1].split()]) if r else np.zeros(0)
        u = np.array([[float(v) for v in lines[2 + i].split()] for i in range(r)]).reshape(r, n).T
        v = np.array([[float(x) for x in lines[2 + r + i].split()] for i in range(r)]).reshape(r, q).T
        return cls(u, s, v, bool(flag), mass)

    def forward_view(self, prior: Optional[BiLaplacianPrior] = None) -> "RomForward":
        """Drop-in replacement for :class:`ForwardMap` built from the factors."""
        if self.preconditioned and prior is None:
            raise ContractError("a preconditioned ROM needs the prior to act as F")
        return RomForward(self, prior, np.arange(self.n_meas))


def _check_len(x, n, what):
    if np.shape(x)[0] != n:
        raise ContractError(f"{what} has length {np.shape(x)[0]}, expected {n}")


def rom_apply(m: np.ndarray, rom: RomOperator) -> np.ndarray:
    """``V S U^T M m``."""
    m = np.asarray(m, dtype=float)
    _check_len(m, rom.n_dof, "parameter")
    mm = rom.mass if m.ndim == 1 else rom.mass[:, None]
    z = rom.U.T @ (mm * m)
    return rom.V @ (rom.S * z if z.ndim == 1 else rom.S[:, None] * z)


def rom_apply_adjoint(y: np.ndarray, rom: RomOperator) -> np.ndarray:
    """``U S V^T y``, the mass-weighted adjoint of :func:`rom_apply`."""
    y = np.asarray(y, dtype=float)
    _check_len(y, rom.n_meas, "observation vector")
    z = rom.V.T @ y
    return rom.U @ (rom.S * z if z.ndim == 1 else rom.S[:, None] * z)


def rom_forward(m: np.ndarray, rom: RomOperator, prior: Optional[BiLaplacianPrior] = None) -> np.ndarray:
    """Surrogate of ``F m`` for either ROM flavour."""
    if not rom.preconditioned:
        return rom_apply(m, rom)
    if prior is None:
        raise ContractError("a preconditioned ROM needs the prior to act as F")
    z = rom.U.T @ (prior.A @ m)
    return rom.V @ (rom.S * z if z.ndim == 1 else rom.S[:, None] * z)


class RomForward:
    """ROM-backed forward map with the ``ForwardMap`` interface."""

    def __init__(self, rom: RomOperator, prior: Optional[BiLaplacianPrior], rows: np.ndarray):
        self.rom, self.prior, self.rows = rom, prior, np.asarray(rows, dtype=np.int64)
        self._v = rom.V[self.rows] * rom.S
        self._left = prior.A if rom.preconditioned else None

    @property
    def n_meas(self) -> int:
        return self.rows.size

    @property
    def n_dof(self) -> int:
        return self.rom.n_dof

    def restrict(self, rows) -> "RomForward":
        return RomForward(self.rom, self.prior, self.rows[np.asarray(rows, dtype=np.int64)])

    def apply(self, m):
        m = np.asarray(m, dtype=float)
        if self._left is not None:
            x = self._left @ m
        else:
            x = self.rom.mass * m if m.ndim == 1 else self.rom.mass[:, None] * m
        return self._v @ (self.rom.U.T @ x)

    def apply_transpose(self, y):
        z = self.rom.U @ (self._v.T @ np.asarray(y, dtype=float))
        if self._left is not None:
            return self._left @ z
        return self.rom.mass * z if z.ndim == 1 else self.rom.mass[:, None] * z


def scaled_map(forward: ForwardMap, prior: BiLaplacianPrior, preconditioned: bool) -> LinearMap:
    """Euclidean ``Fhat = F M^-1/2`` or ``Ghat = F A^-1 M^1/2`` with its transpose."""
    sq = np.sqrt(prior.M)

    def col(v, x):
        return v * x if x.ndim == 1 else v[:, None] * x

    if preconditioned:
        def apply(x):
            return forward.apply(prior.solve_A(col(sq, x)))

        def adjoint(y):
            return col(sq, prior.solve_A(forward.apply_transpose(y)))
    else:
        def apply(x):
            return forward.apply(col(1.0 / sq, x))

        def adjoint(y):
            return col(1.0 / sq, forward.apply_transpose(y))
    return LinearMap((forward.n_meas, prior.n_dof), apply, adjoint)


def build_rom(forward: ForwardMap, prior: BiLaplacianPrior, rank: int, preconditioned: bool = True,
              oversample: int = 10, power_iters: int = 1, seed: int = DEFAULT_SEED) -> RomOperator:
    """Randomized SVD surrogate of ``F`` or ``F A^-1 M``.

    One extra singular value is computed so the probed truncation error
    ``sigma_{r+1} / sigma_1`` can be reported; it is zero when the rank
    reaches ``min(n_dof, q)``.
    """
    limit = min(prior.n_dof, forward.n_meas)
    if rank < 1 or rank > limit:
        raise ContractError(f"rank {rank} outside [1, {limit}]")
    t0 = time.perf_counter()
    op = scaled_map(forward, prior, preconditioned)
    k = min(rank + 1, limit)
    v, s, zhat = randomized_svd(op, k, oversample=oversample, power_iters=power_iters, seed=seed)
    err = float(s[rank] / s[0]) if k > rank and s[0] > 0 else 0.0
    u = zhat / np.sqrt(prior.M)[:, None]
    rom = RomOperator(u[:, :rank], s[:rank], v[:, :rank], preconditioned, prior.M.copy(), err,
                      time.perf_counter() - t0)
    return rom
