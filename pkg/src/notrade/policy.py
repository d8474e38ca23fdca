"""
Two-dimensional value function and feedback rules rebuilt from a 1-D solution.

Homotheticity gives ``v(x, y) = (x + y)^p u(z)`` with ``z = y / (x + y)``.
Inside the trade wedges u is extended with the exact wedge forms anchored at
the last solved node, so positions beyond the truncated grid (including the
x < 0 part of the solvency region) are valued without clamping whenever the
corresponding wedge exists.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from . import hjbgrid as hg
from .model import ModelParams
from .solver import BR, NT, SR, Solution


class Region(IntEnum):
    BR = BR
    NT = NT
    SR = SR
    FORCED_LIQUIDATION = 3


class OutOfGridWarning(UserWarning):
    """z fell outside the solved grid and no wedge form covers it; z was clamped."""


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    @property
    def total(self) -> float:
        return self.x + self.y

    @property
    def z(self) -> float:
        return self.y / (self.x + self.y)

    def scaled(self, m: float) -> "Position":
        return Position(m * self.x, m * self.y)

    def solvent(self, params: ModelParams, atol: float = 0.0) -> bool:
        """Inside the closure of the extended solvency region."""
        return (self.x + (1.0 - params.mu) * self.y >= -atol
                and self.x + self.y / (1.0 - params.lam) >= -atol)


def _nt_derivatives(u, h):
    """du and d2u on an NT block: centred inside, one-sided at both ends."""
    m = u.size
    du = np.empty(m)
    d2u = np.empty(m)
    if m == 1:
        return np.zeros(1), np.zeros(1)
    if m == 2:
        du[:] = (u[1] - u[0]) / h
        d2u[:] = 0.0
        return du, d2u
    du[1:-1] = (u[2:] - u[:-2]) / (2 * h)
    d2u[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / h**2
    du[0] = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * h)
    du[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * h)
    d2u[0] = (u[0] - 2 * u[1] + u[2]) / h**2
    d2u[-1] = (u[-1] - 2 * u[-2] + u[-3]) / h**2
    return du, d2u


class PolicyField:
    """Feedback maps over a converged :class:`Solution`.

    Parameters
    ----------
    solution : Solution
        Converged solve.
    pi_cap : float
        Cap applied when re-evaluating pi from the smoothed derivatives.

    Notes
    -----
    Controls are tabulated on the NT nodes and linearly interpolated in z;
    outside the first/last NT node they are held constant.
    """

    order = "linear"

    def __init__(self, solution: Solution, pi_cap: float = hg.DEFAULT_PI_CAP):
        self.solution = solution
        self.params = solution.params
        P = self.params
        sol = solution
        self.z_grid = sol.z
        self.u_grid = sol.u
        self.h = sol.grid.h
        self.eta2, self.eta1 = sol.eta2, sol.eta1
        self.has_br = not sol.flags.get("no_BR", False)
        self.has_sr = not sol.flags.get("no_SR", False)
        sl = sol.nt_slice
        if sl.stop <= sl.start:
            raise PolicyError("solution has an empty no-trade region")
        self.nt_index = np.arange(sl.start, sl.stop)
        self.z_nt = sol.z[sl]
        self.u_nt = sol.u[sl]
        self.du_nt, self.d2u_nt = _nt_derivatives(self.u_nt, self.h)
        self.pi_nt = np.asarray(
            hg.optimal_pi_node(self.z_nt, self.u_nt, self.du_nt, self.d2u_nt, P, pi_cap), float)
        self.c_ratio_nt = np.asarray(hg.optimal_d_node(self.z_nt, self.u_nt, self.du_nt, P), float)
        # anchors for the exact wedge extensions
        self._k_sell = sl.stop if self.has_sr else None
        self._k_buy = sl.start - 1 if self.has_br else None

    # -- value ---------------------------------------------------------------
    def u_at(self, z):
        """u at arbitrary z; second item tells whether any point was clamped."""
        P = self.params
        z = np.asarray(z, dtype=float)
        zg, ug = self.z_grid, self.u_grid
        out = np.interp(z, zg, ug)
        clamped = np.zeros(z.shape, dtype=bool)
        if self._k_sell is not None:
            k = self._k_sell
            m = z >= zg[k]
            with np.errstate(invalid="ignore"):
                out = np.where(m, ug[k] * ((1.0 - P.mu * z) / (1.0 - P.mu * zg[k])) ** P.p, out)
        else:
            clamped |= z > zg[-1]
        if self._k_buy is not None:
            k = self._k_buy
            m = z <= zg[k]
            with np.errstate(invalid="ignore"):
                out = np.where(
                    m, ug[k] * ((1.0 - P.lam * (1.0 - z)) / (1.0 - P.lam * (1.0 - zg[k]))) ** P.p, out)
        else:
            clamped |= z < zg[0]
        return out, clamped

    def controls_at(self, z):
        z = np.asarray(z, dtype=float)
        return (np.interp(z, self.z_nt, self.pi_nt),
                np.interp(z, self.z_nt, self.c_ratio_nt))

    def classify_z(self, z):
        """Region code per z (no forced-liquidation handling)."""
        z = np.asarray(z, dtype=float)
        half = 0.5 * self.h
        reg = np.full(z.shape, NT, dtype=np.int8)
        if self.has_br:
            reg[z < self.eta2 - half] = BR
        if self.has_sr:
            reg[z > self.eta1 + half] = SR
        return reg


def value(pos: Position, field: PolicyField) -> float:
    """``(x + y)^p u(z)``; 0 (p > 0) or -inf (p < 0) at the origin."""
    P = field.params
    w = pos.total
    if w <= 0:
        if not pos.solvent(P):
            raise PolicyError(f"{pos} is outside the solvency region")
        return 0.0 if P.p > 0 else -np.inf
    u, clamped = field.u_at(pos.z)
    if clamped:
        warnings.warn(f"z={pos.z:.6g} outside the solved grid, clamped", OutOfGridWarning,
                      stacklevel=2)
    return float(w**P.p * u)


def classify(pos: Position, field: PolicyField) -> Region:
    P = field.params
    if not pos.solvent(P, atol=1e-14 * (abs(pos.x) + abs(pos.y))):
        raise PolicyError(f"{pos} is outside the solvency region")
    if pos.x < 0:
        return Region.FORCED_LIQUIDATION
    if pos.total <= 0:
        raise PolicyError("classification needs x + y > 0")
    return Region(int(field.classify_z(pos.z)))


def initial_jump(pos: Position, field: PolicyField, params: ModelParams | None = None) -> Position:
    """Time-zero trade that moves a position onto the no-trade wedge.

    Sales keep ``x + (1 - mu) y`` fixed and stop on the eta1 ray; purchases
    keep ``x + y / (1 - lam)`` fixed and stop on the eta2 ray.  A short
    liquid position is closed by selling the illiquid asset.
    """
    P = params or field.params
    reg = classify(pos, field)
    x, y = pos.x, pos.y
    if reg == Region.FORCED_LIQUIDATION:
        return Position(0.0, y + x / (1.0 - P.mu))
    if reg == Region.NT:
        return pos
    if reg == Region.SR:
        e = field.eta1
        den = 1.0 - P.mu * e
        if not np.isfinite(e) or den <= 0:
            raise PolicyError("sell boundary is not reachable")
        delta = max((y - e * pos.total) / den, 0.0)
        return Position(x + (1.0 - P.mu) * delta, y - delta)
    e = field.eta2
    den = 1.0 - P.lam * (1.0 - e)
    if not np.isfinite(e) or den <= 0:
        raise PolicyError("buy boundary is not reachable")
    L = max((e * pos.total - y) / den, 0.0)
    return Position(x - L, y + (1.0 - P.lam) * L)


def _require_nt(pos, field):
    reg = classify(pos, field)
    if reg != Region.NT:
        raise PolicyError(f"controls are defined in NT only, position is {reg.name}")


def consumption_rate(pos: Position, field: PolicyField, params: ModelParams | None = None) -> float:
    """Optimal consumption c* = (x + y) d*(z) for an NT position."""
    _require_nt(pos, field)
    _, d = field.controls_at(pos.z)
    return float(pos.total * d)


def investment_fraction(pos: Position, field: PolicyField, params: ModelParams | None = None) -> float:
    """Fraction of liquid wealth held in the liquid risky asset."""
    _require_nt(pos, field)
    pi, _ = field.controls_at(pos.z)
    return float(pi)
