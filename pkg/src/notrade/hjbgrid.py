"""
Truncated z-grid and the per-node pieces of the one-dimensional HJB.

With ``v(x, y) = (x + y)^p u(z)`` and ``z = y / (x + y)`` the variational
inequality reads ``min{F, S, B} = 0`` where F is the continuation operator
(inner max over pi, inner min over the consumption ratio d), S the sell
gradient constraint and B the buy gradient constraint.  Every function here
is elementwise: scalars or equally shaped numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams, require_valid

DEFAULT_PI_CAP = 50.0
POSITIVITY_FLOOR = 1e-12


@dataclass(frozen=True)
class Grid:
    z_lo: float
    z_hi: float
    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("grid needs at least 3 nodes")
        if not self.z_lo < self.z_hi < 1.0:
            raise ValueError(f"need z_lo < z_hi < 1, got [{self.z_lo}, {self.z_hi}]")

    @property
    def h(self) -> float:
        return (self.z_hi - self.z_lo) / (self.n - 1)

    @property
    def z(self) -> np.ndarray:
        return self.z_lo + self.h * np.arange(self.n)

    def check(self, params: ModelParams) -> None:
        if not self.z_lo > params.z_min:
            raise ValueError(f"z_lo={self.z_lo} must exceed -(1-lam)/lam={params.z_min}")

    @classmethod
    def default(
        cls,
        params: ModelParams,
        n: int = 4001,
        margin: int = 10,
        z_floor: float = -5.0,
        z_lo: float | None = None,
        z_hi: float | None = None,
    ) -> "Grid":
        """Uniform grid ``margin`` cells inside both ends of the z-interval.

        When the left end lies below ``z_floor`` (small or zero lam) the grid
        starts at ``z_floor`` instead; the buy wedge extends all the way to
        the left end, so any cut-off left of eta2 is exact.
        """
        require_valid(params)
        lo_end = params.z_min
        if z_lo is not None and z_hi is not None:
            g = cls(z_lo, z_hi, n)
        elif z_lo is not None:
            h = (1.0 - z_lo) / (n - 1 + margin)
            g = cls(z_lo, 1.0 - margin * h, n)
        elif lo_end < z_floor:
            h = (1.0 - z_floor) / (n - 1 + margin)
            g = cls(z_floor, 1.0 - margin * h, n)
        else:
            h = (1.0 - lo_end) / (n - 1 + 2 * margin)
            g = cls(lo_end + margin * h, 1.0 - margin * h, n)
        g.check(params)
        return g


@dataclass(frozen=True)
class NodeState:
    z: float
    u: float
    du_minus: float
    du_plus: float
    d2u: float

    @property
    def du(self) -> float:
        return 0.5 * (self.du_minus + self.du_plus)

    def vx_proxy(self, p: float, du: float | None = None) -> float:
        return p * self.u - self.z * (self.du if du is None else du)

    def vy_proxy(self, p: float, du: float | None = None) -> float:
        return p * self.u + (1.0 - self.z) * (self.du if du is None else du)


def pi_quadratic(z, u, du, d2u, params: ModelParams):
    """Coefficients (Q, R) of the pi-objective ``sigma1^2 Q pi^2 / 2 + R pi``."""
    P = params
    p = P.p
    w = 1.0 - z
    Q = -p * (1 - p) * w**2 * u + 2 * (1 - p) * w**2 * z * du + z**2 * w**2 * d2u
    R1 = -p * (1 - p) * z * w * u + (1 - p) * z * w * (2 * z - 1) * du - z**2 * w**2 * d2u
    R2 = p * w * u - z * w * du
    R = P.rho * P.sigma1 * P.sigma2 * R1 + P.a1 * R2
    return Q, R


def pi_objective(pi, z, u, du, d2u, params: ModelParams):
    Q, R = pi_quadratic(z, u, du, d2u, params)
    return 0.5 * params.sigma1**2 * Q * pi**2 + R * pi


def optimal_pi_node(z, u, du, d2u, params: ModelParams, pi_cap: float = DEFAULT_PI_CAP):
    """Maximiser of the pi-quadratic on ``[-pi_cap, pi_cap]``.

    Where the quadratic is not strictly concave (Q >= 0) the better of the
    two cap endpoints is returned; :func:`concave_nodes` reports those nodes.
    """
    if not params.liquid_asset or pi_cap == 0:
        out = np.zeros(np.broadcast(z, u, du, d2u).shape)
        return out if out.ndim else 0.0
    Q, R = pi_quadratic(z, u, du, d2u, params)
    s2 = params.sigma1**2
    concave = Q < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = np.where(concave, -R / (s2 * np.where(concave, Q, -1.0)), 0.0)
    inner = np.clip(inner, -pi_cap, pi_cap)
    # endpoint choice for the non-concave case
    with np.errstate(invalid="ignore"):
        j_hi = 0.5 * s2 * Q * pi_cap**2 + R * pi_cap
        j_lo = 0.5 * s2 * Q * pi_cap**2 - R * pi_cap
    edge = np.where(j_hi >= j_lo, pi_cap, -pi_cap)
    out = np.where(concave, inner, edge)
    return out if np.ndim(out) else float(out)


def concave_nodes(z, u, du, d2u, params: ModelParams):
    """Boolean mask of nodes whose pi-quadratic is strictly concave."""
    Q, _ = pi_quadratic(z, u, du, d2u, params)
    return Q < 0


def vx_floor(u, eps: float = POSITIVITY_FLOOR):
    return eps * np.maximum(1.0, np.abs(u))


def optimal_d_node(z, u, du, params: ModelParams, floor_eps: float = POSITIVITY_FLOOR,
                   d_cap: float = np.inf):
    """Consumption-to-total-wealth ratio minimising ``d (pu - z u') - (d^theta (1-z)^(1-theta))^p / p``."""
    P = params
    tp = P.theta * P.p
    vx = np.maximum(P.p * u - z * du, vx_floor(u, floor_eps))
    d = (
        P.theta ** (1.0 / (1.0 - tp))
        * (1.0 - z) ** ((1.0 - P.theta) * P.p / (1.0 - tp))
        * vx ** (-1.0 / (1.0 - tp))
    )
    d = np.minimum(d, d_cap)
    return d if np.ndim(d) else float(d)


def consumption_objective(d, z, u, du, params: ModelParams):
    P = params
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore"):
        out = d * (P.p * u - z * du) - (d**P.theta * (1.0 - z) ** (1.0 - P.theta)) ** P.p / P.p
    return out if np.ndim(out) else float(out)


def continuation_coeffs(z, pi, d, params: ModelParams):
    """Coefficients of the continuation operator for frozen controls.

    ``F = c0 u - b u' - a u'' - f`` with ``a >= 0`` (degenerate elliptic),
    ``b`` the z-drift and ``f`` the utility flow per unit total wealth^p.
    """
    P = params
    p = P.p
    w = 1.0 - z
    s1 = P.sigma1 if P.liquid_asset else 0.0
    rs = P.rho * s1 * P.sigma2
    a = 0.5 * z**2 * w**2 * (P.sigma2**2 + s1**2 * pi**2 - 2.0 * rs * pi)
    b = (
        P.alpha2 * z * w
        - P.sigma2**2 * (1 - p) * z**2 * w
        + d * z
        + s1**2 * pi**2 * (1 - p) * w**2 * z
        + rs * pi * (1 - p) * z * w * (2 * z - 1)
        - P.a1 * pi * z * w
    )
    c0 = (
        P.beta
        - p * (P.r + P.alpha2 * z - 0.5 * P.sigma2**2 * (1 - p) * z**2)
        + d * p
        + 0.5 * s1**2 * pi**2 * p * (1 - p) * w**2
        + rs * pi * p * (1 - p) * z * w
        - P.a1 * pi * p * w
    )
    with np.errstate(divide="ignore"):
        f = (d**P.theta * w ** (1.0 - P.theta)) ** p / p
    return a, b, c0, f


def continuation_residual(z, u, du, d2u, pi, d, params: ModelParams):
    """Continuation operator at given controls, written term by term.

    The consumption part is the variational form
    ``d (pu - z u') - (d^theta (1-z)^(1-theta))^p / p``; at the optimal d it
    equals minus the conjugate utility.
    """
    P = params
    p = P.p
    w = 1.0 - z
    s1 = P.sigma1 if P.liquid_asset else 0.0
    Q, _ = pi_quadratic(z, u, du, d2u, P)
    R1 = -p * (1 - p) * z * w * u + (1 - p) * z * w * (2 * z - 1) * du - z**2 * w**2 * d2u
    R2 = p * w * u - z * w * du
    pi_block = 0.5 * pi**2 * s1**2 * Q + P.rho * s1 * P.sigma2 * pi * R1 + P.a1 * pi * R2
    return (
        P.beta * u
        - p * (P.r + P.alpha2 * z - 0.5 * P.sigma2**2 * (1 - p) * z**2) * u
        - (P.alpha2 * z * w - P.sigma2**2 * (1 - p) * z**2 * w) * du
        - 0.5 * P.sigma2**2 * z**2 * w**2 * d2u
        + consumption_objective(d, z, u, du, P)
        - pi_block
    )


def sell_obstacle(z, u, du, params: ModelParams):
    """``pu + (1 - mu z) u' / mu``; for mu == 0 the unscaled ``mu pu + (1 - mu z) u'``."""
    mu = params.mu
    if mu == 0:
        return (1.0 - mu * z) * du
    return params.p * u + (1.0 - mu * z) * du / mu


def buy_obstacle(z, u, du, params: ModelParams):
    """``pu - (1 - lam (1-z)) u' / lam``; for lam == 0 the unscaled form ``-u'``."""
    lam = params.lam
    if lam == 0:
        return -(1.0 - lam * (1.0 - z)) * du
    return params.p * u - (1.0 - lam * (1.0 - z)) * du / lam


def sell_step_ratio(z_to, z_from, params: ModelParams):
    """Value ratio u(z_from)/u(z_to) for selling from z_from down to z_to.

    Exact for the homothetic value: selling conserves x + (1-mu) y.
    """
    mu = params.mu
    return ((1.0 - mu * z_from) / (1.0 - mu * z_to)) ** params.p


def buy_step_ratio(z_to, z_from, params: ModelParams):
    """Value ratio u(z_from)/u(z_to) for buying from z_from up to z_to."""
    lam = params.lam
    return ((1.0 - lam * (1.0 - z_from)) / (1.0 - lam * (1.0 - z_to))) ** params.p
