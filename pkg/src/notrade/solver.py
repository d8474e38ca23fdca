"""
Policy iteration for the discrete variational inequality ``min{F, S, B} = 0``.

Each node picks one of three controls: continue (with the pointwise optimal
pi and consumption ratio d), sell one grid step, or buy one grid step.  The
trade rows use the exact value ratio of a homothetic one-step transaction,
so the sell and buy wedge forms are reproduced without discretisation error.
Continuation rows use upwinded first differences, which together with the
trade rows gives a Z-matrix at every iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from . import hjbgrid as hg
from .model import ModelParams, c_star_const, require_valid

log = logging.getLogger(__name__)

BR, NT, SR = 0, 1, 2
REGION_NAMES = {BR: "BR", NT: "NT", SR: "SR"}


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


class NonConcaveError(SolverError):
    def __init__(self, msg, nodes):
        super().__init__(msg)
        self.nodes = nodes


@dataclass(frozen=True)
class SolveOptions:
    tol: float = 1e-8
    max_iters: int = 200
    pi_cap: float = hg.DEFAULT_PI_CAP
    d_cap: float = 100.0
    damping: float = 1.0
    boundary_mode: str = "obstacle-pinned"
    check_m_matrix: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.boundary_mode not in ("obstacle-pinned", "extrapolated"):
            raise ValueError(f"unknown boundary_mode {self.boundary_mode!r}")


@dataclass
class Branches:
    """Discrete residuals of the three branches and the controls behind F."""

    F: np.ndarray
    S: np.ndarray
    B: np.ndarray
    pi: np.ndarray
    d: np.ndarray
    du: np.ndarray
    d2u: np.ndarray

    @property
    def min(self) -> np.ndarray:
        return np.minimum(np.minimum(self.F, self.S), self.B)


@dataclass
class Solution:
    params: ModelParams
    grid: hg.Grid
    u: np.ndarray
    region: np.ndarray
    eta2: float
    eta1: float
    iters: int
    final_residual: float
    pi_cap_slack: float
    tol: float
    branches: Branches
    history: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    boundary_mode: str = "obstacle-pinned"

    @property
    def z(self) -> np.ndarray:
        return self.grid.z

    @property
    def scale(self) -> float:
        return float(np.max(np.abs(self.u)))

    @property
    def resolution(self) -> float:
        return 0.5 * self.grid.h

    def counts(self, include_ends: bool = False) -> dict:
        """Nodes per region; the two pinned end nodes are left out by default."""
        reg = self.region if include_ends else self.region[1:-1]
        return {REGION_NAMES[k]: int(np.sum(reg == k)) for k in (BR, NT, SR)}

    @property
    def nt_slice(self) -> slice:
        idx = np.flatnonzero(self.region == NT)
        return slice(idx[0], idx[-1] + 1) if idx.size else slice(0, 0)

    @classmethod
    def from_values(cls, params, grid, u, opts: SolveOptions | None = None, **kw) -> "Solution":
        """Wrap an arbitrary grid function, e.g. to audit a hand-built candidate."""
        opts = opts or SolveOptions()
        disc = _Discretisation(params, grid, opts)
        u = np.asarray(u, dtype=float)
        br = disc.branches(u)
        region = label_regions(br, opts.tol * float(np.max(np.abs(u))))
        eta2, eta1, flags = _solved_boundaries(region, grid.z, opts.boundary_mode)
        nt = region == NT
        slack = float(np.max(np.abs(br.pi[nt]))) if nt.any() else 0.0
        return cls(
            params=params, grid=grid, u=u, region=region, eta2=eta2, eta1=eta1,
            iters=kw.get("iters", 0),
            final_residual=float(np.max(np.abs(br.min))) / float(np.max(np.abs(u))),
            pi_cap_slack=slack, tol=opts.tol, branches=br,
            history=kw.get("history", []), flags=flags, boundary_mode=opts.boundary_mode,
        )


def label_regions(br: Branches, atol: float) -> np.ndarray:
    """Region per node: the active branch, ties broken NT > SR > BR."""
    m = br.min
    region = np.full(m.shape, BR, dtype=np.int8)
    region[br.S <= m + atol] = SR
    region[br.F <= m + atol] = NT
    return region


def boundaries_from_labels(region, z):
    """(eta2, eta1, flags) from per-node labels using cell midpoints."""
    region = np.asarray(region)
    z = np.asarray(z, dtype=float)
    flags = {}
    nt = np.flatnonzero(region == NT)
    h = z[1] - z[0]
    if nt.size == 0:
        flags["no_NT"] = True
        return float("nan"), float("nan"), flags
    first, last = nt[0], nt[-1]
    if first == 0 or not np.any(region[:first] == BR):
        flags["no_BR"] = True
        eta2 = float(z[0])
    else:
        eta2 = float(z[first] - 0.5 * h)
    if last == len(z) - 1 or not np.any(region[last + 1:] == SR):
        flags["no_SR"] = True
        eta1 = float(z[-1])
    else:
        eta1 = float(z[last] + 0.5 * h)
    flags["monotone"] = bool(
        np.all(region[:first] == BR) and np.all(region[first:last + 1] == NT)
        and np.all(region[last + 1:] == SR)
    )
    return eta2, eta1, flags


def _solved_boundaries(region, z, boundary_mode):
    eta2, eta1, flags = boundaries_from_labels(region, z)
    if boundary_mode == "obstacle-pinned" and region.size > 2:
        # the end rows are trade rows by construction, so a region made of
        # the end node alone says nothing about the continuum problem
        if region[0] == BR and not np.any(region[1:-1] == BR):
            flags["no_BR"] = True
            eta2 = float(z[0])
        if region[-1] == SR and not np.any(region[1:-1] == SR):
            flags["no_SR"] = True
            eta1 = float(z[-1])
    return eta2, eta1, flags


def extract_boundaries(sol: Solution) -> tuple[float, float]:
    """Buy and sell boundaries (eta2, eta1), each to within h/2.

    A region that consists of a pinned end node only is reported as missing
    (flag ``no_BR``/``no_SR``) with the boundary at the grid end.
    """
    eta2, eta1, flags = _solved_boundaries(np.asarray(sol.region), np.asarray(sol.z),
                                           sol.boundary_mode)
    sol.flags.update(flags)
    return eta2, eta1


class _Discretisation:
    def __init__(self, params: ModelParams, grid: hg.Grid, opts: SolveOptions):
        self.P = params
        self.grid = grid
        self.opts = opts
        z = grid.z
        self.z = z
        self.h = grid.h
        P = params
        self.ks = 1.0 / P.mu if P.mu > 0 else 1.0
        self.kb = 1.0 / P.lam if P.lam > 0 else 1.0
        # row k of a sell step links u_k to u_{k-1}; a buy step links u_k to u_{k+1}
        self.q_sell = np.ones_like(z)
        self.q_sell[1:] = hg.sell_step_ratio(z[:-1], z[1:], P)
        self.q_buy = np.ones_like(z)
        self.q_buy[:-1] = hg.buy_step_ratio(z[1:], z[:-1], P)
        self.w_sell = self.ks * (1.0 - P.mu * z) / self.h
        self.w_buy = self.kb * (1.0 - P.lam * (1.0 - z)) / self.h

    def derivatives(self, u):
        h = self.h
        du = np.empty_like(u)
        du[1:-1] = (u[2:] - u[:-2]) / (2 * h)
        du[0] = (u[1] - u[0]) / h
        du[-1] = (u[-1] - u[-2]) / h
        d2u = np.zeros_like(u)
        d2u[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / h**2
        d2u[0], d2u[-1] = d2u[1], d2u[-2]
        return du, d2u

    def controls(self, u, du, d2u):
        P, o, z = self.P, self.opts, self.z
        pi = hg.optimal_pi_node(z, u, du, d2u, P, o.pi_cap)
        d = hg.optimal_d_node(z, u, du, P, d_cap=o.d_cap)
        return np.asarray(pi, dtype=float), np.asarray(d, dtype=float)

    def branches(self, u) -> Branches:
        z, h = self.z, self.h
        du, d2u = self.derivatives(u)
        pi, d = self.controls(u, du, d2u)
        a, b, c0, f = hg.continuation_coeffs(z, pi, d, self.P)
        F = np.full_like(u, np.inf)
        fwd = (u[2:] - u[1:-1]) / h
        bwd = (u[1:-1] - u[:-2]) / h
        bi = b[1:-1]
        du_up = np.where(bi >= 0, fwd, bwd)
        F[1:-1] = c0[1:-1] * u[1:-1] - bi * du_up - a[1:-1] * d2u[1:-1] - f[1:-1]
        S = np.full_like(u, np.inf)
        S[1:] = self.w_sell[1:] * (u[1:] - self.q_sell[1:] * u[:-1])
        B = np.full_like(u, np.inf)
        B[:-1] = self.w_buy[:-1] * (u[:-1] - self.q_buy[:-1] * u[1:])
        return Branches(F=F, S=S, B=B, pi=pi, d=d, du=du, d2u=d2u)

    def assemble(self, policy, br: Branches):
        """Matrix in scipy's (2, 2)-banded layout, right-hand side, and the three diagonals."""
        z, h, n = self.z, self.h, self.z.size
        lower = np.zeros(n)
        diag = np.zeros(n)
        upper = np.zeros(n)
        rhs = np.zeros(n)

        cont = policy == NT
        a, b, c0, f = hg.continuation_coeffs(z, br.pi, br.d, self.P)
        bp = np.maximum(b, 0.0) / h
        bm = np.maximum(-b, 0.0) / h
        dd = a / h**2
        diag[cont] = (c0 + bp + bm + 2 * dd)[cont]
        lower[cont] = (-dd - bm)[cont]
        upper[cont] = (-dd - bp)[cont]
        rhs[cont] = f[cont]

        sell = policy == SR
        diag[sell] = self.w_sell[sell]
        lower[sell] = -(self.w_sell * self.q_sell)[sell]

        buy = policy == BR
        diag[buy] = self.w_buy[buy]
        upper[buy] = -(self.w_buy * self.q_buy)[buy]

        ab = np.zeros((5, n))
        ab[1, 1:] = upper[:-1]
        ab[2] = diag
        ab[3, :-1] = lower[1:]
        if self.opts.boundary_mode == "extrapolated":
            # zero curvature at both truncation points instead of a trade row
            ab[:, :3] = 0.0
            ab[:, -3:] = 0.0
            ab[1, 1:] = upper[:-1]
            ab[2] = diag
            ab[3, :-1] = lower[1:]
            ab[2, 0], ab[1, 1], ab[0, 2] = 1.0, -2.0, 1.0
            ab[2, -1], ab[3, -2], ab[4, -3] = 1.0, -2.0, 1.0
            rhs[0] = rhs[-1] = 0.0
            return ab, rhs, None
        return ab, rhs, (lower, diag, upper)

    def choose_policy(self, br: Branches) -> np.ndarray:
        stack = np.vstack([br.B, br.F, br.S])  # index == region code
        policy = np.argmin(stack, axis=0).astype(np.int8)
        # an adjacent sell/buy pair is a round trip through the same cell,
        # which is never optimal and makes the row pair singular for p < 0
        clash = np.flatnonzero((policy[1:] == SR) & (policy[:-1] == BR))
        for k in clash:
            for j in (k, k + 1):
                if 0 < j < policy.size - 1:
                    policy[j] = NT
        return policy


def is_m_matrix(ab: np.ndarray, bands) -> bool | None:
    """Z-matrix with positive diagonal and ``A^{-1} 1 > 0`` (nonsingular M-matrix).

    Returns None when the matrix is not tridiagonal (extrapolated ends).
    """
    if bands is None:
        return None
    lower, diag, upper = bands
    if np.any(diag <= 0) or np.any(lower > 0) or np.any(upper > 0):
        return False
    try:
        x = solve_banded((2, 2), ab, np.ones(diag.size))
    except np.linalg.LinAlgError:
        return False
    return bool(np.all(np.isfinite(x)) and np.all(x > 0))


def initial_guess(params: ModelParams, z: np.ndarray) -> np.ndarray:
    """Value of liquidating now and never trading the illiquid asset again."""
    P = params
    net = (1.0 - z) + (1.0 - P.mu) * np.maximum(z, 0.0) - np.maximum(-z, 0.0) / (1.0 - P.lam)
    return c_star_const(P) / P.p * net**P.p


def solve(params: ModelParams, grid: hg.Grid | None = None,
          opts: SolveOptions | None = None) -> Solution:
    """Solve the discrete HJB variational inequality by Howard iteration."""
    require_valid(params)
    grid = grid or hg.Grid.default(params)
    grid.check(params)
    opts = opts or SolveOptions()
    disc = _Discretisation(params, grid, opts)

    u = initial_guess(params, grid.z)
    omega = opts.damping
    history = []
    delta = np.inf
    for it in range(opts.max_iters + 1):
        br = disc.branches(u)
        scale = float(np.max(np.abs(u)))
        # extrapolated ends are fixed by the curvature condition, not by the VI
        vi = br.min[1:-1] if opts.boundary_mode == "extrapolated" else br.min
        res = float(np.max(np.abs(vi))) / scale
        if history:
            history[-1]["residual"] = res
        if delta <= opts.tol and res <= opts.tol:
            break
        if it == opts.max_iters:
            raise ConvergenceError(
                f"no convergence after {opts.max_iters} iterations "
                f"(update {delta:.2e}, residual {res:.2e})", history)
        policy = disc.choose_policy(br)
        ab, rhs, bands = disc.assemble(policy, br)
        m_ok = is_m_matrix(ab, bands) if opts.check_m_matrix else None
        u_new = solve_banded((2, 2), ab, rhs)
        u_next = (1.0 - omega) * u + omega * u_new
        delta = float(np.max(np.abs(u_next - u))) / float(np.max(np.abs(u_next)))
        history.append({"iter": it, "update": delta, "m_matrix": m_ok, "damping": omega})
        if (omega == 1.0 and len(history) >= 6
                and all(history[-j]["update"] > history[-j - 1]["update"] for j in (1, 2))):
            log.info("oscillation detected at iteration %d, damping 0.5", it)
            omega = 0.5
        u = u_next
        log.debug("iter %d update %.3e residual %.3e", it, delta, res)

    sol = Solution.from_values(params, grid, u, opts, iters=len(history), history=history)
    sol.final_residual = res
    _check_concavity(sol)
    return sol


def _check_concavity(sol: Solution) -> None:
    u = sol.u
    sec = u[2:] - 2 * u[1:-1] + u[:-2]
    bad = np.flatnonzero(sec > sol.tol * sol.scale) + 1
    sol.flags["concave"] = bad.size == 0
    if bad.size:
        raise NonConcaveError(f"value not concave at {bad.size} nodes", bad)


@dataclass
class ComplementarityReport:
    worst: dict
    flagged: np.ndarray
    multi_active: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.flagged.size == 0 and all(v <= self.tol for v in self.worst.values())


def verify_complementarity(sol: Solution, params: ModelParams | None = None,
                           tol: float | None = None) -> ComplementarityReport:
    """Per-region check of the discrete complementarity conditions.

    NT: |F| <= tol and both trade residuals strictly positive; SR: |S| <= tol
    and F >= -tol; BR: |B| <= tol and F >= -tol.  All values are relative to
    max|u|.  ``worst`` holds the largest violation per region.
    """
    params = params or sol.params
    tol = sol.tol if tol is None else tol
    disc = _Discretisation(params, sol.grid, SolveOptions(tol=sol.tol))
    br = disc.branches(sol.u)
    sc = sol.scale
    F, S, B = br.F / sc, br.S / sc, br.B / sc
    viol = np.zeros_like(F)
    reg = sol.region
    nt, sr, bz = reg == NT, reg == SR, reg == BR
    viol[nt] = np.maximum.reduce([np.abs(F[nt]),
                                  np.where(S[nt] > 0, 0.0, np.abs(S[nt]) + tol),
                                  np.where(B[nt] > 0, 0.0, np.abs(B[nt]) + tol)])
    viol[sr] = np.maximum(np.abs(S[sr]), np.maximum(-F[sr], 0.0))
    viol[bz] = np.maximum(np.abs(B[bz]), np.maximum(-F[bz], 0.0))
    worst = {}
    for name, mask in (("NT", nt), ("SR", sr), ("BR", bz)):
        worst[name] = float(viol[mask].max()) if mask.any() else 0.0
    active = (np.abs(F) <= tol).astype(int) + (np.abs(S) <= tol) + (np.abs(B) <= tol)
    return ComplementarityReport(
        worst=worst,
        flagged=np.flatnonzero(viol > tol),
        multi_active=int(np.sum(active != 1)),
        tol=tol,
    )


@dataclass(frozen=True)
class WedgeFit:
    a: float | None
    b: float | None
    err_sell: float | None
    err_buy: float | None


def wedge_constants(sol: Solution) -> WedgeFit:
    """Least-squares constants of ``a/p (1-mu z)^p`` on SR and ``b/p ((1-lam(1-z))/(1-lam))^p`` on BR."""
    P = sol.params
    z, u = sol.z, sol.u

    def fit(mask, g):
        if not mask.any():
            return None, None
        gm, um = g[mask], u[mask]
        c = float(np.dot(gm, um) / np.dot(gm, gm))
        return c, float(np.max(np.abs(um - c * gm) / np.abs(c * gm)))

    a, ea = fit(sol.region == SR, (1.0 - P.mu * z) ** P.p / P.p)
    b, eb = fit(sol.region == BR, ((1.0 - P.lam * (1.0 - z)) / (1.0 - P.lam)) ** P.p / P.p)
    return WedgeFit(a=a, b=b, err_sell=ea, err_buy=eb)
