"""
Monte Carlo evaluation of a feedback policy on the controlled wealth pair.

Euler-Maruyama steps for the liquid and illiquid accounts with consumption
and pi frozen over each step, followed by a projection back onto the
no-trade wedge along the trade directions (a discrete Skorokhod map).
Random numbers come from a counter-based hash keyed by (seed, path, step),
so a path's draws do not depend on how paths are scheduled.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .model import ModelParams
from .policy import Position, PolicyField, value

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO53 = 1.0 / 9007199254740992.0

POLICIES = ("optimal", "static")


@nb.njit(cache=True, inline="always", error_model="numpy")
def _mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always", error_model="numpy")
def _uniform(key, ctr):
    # open interval (0, 1)
    return (float(np.int64(_mix64(key + ctr * _GOLDEN) >> _S11)) + 0.5) * _TWO53


@nb.njit(cache=True)
def _path_key(seed, path):
    return _mix64(np.uint64(seed) ^ _mix64(np.uint64(path) + _GOLDEN))


@nb.njit(cache=True, error_model="numpy")
def _draw(keys, k, v1, v2, s):
    """Accepted polar-method candidates for step k of every path group.

    The counter is (step << 8) + attempt, so draws depend only on the
    group key and the step index.  The first attempt is computed for all
    groups in a branch-free pass; rejected groups are redrawn afterwards.
    """
    base = np.uint64(k) << np.uint64(8)
    one = np.uint64(1)
    two = np.uint64(2)
    three = np.uint64(3)
    n = keys.size
    for g in range(n):
        key = keys[g]
        a = 2.0 * _uniform(key, base) - 1.0
        b = 2.0 * _uniform(key, base + one) - 1.0
        c = 2.0 * _uniform(key, base + two) - 1.0
        d = 2.0 * _uniform(key, base + three) - 1.0
        q0 = a * a + b * b
        q1 = c * c + d * d
        ok = q0 < 1.0 and q0 > 0.0
        v1[g] = a if ok else c
        v2[g] = b if ok else d
        s[g] = q0 if ok else q1
    for g in range(n):
        q = s[g]
        if 0.0 < q < 1.0:
            continue
        ctr = base + two
        while not 0.0 < q < 1.0:
            ctr += two
            a = 2.0 * _uniform(keys[g], ctr) - 1.0
            b = 2.0 * _uniform(keys[g], ctr + one) - 1.0
            q = a * a + b * b
        v1[g] = a
        v2[g] = b
        s[g] = q


@nb.njit(cache=True)
def _keys(seed, first, n):
    out = np.empty(n, dtype=np.uint64)
    for g in range(n):
        out[g] = _path_key(seed, first + g)
    return out


@nb.njit(cache=True, inline="always", error_model="numpy")
def _euler(x, y, pi, c, r, a1, a2, s1, s2, dw1, dw2, dt):
    xn = x + ((r + a1 * pi) * x - c) * dt + s1 * pi * x * dw1
    yn = y + (r + a2) * y * dt + s2 * y * dw2
    return xn, yn


@nb.njit(cache=True, inline="always", error_model="numpy")
def _project(x, y, eta2, eta1, lam, mu):
    """Move (x, y) back onto the wedge; returns x, y, dL (bought), dM (sold)."""
    w = x + y
    if w <= 0.0:
        return x, y, 0.0, 0.0
    z = y / w
    if z > eta1:
        dm = (y - eta1 * w) / (1.0 - mu * eta1)
        return x + (1.0 - mu) * dm, y - dm, 0.0, dm
    if z < eta2:
        dl = (eta2 * w - y) / (1.0 - lam * (1.0 - eta2))
        return x - dl, y + (1.0 - lam) * dl, dl, 0.0
    return x, y, 0.0, 0.0


@nb.njit(cache=True, inline="always", error_model="numpy")
def _cell(m, z0, inv_h, z):
    """Interpolation cell and weight on a uniform table of m + 1 nodes."""
    s = (z - z0) * inv_h
    if s <= 0.0:
        return 0, 0.0
    if s >= m:
        return m - 1, 1.0
    k = int(s)
    return k, s - k


@nb.njit(cache=True, error_model="numpy")
def _advance(x, y, w, wp, acc, lt, mt, lo, hi, dead, v1, v2, fac, group, ns, disc_dt,
             cf, tab, sc2, reflect):
    """One step for every state of a block.

    States are laid out as (path group, antithetic sign, consumption scale)
    in C order.  ``wp`` holds ``w^p`` for the current wealth; ``tab`` has
    columns pi, d and the utility factor g on the NT nodes.
    """
    r, a1, a2, s1, s2, rho, lam, mu, eta2, eta1, z0, inv_h, p, dt = cf
    rc = math.sqrt(1.0 - rho * rho)
    sdt = math.sqrt(dt)
    m = tab.shape[0] - 1
    q = -1
    for g in range(v1.size):
        e1 = v1[g] * fac[g]
        e2 = v2[g] * fac[g]
        b1 = e1 * sdt
        b2 = (rho * e1 + rc * e2) * sdt
        for a in range(group):
            dw1 = b1 if a == 0 else -b1
            dw2 = b2 if a == 0 else -b2
            for j in range(ns):
                q += 1
                if dead[q]:
                    continue
                xq = x[q]
                yq = y[q]
                wq = w[q]
                if reflect:
                    k, f = _cell(m, z0, inv_h, yq / wq)
                    pi = tab[k, 0] + f * (tab[k + 1, 0] - tab[k, 0])
                    c = sc2[0, j] * (tab[k, 1] + f * (tab[k + 1, 1] - tab[k, 1])) * wq
                    acc[q] += disc_dt * sc2[1, j] * (tab[k, 2] + f * (tab[k + 1, 2] - tab[k, 2])) * wp[q]
                else:
                    pi = 0.0
                    c = 0.0
                    if p < 0.0:
                        acc[q] = -np.inf
                        dead[q] = True
                        continue
                xq, yq = _euler(xq, yq, pi, c, r, a1, a2, s1, s2, dw1, dw2, dt)
                if reflect:
                    xq, yq, dl, dm = _project(xq, yq, eta2, eta1, lam, mu)
                    lt[q] += dl
                    mt[q] += dm
                wq = xq + yq
                if xq <= 0.0 or wq <= 0.0:
                    dead[q] = True
                    w[q] = 1.0
                    if p < 0.0:
                        acc[q] = -np.inf
                    continue
                z = yq / wq
                lo[q] = min(lo[q], z)
                hi[q] = max(hi[q], z)
                x[q] = xq
                y[q] = yq
                w[q] = wq


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    T: float = 200.0
    n_paths: int = 100_000
    master_seed: int = 20240601
    start: Position = Position(0.5, 0.5)
    projection_mode: str = "z-projection"
    antithetic: bool = True
    consumption_scale: float = 1.0
    policy: str = "optimal"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T >= self.dt:
            raise ValueError("T must be at least dt")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.projection_mode != "z-projection":
            raise ValueError(f"unknown projection_mode {self.projection_mode!r}")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if not self.consumption_scale > 0:
            raise ValueError("consumption_scale must be positive")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must fit in 64 bits")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


@dataclass
class SimResult:
    estimate: float
    std_error: float
    n_paths: int
    truncation_bound: float
    bankrupt_paths: int
    discount_at_T: float
    consumption_scale: float = 1.0
    policy: str = "optimal"
    L_total: float = 0.0
    M_total: float = 0.0
    z_range: tuple = (float("nan"), float("nan"))
    samples: np.ndarray | None = field(default=None, repr=False)
    complete: bool = True
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        se = self.std_error if np.isfinite(self.std_error) else None
        return {
            "estimate": self.estimate,
            "std_error": se,
            "n_paths": self.n_paths,
            "truncation_bound": self.truncation_bound,
            "bankrupt_paths": self.bankrupt_paths,
            "discount_at_T": self.discount_at_T,
            "consumption_scale": self.consumption_scale,
            "policy": self.policy,
            "L_total_mean": self.L_total,
            "M_total_mean": self.M_total,
            "z_min": self.z_range[0],
            "z_max": self.z_range[1],
            "complete": self.complete,
        }


def step(state: Position, pi: float, c: float, params: ModelParams, dW1: float, dW2: float,
         dt: float, eta2: float, eta1: float):
    """One Euler step with frozen controls, then projection onto the wedge.

    Returns the new position and the purchase/sale amounts (dL, dM) of the
    projection.
    """
    P = params
    x, y = _euler(state.x, state.y, pi, c, P.r, P.a1 if P.liquid_asset else 0.0, P.alpha2,
                  P.sigma1 if P.liquid_asset else 0.0, P.sigma2, dW1, dW2, dt)
    x, y, dl, dm = _project(x, y, eta2, eta1, P.lam, P.mu)
    return Position(x, y), dl, dm


def _tables(fld: PolicyField):
    z = fld.z_nt
    inv_h = 1.0 / fld.h if z.size > 1 else 0.0
    P = fld.params
    d = fld.c_ratio_nt
    g = d ** (P.theta * P.p) * (1.0 - z) ** ((1.0 - P.theta) * P.p)
    return float(z[0]), inv_h, np.ascontiguousarray(np.column_stack([fld.pi_nt, d, g]))


def _run_block(seed, first, n_groups, group, sc2, start, cf, tab, n_steps, beta, dt, reflect,
               stride=1):
    ns = sc2.shape[1]
    p = cf[12]
    n_st = n_groups * group * ns
    keys = _keys(np.uint64(seed), np.uint64(first), n_groups)
    x = np.full(n_st, start.x)
    y = np.full(n_st, start.y)
    w = x + y
    wp = np.empty(n_st)
    acc = np.zeros(n_st)
    lt = np.zeros(n_st)
    mt = np.zeros(n_st)
    lo = np.full(n_st, np.inf)
    hi = np.full(n_st, -np.inf)
    dead = np.zeros(n_st, dtype=np.bool_)
    v1 = np.empty(n_groups)
    v2 = np.empty(n_groups)
    s = np.empty(n_groups)
    fac = np.empty(n_groups)
    decay = math.exp(-beta * dt)
    disc_dt = dt / p
    if stride > 1:
        e1 = np.empty(n_groups)
        e2 = np.empty(n_groups)
        ones = np.ones(n_groups)
        root = math.sqrt(stride)
    for k in range(n_steps):
        if stride == 1:
            _draw(keys, k, v1, v2, s)
            # vectorised transcendentals: polar factor and W^p
            np.log(s, out=fac)
            fac *= -2.0
            fac /= s
            np.sqrt(fac, out=fac)
            n1, n2, nf = v1, v2, fac
        else:
            # sum of `stride` fine-level increments: same Brownian path as a run with dt / stride
            e1[:] = 0.0
            e2[:] = 0.0
            for j in range(stride):
                _draw(keys, k * stride + j, v1, v2, s)
                np.log(s, out=fac)
                fac *= -2.0
                fac /= s
                np.sqrt(fac, out=fac)
                e1 += v1 * fac
                e2 += v2 * fac
            e1 /= root
            e2 /= root
            n1, n2, nf = e1, e2, ones
        np.log(w, out=wp)
        wp *= p
        np.exp(wp, out=wp)
        _advance(x, y, w, wp, acc, lt, mt, lo, hi, dead, n1, n2, nf, group, ns, disc_dt,
                 cf, tab, sc2, reflect)
        disc_dt *= decay
    wT = np.where(dead, 0.0, w**p)
    shape = (n_groups * group, ns)
    return tuple(a.reshape(shape).T for a in (acc, wT, lt, mt, dead, lo, hi))


def simulate_scales(fld: PolicyField, params: ModelParams, cfg: SimConfig, scales,
                    block: int = 4096, time_budget: float | None = None,
                    stride: int = 1) -> list[SimResult]:
    """Run several consumption scales on common random numbers.

    Paths are processed in blocks of ``block`` path groups (a group is an
    antithetic pair); results do not depend on the block size.  With a
    ``time_budget`` in seconds, no new block is started once the budget is
    spent and the results cover the completed paths only
    (``complete=False``).  ``stride > 1`` builds every increment from that
    many fine-level draws, so a run with ``dt`` and ``stride=2`` follows the
    same Brownian paths as a run with ``dt / 2`` and ``stride=1``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t0 = time.perf_counter()
    P = params
    start = cfg.start
    if cfg.policy == "optimal":
        from .policy import Region, classify, initial_jump
        if classify(start, fld) != Region.NT:
            start = initial_jump(start, fld, P)
            if classify(start, fld) == Region.SR:
                start = initial_jump(start, fld, P)
    if not start.x > 0 or not start.total > 0:
        raise ValueError("simulation start needs x > 0 and x + y > 0")
    z0, inv_h, tab = _tables(fld)
    group = 2 if (cfg.antithetic and cfg.n_paths % 2 == 0) else 1
    n_groups = cfg.n_paths // group
    scales = np.asarray(scales, dtype=float)
    sc2 = np.ascontiguousarray(np.vstack([scales, scales ** (P.theta * P.p)]))
    s1 = P.sigma1 if P.liquid_asset else 0.0
    cf = (P.r, P.a1, P.alpha2, s1, P.sigma2, P.rho, P.lam, P.mu, fld.eta2, fld.eta1,
          z0, inv_h, P.p, cfg.dt)
    parts = []
    done = 0
    for first in range(0, n_groups, block):
        if time_budget is not None and parts and time.perf_counter() - t0 > time_budget:
            break
        m = min(block, n_groups - first)
        done += m
        parts.append(_run_block(cfg.master_seed, first, m, group, sc2, start, cf,
                                tab, cfg.n_steps, P.beta, cfg.dt,
                                cfg.policy == "optimal", stride))
    util, wT, L, M, bust, zmin, zmax = (np.concatenate(col, axis=1) for col in zip(*parts))
    complete = done == n_groups
    n_groups = done
    elapsed = time.perf_counter() - t0
    disc_T = float(np.exp(-P.beta * cfg.n_steps * cfg.dt))
    u_sup = float(np.max(np.abs(fld.u_nt)))
    out = []
    for j, sc in enumerate(scales):
        per = util[j].reshape(n_groups, group).mean(axis=1)
        est = float(per.mean())
        if n_groups > 1 and np.isfinite(est):
            se = float(per.std(ddof=1) / np.sqrt(n_groups))
        else:
            se = float("nan")
        out.append(SimResult(
            estimate=est, std_error=se, n_paths=n_groups * group,
            truncation_bound=disc_T * u_sup * float(np.mean(wT[j])),
            bankrupt_paths=int(bust[j].sum()), discount_at_T=disc_T,
            consumption_scale=float(sc), policy=cfg.policy,
            L_total=float(L[j].mean()), M_total=float(M[j].mean()),
            z_range=(float(zmin[j].min()), float(zmax[j].max())),
            samples=per, complete=complete, elapsed=elapsed,
        ))
    return out


def simulate(fld: PolicyField, params: ModelParams, cfg: SimConfig) -> SimResult:
    """Expected discounted utility of the feedback policy from ``cfg.start``.

    Starts outside the no-trade wedge are first moved onto it by the
    time-zero trade.  Discounted utility is integrated with the left-point
    rule up to ``cfg.T``; the tail beyond T is bounded by
    ``e^{-beta T} sup|u| E[(X_T + Y_T)^p]``.
    """
    return simulate_scales(fld, params, cfg, [cfg.consumption_scale])[0]


@dataclass(frozen=True)
class ConsistencyReport:
    estimate: float
    value: float
    rel_gap: float
    std_error: float
    truncation_bound: float
    allowed: float
    verdict: str

    def to_dict(self) -> dict:
        return {k: (v if not (isinstance(v, float) and not np.isfinite(v)) else None)
                for k, v in self.__dict__.items()}


def compare_to_solution(result: SimResult, fld: PolicyField, start: Position,
                        n_sigma: float = 3.0) -> ConsistencyReport:
    """Check ``|estimate - v(start)| <= n_sigma * se + truncation bound``."""
    v = value(start, fld)
    gap = result.estimate - v
    se = result.std_error
    allowed = n_sigma * (se if np.isfinite(se) else np.inf) + result.truncation_bound
    if not np.isfinite(result.estimate):
        verdict = "invalid"
    elif not np.isfinite(se):
        verdict = "undetermined"
    else:
        verdict = "consistent" if abs(gap) <= allowed else "inconsistent"
    return ConsistencyReport(
        estimate=result.estimate, value=v, rel_gap=gap / abs(v), std_error=se,
        truncation_bound=result.truncation_bound, allowed=allowed, verdict=verdict)
