"""
Model parameters and the closed-form quantities used as oracles.

The market has a bond, a liquid risky asset (drift r + alpha1, volatility
sigma1) and an illiquid risky asset (drift r + alpha2, volatility sigma2)
traded at proportional costs lam (purchases) and mu (sales).  Preferences
are Cobb-Douglas over consumption and liquid wealth,

    U(c, x) = (c**theta * x**(1 - theta))**p / p.

All rates are per year.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq


class InvalidParamsError(ValueError):
    """Raised by constructors that refuse parameters failing validation."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        failed = ", ".join(c.name for c in report.checks if not c.passed)
        super().__init__(f"invalid model parameters: {failed}")


@dataclass(frozen=True)
class ModelParams:
    r: float = 0.07
    alpha1: float = 0.04
    alpha2: float = 0.08
    sigma1: float = 0.30
    sigma2: float = 0.35
    rho: float = 0.4
    lam: float = 0.2
    mu: float = 0.2
    beta: float = 0.1
    p: float = 0.3
    theta: float = 0.8
    # False drops the liquid risky asset: pi is pinned at 0 and alpha1/sigma1
    # are ignored everywhere.
    liquid_asset: bool = True

    @property
    def a1(self) -> float:
        """Effective liquid excess drift (0 without the liquid risky asset)."""
        return self.alpha1 if self.liquid_asset else 0.0

    @property
    def baseline_mode(self) -> bool:
        """True for theta == 1, i.e. no liquidity preference."""
        return self.theta == 1.0

    @property
    def z_min(self) -> float:
        """Left end of the admissible z-interval (-inf when lam == 0)."""
        return -(1.0 - self.lam) / self.lam if self.lam > 0 else -np.inf

    def with_(self, **kw) -> "ModelParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    slack: float = float("nan")


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[Check, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def merton_rate(params: ModelParams) -> float:
    """beta - r p - p alpha1^2 / (2 (1-p) sigma1^2), the bracket in C*."""
    p = params.p
    out = params.beta - params.r * p
    if params.liquid_asset:
        out -= p * params.alpha1**2 / (2.0 * (1.0 - p) * params.sigma1**2)
    return out


def _sharpe_sq(params: ModelParams) -> float:
    """alpha' Sigma^{-1} alpha over the risky assets that are present."""
    a1, a2 = params.alpha1, params.alpha2
    s1, s2, rho = params.sigma1, params.sigma2, params.rho
    if not params.liquid_asset:
        return a2**2 / s2**2
    num = a1**2 * s2**2 + a2**2 * s1**2 - 2.0 * rho * a1 * a2 * s1 * s2
    return num / ((1.0 - rho**2) * s1**2 * s2**2)


def validate(params: ModelParams) -> ValidationReport:
    """Check every parameter invariant; assumption checks carry numeric slack.

    The two finiteness assumptions are reported as ``lhs - rhs`` so callers
    can assert margins, not just signs.
    """
    P = params
    checks = []

    def add(name, passed, slack=float("nan")):
        checks.append(Check(name, bool(passed), float(slack)))

    if P.liquid_asset:
        add("sigma1>0", P.sigma1 > 0, P.sigma1)
        add("alpha1>0", P.alpha1 > 0, P.alpha1)
    add("sigma2>0", P.sigma2 > 0, P.sigma2)
    add("alpha2>0", P.alpha2 > 0, P.alpha2)
    add("beta>0", P.beta > 0, P.beta)
    add("rho in (-1,1)", -1.0 < P.rho < 1.0, 1.0 - abs(P.rho))
    add("lam in [0,1)", 0.0 <= P.lam < 1.0)
    add("mu in [0,1)", 0.0 <= P.mu < 1.0)
    add("p<1, p!=0", P.p < 1.0 and P.p != 0.0, 1.0 - P.p)
    add("theta in (0,1]", 0.0 < P.theta <= 1.0)

    if not checks[-2].passed:
        # the assumption formulas divide by (1 - p)
        add("assumption_1", False)
        add("assumption_2", False)
        return ValidationReport(tuple(checks))

    p = P.p
    lhs = P.beta - P.r * p
    if P.liquid_asset and P.sigma1 > 0:
        rhs1 = p * P.alpha1**2 / (2.0 * (1.0 - p) * P.sigma1**2)
    else:
        rhs1 = 0.0
    add("assumption_1", lhs - rhs1 > 0, lhs - rhs1)

    if P.sigma2 > 0 and abs(P.rho) < 1 and (P.sigma1 > 0 or not P.liquid_asset):
        rhs2 = p * _sharpe_sq(P) / (2.0 * (1.0 - p))
        add("assumption_2", lhs - rhs2 > 0, lhs - rhs2)
    else:
        add("assumption_2", False)
    return ValidationReport(tuple(checks))


def require_valid(params: ModelParams) -> None:
    report = validate(params)
    if not report.ok:
        raise InvalidParamsError(report)


def utility(c, x, params: ModelParams):
    """Cobb-Douglas CRRA utility ``(c^theta x^(1-theta))^p / p``.

    For ``p < 0`` a zero argument gives ``-inf`` (numpy semantics); scalar
    calls raise instead so the caller has to decide what to do.
    """
    p, th = params.p, params.theta
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(c < 0) or np.any(x < 0):
        raise ValueError("utility needs c >= 0 and x >= 0")
    if p < 0 and c.ndim == 0 and x.ndim == 0 and (c == 0 or (th < 1 and x == 0)):
        raise ValueError("utility is -inf at the boundary for p < 0")
    with np.errstate(divide="ignore"):
        base = c**th * x ** (1.0 - th)
        out = base**p / p
    return out if out.ndim else float(out)


def c_star_const(params: ModelParams) -> float:
    """Constant of the liquidate-now lower bound ``v >= C*/p (net wealth)^p``."""
    tp = params.theta * params.p
    bracket = merton_rate(params)
    return (1.0 - tp) ** (1.0 - tp) * params.theta**tp * bracket ** (tp - 1.0)


def _exponent(params: ModelParams) -> float:
    th, p = params.theta, params.p
    return (1.0 - th) * p / (1.0 - th * p)


def _g1(params: ModelParams) -> float:
    return merton_rate(params) / params.p


def _wedge_bracket(t, A, params: ModelParams):
    # exact value of Lbar(phi) / (A * wealth^p) in terms of s = t/(1+t)
    P = params
    p, th = P.p, P.theta
    t = np.asarray(t, dtype=float)
    a1 = P.a1
    s1 = P.sigma1 if P.liquid_asset else 1.0
    lead = (a1 / ((1.0 - p) * s1) * (1.0 + t) - P.rho * P.sigma2 * t * (1.0 if P.liquid_asset else 0.0)) / (1.0 + t)
    s = t / (1.0 + t)
    tp = th * p
    cons = (1.0 - tp) / p * th ** (tp / (1.0 - tp)) * A ** (-1.0 / (1.0 - tp))
    return (
        (P.beta - P.r * p) / p
        - 0.5 * (1.0 - p) * lead**2
        - P.alpha2 * s
        + 0.5 * P.sigma2**2 * (1.0 - p) * s**2
        - cons * (1.0 + t) ** (-_exponent(P))
    )


def wedge_f(t, params: ModelParams, A: float | None = None):
    """Sell-wedge test function at ``t = (1-mu) y / x``.

    Without ``A`` this is the lower bound f(t) obtained by replacing A by C*
    and minimising the quadratic in t/(1+t); it is independent of A and its
    sign decides whether ``A/p (x + (1-mu) y)^p`` is a supersolution near the
    x = 0 axis.  With ``A`` the un-bounded bracket is returned instead.
    """
    if A is not None:
        return _wedge_bracket(t, A, params)
    P = params
    t = np.asarray(t, dtype=float)
    e = _exponent(P)
    if P.liquid_asset:
        c = (P.rho * P.alpha1 * P.sigma2 - P.alpha2 * P.sigma1) ** 2 / (
            2.0 * (1.0 - P.rho**2) * (1.0 - P.p) * P.sigma1**2 * P.sigma2**2
        )
    else:
        c = P.alpha2**2 / (2.0 * (1.0 - P.p) * P.sigma2**2)
    out = _g1(P) * (1.0 - (1.0 + t) ** (-e)) - c
    return out if out.ndim else float(out)


def wedge_g(t, params: ModelParams, B: float | None = None):
    """Buy-wedge test function at ``t = y / ((1-lam) x)``, ``t in (-1, 0)``.

    Returns g(t), i.e. the bracket scaled by ``(1+t)^2``.  Passing ``B``
    gives the exact (un-bounded) bracket times ``(1+t)^2``.
    """
    P = params
    t = np.asarray(t, dtype=float)
    if B is not None:
        out = (1.0 + t) ** 2 * _wedge_bracket(t, B, P)
        return out if out.ndim else float(out)
    e = _exponent(P)
    k = (P.rho * P.alpha1 * P.sigma2 / P.sigma1) if P.liquid_asset else 0.0
    rho2 = P.rho**2 if P.liquid_asset else 0.0
    out = (
        _g1(P) * ((1.0 + t) ** 2 - (1.0 + t) ** (2.0 - e))
        + 0.5 * (1.0 - rho2) * (1.0 - P.p) * P.sigma2**2 * t**2
        + (k - P.alpha2) * t * (1.0 + t)
    )
    return out if out.ndim else float(out)


def sell_wedge_delta(params: ModelParams, t_max: float = 1e12) -> float | None:
    """Largest delta1 with f >= 0 on ``x/y < delta1``, or None if f < 0 throughout.

    f is increasing in t for 0 < p < 1, theta < 1, so the root of f gives
    the threshold ``t* = (1-mu)/delta1``.
    """
    f = lambda t: wedge_f(t, params)
    if f(t_max) < 0:
        return None
    if f(1e-12) >= 0:
        return np.inf
    t_star = brentq(f, 1e-12, t_max, xtol=1e-14, rtol=1e-12)
    return (1.0 - params.mu) / t_star


def frictionless_weights(params: ModelParams) -> tuple[float, float]:
    """Total-wealth fractions (w1, w2) of the zero-cost two-asset problem."""
    P = params
    if not P.liquid_asset:
        return 0.0, P.alpha2 / ((1.0 - P.p) * P.sigma2**2)
    cov = np.array(
        [
            [P.sigma1**2, P.rho * P.sigma1 * P.sigma2],
            [P.rho * P.sigma1 * P.sigma2, P.sigma2**2],
        ]
    )
    w = np.linalg.solve(cov, np.array([P.alpha1, P.alpha2]) / (1.0 - P.p))
    return float(w[0]), float(w[1])


@dataclass(frozen=True)
class MertonBaseline:
    c_star_const: float
    merton_pi1: float
    frictionless_weights: tuple[float, float]
    frictionless_c_ratio: float


def merton_baseline(params: ModelParams) -> MertonBaseline:
    """Closed-form benchmarks; the consumption ratio is the theta = 1 one."""
    P = params
    pi1 = P.a1 / ((1.0 - P.p) * P.sigma1**2) if P.liquid_asset else 0.0
    c_ratio = (P.beta - P.r * P.p - P.p * _sharpe_sq(P) / (2.0 * (1.0 - P.p))) / (1.0 - P.p)
    return MertonBaseline(
        c_star_const=c_star_const(P),
        merton_pi1=pi1,
        frictionless_weights=frictionless_weights(P),
        frictionless_c_ratio=c_ratio,
    )


SCENARIOS = {
    1: dict(alpha1=0.04, sigma1=0.30, alpha2=0.08, sigma2=0.35),
    2: dict(alpha1=0.04, sigma1=0.30, alpha2=0.08, sigma2=0.35, liquid_asset=False),
    3: dict(alpha1=0.04, sigma1=0.30, alpha2=0.13, sigma2=0.35),
    4: dict(alpha1=0.04, sigma1=0.30, alpha2=0.08, sigma2=0.50),
}


def scenario(number: int, p: float = 0.3, theta: float = 0.8, **overrides) -> ModelParams:
    """Numerical-study parameter set: beta=0.1, r=7%, rho=0.4, lam=mu=0.2."""
    kw = dict(SCENARIOS[number])
    kw.update(p=p, theta=theta)
    kw.update(overrides)
    return ModelParams(**kw)
