"""Transportation-style sample-complexity lower bounds for the hard bandit.

The numeric program minimizes the total allocation sum_z t_z subject to
sum_v t_v KL(nu_{theta*,v} || nu_{theta,v}) >= log(1/(2.4 delta)) for each
alternative theta kept so far, plus the low-regret budget constraint
sum_i t_{e_i} <= zeta sum_z t_z on the costly arms e_2..e_d.  Alternatives
come from the family theta_z(eps, lambda) evaluated at the current normalized
allocation.  Keeping
only finitely many alternatives relaxes the constraint set, so every LP value
is a valid lower bound; adding alternatives can only raise it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.special import xlogy
from scipy.stats import t as student_t

from .instances import HardBandit

SERIES_CUTOFF = 1e-3


def _x_minus_log1p(x: np.ndarray) -> np.ndarray:
    """x - log(1 + x), accurate for small |x|."""
    x = np.asarray(x, float)
    small = np.abs(x) < SERIES_CUTOFF
    xs = np.where(small, x, 0.0)
    series = xs**2 / 2 - xs**3 / 3 + xs**4 / 4 - xs**5 / 5 + xs**6 / 6
    with np.errstate(divide="ignore", invalid="ignore"):
        direct = x - np.log1p(np.where(small, 0.0, x))
    return np.where(small, series, direct)


def bernoulli_kl(p, q):
    """KL(Bernoulli(p) || Bernoulli(q)), stable when p and q are close."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if np.any((p < 0) | (p > 1)) or np.any((q <= 0) | (q >= 1)):
        raise ValueError("need p in [0, 1] and q in (0, 1)")
    u = (p - q) / q
    v = (q - p) / (1 - q)
    near = (np.abs(u) < SERIES_CUTOFF) & (np.abs(v) < SERIES_CUTOFF)
    # close to the diagonal: p log(1+u) + (1-p) log(1+v) with the quadratic term split out
    series = (p - q) ** 2 / (q * (1 - q)) - p * _x_minus_log1p(np.where(near, u, 0.0)) \
        - (1 - p) * _x_minus_log1p(np.where(near, v, 0.0))
    direct = xlogy(p, p) - xlogy(p, q) + xlogy(1 - p, 1 - p) - xlogy(1 - p, 1 - q)
    out = np.where(near, series, direct)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def log_term(delta: float) -> float:
    return math.log(1 / (2.4 * delta))


def closed_form_bound(d: int, Delta: float, delta: float) -> float:
    """(d - 1) / (48 Delta^2) * log(1 / (2.4 delta))."""
    if Delta <= 0 or not 0 < delta < 1 / 2.4:
        raise ValueError("need Delta > 0 and 0 < delta < 1/2.4")
    return (d - 1) / (48 * Delta**2) * log_term(delta)


# --------------------------------------------------------------------------
# numeric program
# --------------------------------------------------------------------------


def regularizer(bandit: HardBandit) -> np.ndarray:
    """diag([xi^2, gamma^2/d, ..., gamma^2/d])."""
    p = bandit.params
    return np.diag([p.xi**2] + [p.gamma**2 / p.d] * (p.d - 1))


def alternatives(bandit: HardBandit, lam: np.ndarray, eps: float) -> np.ndarray:
    """theta_z(eps, lam) for every suboptimal arm z, one per row.

    theta* - (y^T theta* + eps) A^{-1} y / (y^T A^{-1} y) with y = z* - z and
    A = sum_z lam_z z z^T + diag regularizer.
    """
    Z, th = bandit.Z, bandit.theta_star
    best = int(np.argmax(Z @ th))
    A = (Z.T * lam) @ Z + regularizer(bandit)
    out = []
    for j in range(len(Z)):
        if j == best:
            continue
        y = Z[best] - Z[j]
        Ay = np.linalg.solve(A, y)
        out.append(th - (y @ th + eps) * Ay / (y @ Ay))
    return np.array(out)


def kl_matrix(bandit: HardBandit, thetas: np.ndarray) -> np.ndarray:
    """K[j, v] = KL(nu_{theta*, v} || nu_{theta_j, v})."""
    p = bandit.Z @ bandit.theta_star + 0.5
    q = thetas @ bandit.Z.T + 0.5
    return bernoulli_kl(np.broadcast_to(p, q.shape), q)


def in_alternative_set(bandit: HardBandit, theta: np.ndarray) -> bool:
    """True when arm 0 is strictly beaten and every mean stays inside (0, 1)."""
    vals = bandit.Z @ theta
    best = int(np.argmax(bandit.Z @ bandit.theta_star))
    means = vals + 0.5
    return bool(vals.max() > vals[best] and means.min() > 0 and means.max() < 1)


def constrained_mask(bandit: HardBandit, arms: str = "e") -> np.ndarray:
    """Arms whose share the regret budget limits: ``"e"`` for e_2..e_d, ``"x"`` for x_2..x_d."""
    d = bandit.d
    m = np.zeros(len(bandit.Z), bool)
    if arms == "e":
        m[1:d] = True
    elif arms == "x":
        m[d:] = True
    else:
        raise ValueError(f"unknown arm group {arms!r}")
    return m


@dataclass
class LpResult:
    value: float
    t: np.ndarray
    status: str


def allocation_lp(
    bandit: HardBandit, thetas: np.ndarray, delta: float, zeta: float, arms: str = "e"
) -> LpResult:
    """min sum t s.t. K t >= log(1/(2.4 delta)) and sum_{limited} t <= zeta sum t, t >= 0."""
    n = len(bandit.Z)
    K = kl_matrix(bandit, thetas)
    L = log_term(delta)
    # scale rows so HiGHS sees O(1) coefficients
    scale = K.max(axis=1, keepdims=True)
    scale[scale <= 0] = 1.0
    A_ub = [-K / scale]
    b_ub = [-L / scale[:, 0]]
    xm = constrained_mask(bandit, arms).astype(float)
    A_ub.append((xm - zeta)[None])
    b_ub.append(np.zeros(1))
    res = linprog(np.ones(n), A_ub=np.vstack(A_ub), b_ub=np.concatenate(b_ub), bounds=[(0, None)] * n,
                  method="highs")
    if res.status == 2:
        return LpResult(math.inf, np.full(n, np.nan), "infeasible")
    if res.status != 0:
        return LpResult(math.nan, np.full(n, np.nan), f"solver status {res.status}: {res.message}")
    return LpResult(float(res.fun), res.x, "optimal")


@dataclass
class NumericBound:
    value: float
    allocation: np.ndarray
    iterations: int
    converged: bool
    n_alternatives: int
    status: str
    history: list[float] = field(default_factory=list)


def numeric_transportation_value(
    bandit: HardBandit,
    delta: float,
    zeta: float | None = None,
    grid: int = 0,
    eps_frac: float = 1e-6,
    max_iter: int = 200,
    rtol: float = 1e-9,
    arms: str = "e",
) -> NumericBound:
    """Lower bound on the expected stopping time of any delta-correct rule.

    Alternates between the allocation LP over the alternatives found so far and
    new alternatives theta_z(eps, lambda) at the LP's normalized allocation.
    ``grid > 0`` additionally seeds alternatives from allocations on a simplex
    lattice with that many divisions per arm pair (uniform mixes of two arms).
    """
    if len(bandit.Z) < 2:
        return NumericBound(math.nan, np.zeros(len(bandit.Z)), 0, False, 0, "infeasible: single arm")
    p = bandit.params
    zeta = p.zeta if zeta is None else zeta
    eps = eps_frac * min(p.Delta, p.xi)
    n = len(bandit.Z)
    xm = constrained_mask(bandit, arms)

    def feasible_lam(lam):
        # project onto the zeta constraint by moving excess limited mass to the rest
        lam = np.asarray(lam, float)
        lam = lam / lam.sum()
        xs = lam[xm].sum()
        if xs > zeta and xs > 0:
            lam = lam.copy()
            lam[xm] *= zeta / xs
            rest = ~xm
            lam[rest] += (1 - lam.sum()) * (lam[rest] / lam[rest].sum() if lam[rest].sum() > 0 else 1 / rest.sum())
        return lam

    seeds = [feasible_lam(np.ones(n))]
    for j in range(n):
        e = np.full(n, 1e-3)
        e[j] = 1.0
        seeds.append(feasible_lam(e))
    if grid > 0:
        for a in range(n):
            for b in range(a + 1, n):
                for k in range(1, grid):
                    lam = np.full(n, 1e-6)
                    lam[a] += k / grid
                    lam[b] += 1 - k / grid
                    seeds.append(feasible_lam(lam))

    pool: list[np.ndarray] = []

    def add(lam):
        for th in alternatives(bandit, lam, eps):
            if in_alternative_set(bandit, th):
                pool.append(th)

    for lam in seeds:
        add(lam)
    if not pool:
        return NumericBound(math.nan, np.zeros(n), 0, False, 0, "no valid alternatives")

    history: list[float] = []
    best = allocation_lp(bandit, np.array(pool), delta, zeta, arms)
    history.append(best.value)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if best.status != "optimal":
            break
        add(feasible_lam(best.t + 1e-12))
        res = allocation_lp(bandit, np.array(pool), delta, zeta, arms)
        history.append(res.value)
        grew = res.value - best.value
        best = res
        if grew <= rtol * abs(best.value):
            converged = True
            break
    status = best.status if converged else f"{best.status}; alternation stopped after {it} iterations"
    return NumericBound(best.value, best.t, it, converged, len(pool), status, history)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def bound_report(bandit: HardBandit, delta: float, zeta: float | None = None, **kw) -> dict:
    p = bandit.params
    zeta = p.zeta if zeta is None else zeta
    num = numeric_transportation_value(bandit, delta, zeta, **kw)
    return {
        "d": p.d,
        "delta": delta,
        "Delta": p.Delta,
        "zeta": zeta,
        "closed_form": closed_form_bound(p.d, p.Delta, delta),
        "numeric": num.value,
        "details": {
            "direction": "numeric is a lower bound on E[stopping time]: finitely many alternatives relax the program",
            "iterations": num.iterations,
            "converged": num.converged,
            "n_alternatives": num.n_alternatives,
            "status": num.status,
            "xi": p.xi,
            "gamma": p.gamma,
            "allocation": [float(x) for x in num.allocation],
        },
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, allow_nan=True)


def certify_baseline(episodes, bound: float, level: float = 0.95) -> dict:
    """Compare a baseline's mean stopping budget with a lower bound.

    ``episodes`` holds one stopping budget per trial.  The interval is a
    Student-t interval on the mean.
    """
    x = np.asarray(episodes, float)
    n = len(x)
    if n == 0:
        raise ValueError("need at least one trial")
    mean = float(x.mean())
    if n > 1:
        se = float(x.std(ddof=1) / math.sqrt(n))
        half = float(student_t.ppf(0.5 + level / 2, n - 1) * se)
    else:
        half = math.inf
    return {
        "trials": n,
        "mean": mean,
        "ci": [mean - half, mean + half],
        "level": level,
        "bound": bound,
        "mean_at_least_bound": mean >= bound,
        "ci_above_bound": mean - half >= bound,
    }
