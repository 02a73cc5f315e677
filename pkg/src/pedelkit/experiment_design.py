"""Online experiment design in linear MDPs.

The smoothed XY objective f(L) = (1/eta) log sum_phi exp(eta phi^T (L + L0)^{-1} phi)
is minimized over the set of achievable time-normalized covariances by a
Frank-Wolfe loop whose linear step is carried out by a regret minimizer on the
reward tr(Xi phi phi^T) / M.  ``opt_cov`` wraps that loop in a doubling
schedule, and ``conditioned_cov`` secures a minimum eigenvalue first so the
regularizer L0 is well conditioned.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .mdp_core import (
    BudgetExhausted,
    ContractError,
    EnvSampler,
    Policy,
    StepCounts,
    uniform_policy,
)
from .regret_min import Learner, LsviLearner, RegretBound, RewardFunction

R_DIAMETER = 2.0
ETA_MAX = 1e6
JITTER = 1e-12
TRACE_COLUMNS = ("iteration", "objective_value", "smoothed_value", "min_eig", "episodes_cumulative")


class StagnationError(ContractError):
    """Minimum eigenvalue stopped growing; the explorability assumption may fail."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignConfig:
    """Theory constants and desk-scale overrides shared by the design routines.

    ``scale`` is the global constant_scale.  ``cond_c`` and ``lambda_floor_scale``
    default to the scaled theory values when left as None.
    """

    scale: float = 1.0
    beta_c: float = 64.0
    cond_c: float | None = None
    lambda_floor_scale: float | None = None
    gate: str = "scaled"
    reward_normalization: str = "M"
    eta: float | None = None
    eta_max: float = ETA_MAX
    regret_bound: RegretBound | None = None
    cap: int | None = None
    max_i: int = 12
    cond_growth: float = 0.25
    cond_patience: int | None = None
    cond_max_episodes: int = 10**8

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ContractError("constant_scale must be positive")
        if self.gate not in ("theory", "scaled", "off"):
            raise ContractError("gate must be one of theory, scaled, off")
        if self.reward_normalization not in ("M", "max"):
            raise ContractError("reward_normalization must be 'M' or 'max'")

    @property
    def cond_constant(self) -> float:
        return 12544.0 * self.scale if self.cond_c is None else self.cond_c

    @property
    def floor_scale(self) -> float:
        return self.scale if self.lambda_floor_scale is None else self.lambda_floor_scale

    def gate_factor(self) -> float | None:
        return {"theory": 1.0, "scaled": self.scale, "off": None}[self.gate]

    def as_dict(self) -> dict:
        out = {
            "constant_scale": self.scale,
            "beta_c": self.beta_c,
            "cond_c": self.cond_constant,
            "lambda_floor_scale": self.floor_scale,
            "gate": self.gate,
            "reward_normalization": self.reward_normalization,
            "eta": self.eta,
            "cap": self.cap,
        }
        if self.regret_bound is not None:
            rb = self.regret_bound
            out["regret_bound"] = {"C1": rb.C1, "C2": rb.C2, "p1": rb.p1, "p2": rb.p2}
        return out


# --------------------------------------------------------------------------
# XY objective and its calculus
# --------------------------------------------------------------------------


def _sym_inv(A: np.ndarray) -> np.ndarray:
    A = 0.5 * (A + A.T)
    try:
        c = cho_factor(A, lower=True)
    except LinAlgError:
        c = cho_factor(A + JITTER * np.eye(len(A)), lower=True)
    inv = cho_solve(c, np.eye(len(A)))
    return 0.5 * (inv + inv.T)


def _check_inputs(Phi: np.ndarray, Lam0: np.ndarray) -> np.ndarray:
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    if Phi.shape[0] == 0:
        raise ContractError("Phi must be nonempty")
    if Lam0.shape != (Phi.shape[1], Phi.shape[1]):
        raise ContractError("Lam0 dimension does not match Phi")
    return Phi


def _quad(Lam: np.ndarray, Phi: np.ndarray, Lam0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    Ainv = _sym_inv(np.asarray(Lam, dtype=float) + Lam0)
    U = Phi @ Ainv
    return np.einsum("nd,nd->n", U, Phi), U


def xy_value(Lam: np.ndarray, Phi: np.ndarray, Lam0: np.ndarray) -> float:
    """max over Phi of phi^T (Lam + Lam0)^{-1} phi."""
    Lam0 = np.asarray(Lam0, dtype=float)
    Phi = _check_inputs(Phi, Lam0)
    q, _ = _quad(Lam, Phi, Lam0)
    return float(q.max())


def _logsumexp_scaled(q: np.ndarray, eta: float) -> float:
    m = q.max()
    return float(m + math.log(np.exp(eta * (q - m)).sum()) / eta)


def xy_smoothed(Lam: np.ndarray, Phi: np.ndarray, eta: float, Lam0: np.ndarray) -> float:
    """LogSumExp smoothing of xy_value at temperature 1/eta."""
    if eta <= 0:
        raise ContractError("eta must be positive")
    Lam0 = np.asarray(Lam0, dtype=float)
    Phi = _check_inputs(Phi, Lam0)
    q, _ = _quad(Lam, Phi, Lam0)
    return _logsumexp_scaled(q, eta)


def xy_gradient(Lam: np.ndarray, Phi: np.ndarray, eta: float, Lam0: np.ndarray) -> np.ndarray:
    """Negated gradient Xi = sum_phi w_phi A^{-1} phi phi^T A^{-1}, A = Lam + Lam0.

    The weights are the softmax of eta * phi^T A^{-1} phi.
    """
    if eta <= 0:
        raise ContractError("eta must be positive")
    Lam0 = np.asarray(Lam0, dtype=float)
    Phi = _check_inputs(Phi, Lam0)
    q, U = _quad(Lam, Phi, Lam0)
    w = np.exp(eta * (q - q.max()))
    w /= w.sum()
    Xi = (U * w[:, None]).T @ U
    return 0.5 * (Xi + Xi.T)


class SmoothObjective:
    """Interface: value, smoothed value, negated gradient and constants L, M, beta."""

    L: float
    M: float
    beta: float

    def value(self, Lam: np.ndarray) -> float:  # pragma: no cover - interface
        raise NotImplementedError

    def smoothed(self, Lam: np.ndarray) -> float:  # pragma: no cover - interface
        raise NotImplementedError

    def xi(self, Lam: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError


class SmoothedXY(SmoothObjective):
    """Smoothed XY objective with cached smoothness constants."""

    def __init__(self, Phi: np.ndarray, eta: float, Lam0: np.ndarray):
        Lam0 = np.asarray(Lam0, dtype=float)
        self.Phi = _check_inputs(Phi, Lam0)
        if eta <= 0:
            raise ContractError("eta must be positive")
        evals = np.linalg.eigvalsh(0.5 * (Lam0 + Lam0.T))
        if evals.min() <= 0:
            raise ContractError("Lam0 must be positive definite")
        self.Lam0 = Lam0
        self.eta = float(eta)
        inv_norm = 1.0 / evals.min()
        self.inv_norm = inv_norm
        self.L = inv_norm**2
        self.M = inv_norm**2
        self.beta = 2 * inv_norm**3 * (1 + self.eta * inv_norm)

    @staticmethod
    def default_eta(Phi: np.ndarray, Lam0: np.ndarray, eta_max: float = ETA_MAX) -> float:
        """2 (1 + ||Lam0||) log|Phi| / gamma_Phi, clipped to eta_max; 1 when |Phi| = 1."""
        Phi = np.atleast_2d(Phi)
        n = Phi.shape[0]
        if n == 1:
            return 1.0
        gamma = float(np.linalg.norm(Phi, axis=1).max())
        if gamma <= 0:
            return eta_max
        lam_norm = float(np.linalg.eigvalsh(0.5 * (Lam0 + Lam0.T)).max())
        return float(min(2 * (1 + lam_norm) * math.log(n) / gamma, eta_max))

    @classmethod
    def build(cls, Phi: np.ndarray, Lam0: np.ndarray | None = None, eta: float | None = None,
              eta_max: float = ETA_MAX) -> "SmoothedXY":
        Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        d = Phi.shape[1]
        Lam0 = np.eye(d) / d if Lam0 is None else np.asarray(Lam0, dtype=float)
        if eta is None:
            eta = cls.default_eta(Phi, Lam0, eta_max)
        return cls(Phi, eta, Lam0)

    def value(self, Lam: np.ndarray) -> float:
        return xy_value(Lam, self.Phi, self.Lam0)

    def smoothed(self, Lam: np.ndarray) -> float:
        return xy_smoothed(Lam, self.Phi, self.eta, self.Lam0)

    def xi(self, Lam: np.ndarray) -> np.ndarray:
        return xy_gradient(Lam, self.Phi, self.eta, self.Lam0)


# --------------------------------------------------------------------------
# Frank-Wolfe
# --------------------------------------------------------------------------


@dataclass
class DesignStep:
    y: np.ndarray
    gamma: float
    eps: float = 0.0
    choice: int | None = None


@dataclass
class DesignState:
    """Iterate Lam_t with the full history needed to replay it."""

    Lam: np.ndarray
    x1: np.ndarray
    raw_count: int = 0
    history: list[DesignStep] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.history)

    def replay_average(self) -> np.ndarray:
        """(x1 + sum_t y_t) / (T + 1); equals Lam for the 1/(t+1) step sizes."""
        tot = self.x1.copy()
        for s in self.history:
            tot = tot + s.y
        return tot / (self.T + 1)

    @property
    def step_sizes(self) -> list[float]:
        return [s.gamma for s in self.history]


def _check_feasible(y: np.ndarray) -> None:
    if not np.allclose(y, y.T, atol=1e-10):
        raise ContractError("oracle returned a non-symmetric matrix")
    ev = np.linalg.eigvalsh(0.5 * (y + y.T))
    if ev.min() < -1e-10 or np.trace(y) > 1 + 1e-9:
        raise ContractError("oracle returned a point outside the covariance set")


LinearOracle = Callable[[np.ndarray, int], tuple[np.ndarray, float, int | None]]


def vertex_oracle(vertices: Sequence[np.ndarray]) -> LinearOracle:
    """Exact linear step over the convex hull of known covariances.

    Maximizes tr(Xi V_k); ties go to the lowest index.
    """
    V = np.asarray(vertices, dtype=float)

    def lmo(Xi: np.ndarray, t: int) -> tuple[np.ndarray, float, int]:
        scores = np.einsum("ij,kij->k", Xi, V)
        k = int(np.argmax(scores))
        return V[k], 0.0, k

    return lmo


def approx_frank_wolfe(objective: SmoothObjective, lmo: LinearOracle, T: int, x1: np.ndarray) -> DesignState:
    """Frank-Wolfe with step sizes 1/(t+1) and an approximate linear oracle.

    ``lmo(Xi, t)`` returns (y, eps_t, choice) with tr(Xi y) within eps_t of the
    best feasible point.
    """
    x = np.asarray(x1, dtype=float).copy()
    state = DesignState(Lam=x, x1=x.copy())
    for t in range(1, T + 1):
        g = 1.0 / (t + 1)
        y, eps, choice = lmo(objective.xi(x), t)
        y = np.asarray(y, dtype=float)
        _check_feasible(y)
        x = (1 - g) * x + g * y
        state.history.append(DesignStep(y, g, eps, choice))
    state.Lam = x
    return state


def fw_rate_bound(beta: float, T: int, eps: Sequence[float] = (), R: float = R_DIAMETER) -> float:
    """beta R^2 (log T + 1) / (2 (T + 1)) + sum(eps) / (T + 1)."""
    return beta * R**2 * (math.log(T) + 1) / (2 * (T + 1)) + float(np.sum(eps)) / (T + 1)


def n_star(f_inf: float, eps: float) -> float:
    """Episodes needed at tolerance eps for an objective with infimum f_inf."""
    return f_inf / eps


# --------------------------------------------------------------------------
# episode-count thresholds
# --------------------------------------------------------------------------


def _log1(x: float) -> float:
    return max(math.log(x), 1.0) if x > 0 else 1.0


def K0_tilde(T: int, beta: float, M: float, delta: float, bound: RegretBound, H: int,
             R: float = R_DIAMETER) -> tuple[float, float]:
    """(K0~, K1~) so that K0~ T^2 + K1~ T episodes per iterate suffice.

    Logarithms are floored at 1 so the expressions stay finite for tiny inputs.
    """
    C1, C2, p1, p2 = bound.C1, bound.C2, bound.p1, bound.p2
    a = M**2 / (beta**2 * R**4)
    k0 = max(
        72 * a * _log1(4 * T / delta),
        8 * a * C1 * (2 * p1) ** p1 * _log1(32 * p1 * H * T**3 * a * C1 / delta) ** p1,
    )
    b = M / (beta * R**2)
    k1 = 3 * b * C2 * (2 * p2) ** p2 * _log1(12 * p2 * H * T**2 * b * C2 / delta) ** p2
    return k0, k1


def K0_min(T: int, beta: float, M: float, delta: float, bound: RegretBound, H: int,
           R: float = R_DIAMETER) -> int:
    """Smallest integer K meeting the per-iterate episode condition of FWRegret."""
    def ok(K: int) -> bool:
        L = _log1(2 * H * K * T / delta)
        need = max(
            72 * T**2 * M**2 * _log1(4 * T / delta) / (beta**2 * R**4),
            8 * T**2 * M**2 * bound.C1 * L**bound.p1 / (beta**2 * R**4),
            3 * T * M * bound.C2 * L**bound.p2 / (beta * R**2),
        )
        return K >= need

    if ok(1):
        return 1
    hi = 2
    while not ok(hi):
        hi *= 2
        if hi > 2**62:
            raise ContractError("K0 search overflow")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def schedule(i: int) -> tuple[int, int]:
    """Doubling schedule (T_i, K_i) = (2^i, 2^i T_i^2)."""
    T = 2**i
    return T, 2**i * T * T


# --------------------------------------------------------------------------
# FWRegret
# --------------------------------------------------------------------------


def design_reward(phi: np.ndarray, Xi: np.ndarray, M: float, mode: str = "M") -> np.ndarray:
    """Per (s, a) reward tr(Xi phi phi^T) / M, or normalized by its maximum."""
    r = np.einsum("sad,de,sae->sa", phi, Xi, phi)
    if mode == "max":
        top = r.max()
        return r / top if top > 0 else np.zeros_like(r)
    return r / M


@dataclass
class FwRegretResult:
    state: DesignState
    data: StepCounts
    covariance: np.ndarray
    episodes: int


def fw_regret(
    objective: SmoothObjective,
    sampler: EnvSampler,
    T: int,
    K: int,
    h: int,
    delta: float,
    learner: Learner | None = None,
    initial_policy: Policy | None = None,
    reward_normalization: str = "M",
    on_iterate: Callable[[int, np.ndarray, int], None] | None = None,
) -> FwRegretResult:
    """Frank-Wolfe in the h-truncated MDP with a regret minimizer as linear step."""
    if K < 1:
        raise ContractError("K must be at least 1")
    learner = learner or LsviLearner()
    mdp = sampler.mdp
    phi = mdp.phi
    init = initial_policy or uniform_policy(mdp)
    start = sampler.episodes
    S, A = mdp.S, mdp.A
    data = sampler.run_counts(init, K, h, truncate_at=h)
    cov = data.covariance(phi, h)
    Lam = cov / K
    state = DesignState(Lam=Lam.copy(), x1=Lam.copy())
    if on_iterate:
        on_iterate(0, Lam, sampler.episodes - start)
    per_step = max(T, 1)
    for t in range(1, T + 1):
        g = 1.0 / (t + 1)
        Xi = objective.xi(Lam)
        r = design_reward(phi, Xi, objective.M, reward_normalization)
        vals = r[mdp.action_mask]
        if vals.min() < -1e-9 or vals.max() > 1 + 1e-9:
            raise ContractError(f"design reward outside [0, 1]: max {vals.max():.6g}")
        reward = RewardFunction.at_step(np.clip(r, 0.0, 1.0), h, mdp.H, mdp.action_mask)
        res = learner.run(sampler, reward, K, delta / (2 * per_step), truncate_at=h)
        Gamma = res.covariance[h]
        y = Gamma / K
        Lam = (1 - g) * Lam + g * y
        cov = cov + Gamma
        data.add(StepCounts.from_trajectories(res.trajectories, h, S, A))
        state.history.append(DesignStep(y, g))
        if on_iterate:
            on_iterate(t, Lam, sampler.episodes - start)
    state.Lam = Lam
    state.raw_count = K * (T + 1)
    return FwRegretResult(state, data, cov, sampler.episodes - start)


# --------------------------------------------------------------------------
# ConditionedCov
# --------------------------------------------------------------------------


@dataclass
class ConditionedCovResult:
    covariance: np.ndarray
    data: StepCounts
    policies: list[tuple[Policy, int]]
    target: float
    min_eig: float
    target_met: bool
    episodes: int
    rounds: int
    complement: np.ndarray | None = None
    phase1: np.ndarray | None = None

    @property
    def padded(self) -> np.ndarray:
        """Covariance plus target mass on directions no step-h feature reaches."""
        if self.complement is None:
            return self.covariance
        return self.covariance + self.target * self.complement


def reachable_basis(mdp, h: int, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis (d, r) of the span of features available at step h."""
    F = np.concatenate([mdp.phi[s, mdp.action_mask[s]] for s in mdp.step_states[h]])
    _, sv, Vt = np.linalg.svd(F, full_matrices=False)
    r = int((sv > tol * max(sv.max(), 1.0)).sum())
    return Vt[:r].T


def _group_segments(segments: Sequence[tuple[Policy, int]], mdp) -> list[tuple[Policy, int]]:
    """Merge run-length segments whose policies share the same action table."""
    groups: dict[bytes, list] = {}
    for pol, cnt in segments:
        key = pol.table(mdp).tobytes()
        if key in groups:
            groups[key][1] += cnt
        else:
            groups[key] = [pol, cnt]
    return [(p, c) for p, c in groups.values()]


def conditioned_target(d: int, N: int, T: int, delta: float, lam_floor: float, c: float) -> float:
    """max{c d log(2N(2 + 32T)/delta), lam_floor}."""
    return max(c * d * math.log(2 * N * (2 + 32 * T) / delta), lam_floor)


def conditioned_cov(
    sampler: EnvSampler,
    N: int,
    lam_floor: float,
    delta: float,
    h: int,
    learner: Learner | None = None,
    config: DesignConfig | None = None,
) -> ConditionedCovResult:
    """Grow lambda_min of the step-h covariance, then replay the policies used.

    Phase 1 repeatedly runs the regret minimizer on the reward (phi^T v)^2 for
    v the unit eigenvector of the current smallest eigenvalue.  Each round
    plays max(d, growth * episodes so far) episodes.  Phase 2 replays every
    phase-1 episode's policy ceil(N / T) times, where T is the number of
    phase-1 episodes.  Eigenvalues are measured on the span of features
    reachable at step h, the only directions any policy can excite.
    """
    config = config or DesignConfig()
    learner = learner or LsviLearner()
    mdp = sampler.mdp
    phi = mdp.phi
    d = mdp.d
    U = reachable_basis(mdp, h)
    c = config.cond_constant
    patience = config.cond_patience or (4 * d + 20)
    start = sampler.episodes
    Sigma = np.zeros((d, d))
    segments: list[tuple[Policy, int]] = []
    data = StepCounts.empty(mdp.S, mdp.A, h)
    T = 0
    rounds = 0
    best = -np.inf
    stale = 0
    while True:
        target = conditioned_target(d, N, max(T, 1), delta, lam_floor, c)
        evals, evecs = np.linalg.eigh(U.T @ Sigma @ U)
        lam_min = float(evals[0])
        if T > 0 and lam_min >= target:
            break
        if lam_min > best * (1 + 1e-9) + 1e-12:
            best = lam_min
            stale = 0
        else:
            stale += 1
            if stale > patience:
                raise StagnationError(
                    f"min eigenvalue stuck at {lam_min:.4g} (target {target:.4g}) after "
                    f"{rounds} rounds; the explorability assumption may fail at step {h}"
                )
        if T >= config.cond_max_episodes:
            raise StagnationError(f"phase 1 exceeded {config.cond_max_episodes} episodes at step {h}")
        v = U @ evecs[:, 0]
        r = np.einsum("sad,d->sa", phi, v) ** 2
        reward = RewardFunction.at_step(np.clip(r, 0.0, 1.0), h, mdp.H, mdp.action_mask)
        n = max(d, math.ceil(config.cond_growth * T))
        res = learner.run(sampler, reward, n, delta, truncate_at=h)
        Sigma = Sigma + res.covariance[h]
        segments.extend(res.segments)
        data.add(StepCounts.from_trajectories(res.trajectories, h, mdp.S, mdp.A))
        T += n
        rounds += 1
    phase1 = Sigma.copy()
    reps = math.ceil(N / T)
    for pol, cnt in _group_segments(segments, mdp):
        tr = sampler.run_counts(pol, cnt * reps, h, truncate_at=h)
        Sigma = Sigma + tr.covariance(phi, h)
        data.add(tr)
    lam_final = float(np.linalg.eigvalsh(U.T @ Sigma @ U)[0])
    return ConditionedCovResult(
        covariance=Sigma,
        data=data,
        policies=segments,
        target=target,
        min_eig=lam_final,
        target_met=lam_final >= target,
        episodes=sampler.episodes - start,
        rounds=rounds,
        complement=None if U.shape[1] == d else np.eye(d) - U @ U.T,
        phase1=phase1,
    )


# --------------------------------------------------------------------------
# OptCov
# --------------------------------------------------------------------------


@dataclass
class FamilyMember:
    """Objective for doubling index i, with any data collected to build it."""

    objective: SmoothObjective
    covariance: np.ndarray | None = None
    data: StepCounts | None = None


@dataclass
class OptCovResult:
    covariance: np.ndarray
    data: StepCounts
    episodes: int
    value: float
    smoothed_value: float
    i_hat: int
    flags: tuple[str, ...]
    trace: list[dict]
    config: dict

    @property
    def partial(self) -> bool:
        return "budget_exhausted" in self.flags


def _gate_passes(config: DesignConfig, T: int, K: int, f: SmoothObjective, delta_i: float,
                 bound: RegretBound, H: int) -> bool:
    factor = config.gate_factor()
    if factor is None:
        return True
    k0, k1 = K0_tilde(T, f.beta, f.M, delta_i, bound, H)
    return K >= factor * (k0 * T**2 + k1 * T)


def _lower_gate(config: DesignConfig, value: float, T: int, f: SmoothObjective) -> bool:
    factor = config.gate_factor()
    if factor is None:
        return True
    return value >= factor * f.beta * R_DIAMETER**2 * (math.log(T) + 3) / T


def opt_cov(
    sampler: EnvSampler,
    family: Callable[[int, EnvSampler], FamilyMember],
    eps: float,
    delta: float,
    h: int,
    learner: Learner | None = None,
    config: DesignConfig | None = None,
) -> OptCovResult:
    """Doubling-schedule wrapper around fw_regret.

    Returns once f_i(Lam_hat) <= K_i T_i eps (and the lower gate, unless it is
    switched off).  On reaching ``config.cap`` the data of the last completed
    iteration is returned with the flag ``budget_exhausted``.
    """
    config = config or DesignConfig()
    learner = learner or LsviLearner()
    mdp = sampler.mdp
    bound = config.regret_bound or RegretBound.force_default(mdp.d, mdp.H)
    start = sampler.episodes
    limits = [c for c in (config.cap, sampler.remaining) if c is not None and np.isfinite(c)]
    sub = EnvSampler(mdp, sampler.rng, int(min(limits)) if limits else None)
    trace: list[dict] = []
    it_counter = [0]
    last: tuple | None = None

    def flush() -> None:
        sampler.episodes = start + sub.episodes

    try:
        for i in range(1, config.max_i + 1):
            T, K = schedule(i)
            member = family(i, sub)
            f = member.objective
            if not _gate_passes(config, T, K, f, delta / (4 * i * i), bound, mdp.H):
                continue
            pre = sub.episodes

            def record(t, Lam, used, f=f, pre=pre):
                it_counter[0] += 1
                trace.append({
                    "iteration": it_counter[0],
                    "objective_value": f.value(Lam),
                    "smoothed_value": f.smoothed(Lam),
                    "min_eig": float(np.linalg.eigvalsh(Lam + f.Lam0)[0]) if hasattr(f, "Lam0") else float("nan"),
                    "episodes_cumulative": pre + used,
                })

            fw = fw_regret(f, sub, T - 1, K, h, delta / (4 * i * i), learner,
                           reward_normalization=config.reward_normalization, on_iterate=record)
            val = f.smoothed(fw.state.Lam)
            cov = fw.covariance
            parts = [fw.data]
            if member.covariance is not None:
                cov = cov + member.covariance
                parts.insert(0, member.data)
            last = (cov, StepCounts.merge(parts), f.value(fw.state.Lam), val, i)
            if val <= K * T * eps and _lower_gate(config, val, T, f):
                flush()
                return OptCovResult(cov, last[1], sampler.episodes - start,
                                    last[2], val, i, (), trace, config.as_dict())
    except BudgetExhausted:
        flush()
        if last is None:
            d = mdp.d
            return OptCovResult(np.zeros((d, d)), StepCounts.empty(mdp.S, mdp.A, h), sampler.episodes - start, math.inf, math.inf,
                                0, ("budget_exhausted",), trace, config.as_dict())
        cov, data, v, val, i = last
        return OptCovResult(cov, data, sampler.episodes - start, v, val, i,
                            ("budget_exhausted",), trace, config.as_dict())
    flush()
    raise ContractError(f"opt_cov did not terminate within max_i={config.max_i} doublings")


def collect_xy_design(
    sampler: EnvSampler,
    Phi: np.ndarray,
    eps_exp: float,
    delta: float,
    lam_floor: float,
    h: int,
    learner: Learner | None = None,
    config: DesignConfig | None = None,
) -> OptCovResult:
    """XY design at step h: ConditionedCov supplies Lam0 for each doubling index.

    On success the returned covariance S satisfies max_phi phi^T S^{-1} phi <= eps_exp.
    """
    config = config or DesignConfig()
    learner = learner or LsviLearner()
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))

    def family(i: int, sub: EnvSampler) -> FamilyMember:
        T, K = schedule(i)
        N = T * K
        cc = conditioned_cov(sub, N, lam_floor, delta / (2 * i * i), h, learner, config)
        Lam0 = cc.padded / N
        f = SmoothedXY.build(Phi, Lam0, config.eta, config.eta_max)
        return FamilyMember(f, cc.covariance, cc.data)

    return opt_cov(sampler, family, eps_exp, delta, h, learner, config)


def trace_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in TRACE_COLUMNS})
    return buf.getvalue()
