"""Regret-minimization learners behind a common episode-level interface.

A learner receives an :class:`EnvSampler`, a deterministic reward table and an
episode budget, and returns the policies it played together with the logs.
``LsviLearner`` is an optimistic least-squares value iteration learner,
``OracleLearner`` plans with the true dynamics and ``UniformLearner`` ignores
the reward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .mdp_core import (
    ContractError,
    DeterministicTable,
    EnvSampler,
    LinearMdp,
    Policy,
    Trajectories,
    optimal_policy,
    uniform_policy,
)

REWARD_TOL = 1e-12


@dataclass(frozen=True)
class RegretBound:
    """High-probability regret sqrt(C1 K log^p1(HK/delta)) + C2 log^p2(HK/delta)."""

    C1: float
    C2: float
    p1: float = 3.0
    p2: float = 3.5

    def __post_init__(self) -> None:
        if self.C1 < 0 or self.C2 < 0 or self.p1 < 1 or self.p2 < 1:
            raise ContractError("need C1, C2 >= 0 and p1, p2 >= 1")

    @classmethod
    def force_default(cls, d: int, H: int, c1: float = 1.0, c2: float = 1.0) -> "RegretBound":
        return cls(C1=c1 * d**4 * H**4, C2=c2 * d**4 * H**3, p1=3.0, p2=3.5)

    def regret(self, K: int, H: int, delta: float) -> float:
        L = max(math.log(H * K / delta), 1.0)
        return math.sqrt(self.C1 * K * L**self.p1) + self.C2 * L**self.p2


@dataclass(frozen=True)
class LowRegretBound:
    """Expected-regret contract C1 K^alpha + C2 with alpha in [0, 1)."""

    C1: float
    C2: float
    alpha: float = 0.5

    def regret(self, K: int) -> float:
        return self.C1 * K**self.alpha + self.C2


class RewardFunction:
    """Deterministic reward table r[h, s, a] in [0, 1], range-checked on build."""

    def __init__(self, table: np.ndarray, mask: np.ndarray | None = None):
        t = np.asarray(table, dtype=float)
        vals = t if mask is None else t[:, mask]
        if vals.size and (vals.min() < -REWARD_TOL or vals.max() > 1 + REWARD_TOL):
            raise ContractError(f"reward outside [0, 1]: range [{vals.min():.3g}, {vals.max():.3g}]")
        self.table = np.clip(t, 0.0, 1.0)

    @classmethod
    def at_step(cls, values: np.ndarray, h: int, H: int, mask: np.ndarray | None = None) -> "RewardFunction":
        t = np.zeros((H,) + values.shape)
        t[h] = values
        return cls(t, mask)


@dataclass
class RegminResult:
    segments: list[tuple[Policy, int]]
    trajectories: Trajectories
    covariance: np.ndarray
    recommendations: list[tuple[int, Policy, tuple[str, ...]]] = field(default_factory=list)

    @property
    def episodes(self) -> int:
        return self.trajectories.n

    @property
    def policies(self) -> list[Policy]:
        """Per-episode list of played policies (run-length expanded)."""
        out: list[Policy] = []
        for p, n in self.segments:
            out.extend([p] * n)
        return out


class Learner(Protocol):
    name: str

    def run(
        self,
        sampler: EnvSampler,
        reward: RewardFunction | None,
        K: int,
        delta: float,
        truncate_at: int | None = None,
        checkpoints: Sequence[int] = (),
    ) -> RegminResult: ...


def step_covariances(phi: np.ndarray, traj: Trajectories, H_eff: int) -> np.ndarray:
    d = phi.shape[2]
    out = np.zeros((traj.states.shape[1], d, d))
    for h in range(H_eff):
        out[h] = traj.covariance(phi, h)
    return out


def _horizon(sampler: EnvSampler, truncate_at: int | None) -> int:
    return sampler.H if truncate_at is None else truncate_at + 1


class LsviLearner:
    """Optimistic least-squares value iteration with lazy policy updates.

    Q_h = r_h + phi^T w_h + b ||phi||_{Lambda_h^{-1}}, with w_h a ridge fit of
    the next-step value.  When no reward table is given the reward is also
    regressed from observed rewards.  The greedy policy is recomputed whenever
    the episode count has grown by ``update_ratio`` since the last update, with at
    least ``min_batch`` episodes between updates.
    """

    name = "lsvi"

    def __init__(
        self,
        ridge: float = 1.0,
        bonus_scale: float = 1.0,
        bonus: float | None = None,
        update_ratio: float = 0.2,
        explore: str = "optimistic",
        min_batch: int = 4,
        seed: int | None = 0,
    ):
        if explore not in ("optimistic", "uniform"):
            raise ContractError("explore must be 'optimistic' or 'uniform'")
        self.ridge = ridge
        self.bonus_scale = bonus_scale
        self.bonus = bonus
        self.update_ratio = update_ratio
        self.explore = explore
        self.min_batch = min_batch
        self.seed = seed

    def bonus_value(self, d: int, K: int, H: int, delta: float) -> float:
        if self.bonus is not None:
            return self.bonus
        return self.bonus_scale * d * H * math.sqrt(math.log(max(d * K * H / delta, math.e)))

    def run(
        self,
        sampler: EnvSampler,
        reward: RewardFunction | None,
        K: int,
        delta: float,
        truncate_at: int | None = None,
        checkpoints: Sequence[int] = (),
    ) -> RegminResult:
        if K < 0:
            raise ContractError("K must be nonnegative")
        phi = sampler.phi
        mask = sampler.mdp.action_mask
        S, A, d = phi.shape
        H_eff = _horizon(sampler, truncate_at)
        bonus = self.bonus_value(d, max(K, 1), H_eff, delta)
        stats = _RidgeStats(phi, H_eff, self.ridge)
        cps = sorted(int(c) for c in checkpoints if 0 <= c <= K)
        recs: list[tuple[int, Policy, tuple[str, ...]]] = []
        segments: list[tuple[Policy, int]] = []
        parts: list[Trajectories] = []
        k = 0
        uni = uniform_policy(sampler.mdp)
        rng = None if self.seed is None else np.random.default_rng([self.seed, int(sampler.rng.integers(2**32))])
        while True:
            while cps and cps[0] == k:
                cps.pop(0)
                recs.append(self._recommend(stats, reward, mask, k, sampler, rng))
            if k >= K:
                break
            if self.explore == "uniform":
                pol: Policy = uni
            else:
                pol = stats.greedy(reward, mask, bonus, sampler.H, rng)
            n = min(K - k, max(self.min_batch, math.ceil(self.update_ratio * k)))
            if cps:
                n = min(n, cps[0] - k)
            traj = sampler.run(pol, n, truncate_at)
            stats.update(traj)
            parts.append(traj)
            segments.append((pol, n))
            k += n
        traj_all = Trajectories.concat(parts) if parts else _empty_traj(sampler, truncate_at)
        return RegminResult(segments, traj_all, step_covariances(phi, traj_all, H_eff), recs)

    def _recommend(self, stats: "_RidgeStats", reward, mask, k, sampler, rng) -> tuple[int, Policy, tuple[str, ...]]:
        if k == 0:
            return (0, uniform_policy(sampler.mdp), ("undefined",))
        return (k, stats.greedy(reward, mask, 0.0, sampler.H, rng), ())


class _RidgeStats:
    """Sufficient statistics for per-step ridge regressions on finite states."""

    def __init__(self, phi: np.ndarray, H_eff: int, ridge: float):
        S, A, d = phi.shape
        self.phi = phi
        self.H_eff = H_eff
        self.Lam = np.repeat(ridge * np.eye(d)[None], H_eff, axis=0)
        self.B = np.zeros((H_eff, d, S))
        self.br = np.zeros((H_eff, d))

    def update(self, traj: Trajectories) -> None:
        S = self.phi.shape[0]
        for h in range(self.H_eff):
            f = self.phi[traj.states[:, h], traj.actions[:, h]]
            self.Lam[h] += f.T @ f
            self.br[h] += f.T @ traj.rewards[:, h]
            if h < self.H_eff - 1:
                onehot = np.zeros((traj.n, S))
                onehot[np.arange(traj.n), traj.next_states[:, h]] = 1.0
                self.B[h] += f.T @ onehot

    def greedy(self, reward: RewardFunction | None, mask: np.ndarray, bonus: float, H: int,
               rng: np.random.Generator | None = None) -> DeterministicTable:
        """Greedy policy on optimistic Q; actions are chosen on unclipped Q and the
        backed-up value is clipped at the remaining horizon."""
        phi = self.phi
        S, A, d = phi.shape
        acts = np.zeros((H, S), dtype=int)
        acts[:] = np.argmax(mask, axis=1)
        V = np.zeros(S)
        for h in reversed(range(self.H_eff)):
            Linv = np.linalg.inv(self.Lam[h])
            learned = h < self.H_eff - 1 or reward is None
            Q = np.zeros((S, A))
            if reward is not None:
                Q += reward.table[h]
            else:
                Q += phi @ (Linv @ self.br[h])
            if h < self.H_eff - 1:
                Q += phi @ (Linv @ (self.B[h] @ V))
            if bonus > 0 and learned:
                Q += bonus * np.sqrt(np.maximum(np.einsum("sad,de,sae->sa", phi, Linv, phi), 0.0))
            Q = np.where(mask, Q, -np.inf)
            acts[h] = _argmax_ties(Q, rng)
            V = np.minimum(Q[np.arange(S), acts[h]], self.H_eff - h)
        return DeterministicTable(acts, name="lsvi-greedy")


def _argmax_ties(Q: np.ndarray, rng: np.random.Generator | None, tol: float = 1e-12) -> np.ndarray:
    """Row-wise argmax; ties within tol are broken uniformly at random when rng is given."""
    if rng is None:
        return np.argmax(Q, axis=1)
    top = Q.max(axis=1, keepdims=True)
    keys = rng.random(Q.shape)
    keys[Q < top - tol] = -1.0
    return np.argmax(keys, axis=1)


def _empty_traj(sampler: EnvSampler, truncate_at: int | None) -> Trajectories:
    H = sampler.H
    z = np.zeros((0, H), dtype=np.int64)
    return Trajectories(z, z.copy(), np.zeros((0, H)), z.copy(), truncate_at)


class OracleLearner:
    """Known-dynamics planner: plays the exact optimal policy every episode."""

    name = "oracle"

    def run(
        self,
        sampler: EnvSampler,
        reward: RewardFunction | None,
        K: int,
        delta: float,
        truncate_at: int | None = None,
        checkpoints: Sequence[int] = (),
    ) -> RegminResult:
        mdp: LinearMdp = sampler.mdp
        H_eff = _horizon(sampler, truncate_at)
        table = mdp.R if reward is None else reward.table
        pol, _ = optimal_policy(mdp, table, horizon=H_eff)
        traj = sampler.run(pol, K, truncate_at) if K > 0 else _empty_traj(sampler, truncate_at)
        recs = [(c, pol, ()) for c in sorted(checkpoints) if 0 <= c <= K]
        return RegminResult([(pol, K)], traj, step_covariances(mdp.phi, traj, H_eff), recs)


class UniformLearner(LsviLearner):
    """Uniform exploration; recommendations come from the same ridge estimates."""

    name = "uniform"

    def __init__(self, ridge: float = 1.0, update_ratio: float = 0.2, seed: int | None = 0):
        super().__init__(ridge=ridge, update_ratio=update_ratio, explore="uniform", seed=seed)


def make_learner(kind: str, **kwargs) -> Learner:
    if kind == "lsvi":
        return LsviLearner(**kwargs)
    if kind == "oracle":
        return OracleLearner()
    if kind == "uniform":
        return UniformLearner(**{k: v for k, v in kwargs.items() if k in ("ridge", "update_ratio", "seed")})
    raise ContractError(f"unknown learner {kind!r}")


def run_regmin(
    sampler: EnvSampler,
    reward: RewardFunction,
    K: int,
    delta: float,
    learner: Learner | None = None,
    truncate_at: int | None = None,
) -> RegminResult:
    """Play K episodes of a regret minimizer on a known deterministic reward."""
    if K < 1:
        raise ContractError("K must be at least 1")
    learner = learner or LsviLearner()
    return learner.run(sampler, reward, K, delta, truncate_at)


@dataclass
class OnlineToBatchResult:
    episodes: int
    policy: Policy
    flags: tuple[str, ...]
    checkpoints: list[tuple[int, Policy, tuple[str, ...]]]


def default_budget_schedule(d: int, eps: float, delta: float, start: int = 16) -> list[int]:
    """Geometric checkpoints up to ceil(4 d log(1/delta) / eps^2)."""
    top = max(start, math.ceil(4 * d * math.log(1 / delta) / eps**2))
    out = []
    k = start
    while k < top:
        out.append(k)
        k *= 2
    out.append(top)
    return out


def online_to_batch(
    sampler: EnvSampler,
    eps: float,
    delta: float,
    budget_schedule: Sequence[int] | int | None = None,
    learner: Learner | None = None,
) -> OnlineToBatchResult:
    """Run a low-regret learner on the true reward and recommend its greedy policy.

    The learner stops at the last checkpoint of the schedule; the greedy
    policy at every checkpoint is kept so one run serves a whole budget ladder.
    """
    learner = learner or LsviLearner()
    if budget_schedule is None:
        budget_schedule = default_budget_schedule(sampler.d, eps, delta)
    if isinstance(budget_schedule, int):
        budget_schedule = [budget_schedule]
    cps = sorted(int(k) for k in budget_schedule)
    res = learner.run(sampler, None, cps[-1], delta, None, checkpoints=cps)
    final = res.recommendations[-1]
    return OnlineToBatchResult(final[0], final[1], final[2], res.recommendations)
