"""Policy elimination driven by per-step online experiment design.

Each epoch halves the tolerance eps_l = 2^-l.  For every step h the active
policies' estimated feature visitations form the design target set, data are
collected in the h-truncated MDP until every target has small norm in the
inverse regularized covariance, and the visitations at h+1 and the reward
vector at h are re-estimated from that data alone.  Policies whose estimated
value trails the best by more than 2 eps_l are dropped.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .experiment_design import DesignConfig, collect_xy_design
from .mdp_core import (
    BudgetExhausted,
    ContractError,
    EnvSampler,
    Policy,
    StepCounts,
    Trajectories,
    policy_table,
    step_feature_policy,
)
from .regret_min import Learner, make_learner

TRACE_COLUMNS = (
    "epoch", "h", "episodes_this_phase", "design_value_achieved",
    "n_active", "v_hat_max", "eliminated_count",
)
GATE_TOL = 1e-10


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------


StepData = Union[Trajectories, StepCounts]


def step_counts(phi: np.ndarray, data: StepData, h: int) -> StepCounts:
    """Tallies of the step-h data, converting raw trajectories when needed."""
    if isinstance(data, StepCounts):
        if data.h != h:
            raise ContractError(f"counts hold step {data.h}, not {h}")
        counts = data
    else:
        counts = StepCounts.from_trajectories(data, h, phi.shape[0], phi.shape[1])
    if counts.n == 0:
        raise ContractError("no episodes logged for this step")
    return counts


def regularized_covariance(phi: np.ndarray, data: StepData, h: int, ridge: float | None = None) -> np.ndarray:
    """Sum of phi phi^T at step h plus (1/d) I."""
    d = phi.shape[2]
    return step_counts(phi, data, h).covariance(phi) + (1.0 / d if ridge is None else ridge) * np.eye(d)


def next_state_feature_sums(phi: np.ndarray, data: StepData, h: int) -> np.ndarray:
    """C[s] = sum of phi_{h,tau} over episodes with s_{h+1,tau} = s, shape (S, d)."""
    c = step_counts(phi, data, h)
    if c.trans.sum() != c.n:
        raise ContractError(f"no next states logged at step {h}")
    return np.einsum("sap,sad->pd", c.trans, phi)


def estimate_transition_operator(
    phi: np.ndarray, data: StepData, h: int, next_table: np.ndarray, Lam: np.ndarray
) -> np.ndarray:
    """T_hat = (sum_tau phi_pi(s_{h+1,tau}) phi_{h,tau}^T) Lam^{-1}.

    ``next_table`` holds the policy's action probabilities (S, A) at step h+1.
    """
    G = step_feature_policy(phi, next_table)
    C = next_state_feature_sums(phi, data, h)
    return G.T @ C @ np.linalg.inv(Lam)


def estimate_feature_visitations(
    phi: np.ndarray,
    data: StepData,
    h: int,
    next_tables: np.ndarray,
    phi_hat_h: np.ndarray,
    Lam: np.ndarray,
) -> np.ndarray:
    """Chained estimate phi_hat_{pi,h+1} = T_hat_{pi,h+1} phi_hat_{pi,h} for many policies.

    ``next_tables`` has shape (n, S, A) and ``phi_hat_h`` shape (n, d).
    """
    C = next_state_feature_sums(phi, data, h)
    W = C @ np.linalg.solve(Lam, np.atleast_2d(phi_hat_h).T)  # (S, n)
    G = np.einsum("nsa,sad->nsd", next_tables, phi)
    return np.einsum("nsd,sn->nd", G, W)


def estimate_reward_vector(phi: np.ndarray, data: StepData, h: int, Lam: np.ndarray) -> np.ndarray:
    """Ridge estimate Lam^{-1} sum_tau phi_{h,tau} r_{h,tau}."""
    c = step_counts(phi, data, h)
    return np.linalg.solve(Lam, np.einsum("sa,sad->d", c.reward_sums, phi))


def eliminate(values: np.ndarray, eps_l: float) -> np.ndarray:
    """Boolean mask of policies within 2 eps_l of the best estimated value."""
    v = np.asarray(values, dtype=float)
    return v >= v.max() - 2 * eps_l


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PedelConfig:
    design: DesignConfig = field(default_factory=DesignConfig)
    learner: str = "lsvi"
    learner_kwargs: tuple = ()
    total_cap: int | None = None
    ridge: float | None = None

    def make_learner(self) -> Learner:
        return make_learner(self.learner, **dict(self.learner_kwargs))

    def as_dict(self) -> dict:
        return {
            "design": self.design.as_dict(),
            "learner": self.learner,
            "learner_kwargs": dict(self.learner_kwargs),
            "total_cap": self.total_cap,
        }


@dataclass
class GateRecord:
    epoch: int
    h: int
    Lam: np.ndarray
    Phi: np.ndarray
    threshold: float
    achieved: float

    def verify(self, tol: float = GATE_TOL) -> bool:
        q = np.einsum("nd,nd->n", self.Phi, np.linalg.solve(self.Lam, self.Phi.T).T)
        return bool(q.max() <= self.threshold + tol)


@dataclass
class PedelResult:
    policy: Policy
    policy_index: int
    episodes: int
    flags: tuple[str, ...]
    trace: list[dict]
    survivors: list[int]
    values: dict[int, float]
    gates: list[GateRecord]
    epochs: tuple[int, int]
    config: dict

    def to_json(self) -> str:
        pid = getattr(self.policy, "name", "") or str(self.policy_index)
        return json.dumps({
            "policy_id": pid,
            "policy_index": self.policy_index,
            "episodes_total": self.episodes,
            "flags": list(self.flags),
            "constant_scale": self.config["design"]["constant_scale"],
        }, sort_keys=True)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.trace:
            w.writerow({k: r.get(k, "") for k in TRACE_COLUMNS})
        return buf.getvalue()


def epoch_range(d: int, H: int, eps: float) -> tuple[int, int]:
    """(l0, l_final) with l0 = max(1, ceil(log2(d^1.5 / H))) and l_final = ceil(log2(4 / eps)).

    l_final is raised to l0 when eps is coarse enough to leave the range empty,
    so at least one epoch always runs.
    """
    l0 = max(1, math.ceil(math.log2(d**1.5 / H)))
    return l0, max(l0, math.ceil(math.log2(4 / eps)))


def epoch_constants(H: int, n_active: int, ell: int, delta: float, config: DesignConfig) -> dict:
    logterm = math.log(4 * H * H * n_active * ell * ell / delta)
    eps_l = 2.0 ** (-ell)
    beta = config.beta_c * H**4 * logterm * config.scale
    return {
        "eps_l": eps_l,
        "beta": beta,
        "eps_exp": eps_l**2 / beta,
        "delta": delta / (2 * H * ell * ell),
        "lam_floor": logterm * config.floor_scale,
    }


def run_pedel(
    sampler: EnvSampler,
    policies: Sequence[Policy],
    eps: float,
    delta: float,
    config: PedelConfig | None = None,
) -> PedelResult:
    """Return a policy from ``policies`` whose value is within eps of the best, w.p. 1 - delta."""
    if not policies:
        raise ContractError("policy set must be nonempty")
    if not (0 < eps < 1 and 0 < delta < 1):
        raise ContractError("eps and delta must lie in (0, 1)")
    config = config or PedelConfig()
    mdp = sampler.mdp
    phi = mdp.phi
    H, d = mdp.H, mdp.d
    for p in policies:
        if not p.is_markov:
            raise ContractError("policies must be Markov")
    tables = np.stack([policy_table(mdp, p) for p in policies])  # (n, H, S, A)
    n = len(policies)
    l0, lf = epoch_range(d, H, eps)
    start = sampler.episodes
    meta = config.as_dict()

    def result(idx: int, flags: list[str], active: list[int], values: dict) -> PedelResult:
        return PedelResult(policies[idx], idx, sampler.episodes - start, tuple(flags), trace,
                           list(active), values, gates, (l0, lf), meta)

    trace: list[dict] = []
    gates: list[GateRecord] = []
    if n == 1:
        return result(0, ["single_policy"], [0], {})

    if config.total_cap is not None:
        run_sampler = EnvSampler(mdp, sampler.rng, config.total_cap)
    else:
        run_sampler = sampler
    learner = config.make_learner()
    s0 = mdp.start_state
    phi_hat = np.zeros((n, H, d))
    phi_hat[:, 0] = np.einsum("na,ad->nd", tables[:, 0, s0], phi[s0])
    theta_hat = np.zeros((H, d))
    active = list(range(n))
    values: dict[int, float] = {}
    flags: list[str] = []

    def sync() -> None:
        if run_sampler is not sampler:
            sampler.episodes = start + run_sampler.episodes

    for ell in range(l0, lf + 1):
        c = epoch_constants(H, len(active), ell, delta, config.design)
        epoch_rows = []
        try:
            for h in range(H):
                before = run_sampler.episodes
                Phi = phi_hat[active, h]
                design = collect_xy_design(run_sampler, Phi, c["eps_exp"], c["delta"], c["lam_floor"], h,
                                           learner, config.design)
                if design.partial:
                    raise BudgetExhausted(run_sampler.episodes, config.design.cap or -1)
                data = design.data
                Lam = regularized_covariance(phi, data, h, config.ridge)
                q = np.einsum("nd,nd->n", Phi, np.linalg.solve(Lam, Phi.T).T)
                gates.append(GateRecord(ell, h, Lam, Phi.copy(), c["eps_exp"], float(q.max())))
                if h < H - 1:
                    nxt = tables[active, h + 1]
                    phi_hat[active, h + 1] = estimate_feature_visitations(phi, data, h, nxt, Phi, Lam)
                theta_hat[h] = estimate_reward_vector(phi, data, h, Lam)
                row = {
                    "epoch": ell,
                    "h": h,
                    "episodes_this_phase": run_sampler.episodes - before,
                    "design_value_achieved": float(q.max()),
                    "n_active": len(active),
                }
                trace.append(row)
                epoch_rows.append(row)
        except BudgetExhausted:
            sync()
            flags.append("budget_exhausted")
            best = max(active, key=lambda k: (values.get(k, -np.inf), -k)) if values else active[0]
            return result(best, flags, active, values)
        sync()
        V = np.einsum("nhd,hd->n", phi_hat[active], theta_hat)
        values = {k: float(v) for k, v in zip(active, V)}
        keep = eliminate(V, c["eps_l"])
        survivors = [k for k, ok in zip(active, keep) if ok]
        for row in epoch_rows:
            row["v_hat_max"] = float(V.max())
            row["eliminated_count"] = len(active) - len(survivors)
        active = survivors
        if len(active) == 1:
            flags.append("early_stop")
            return result(active[0], flags, active, values)
    best = max(active, key=lambda k: (values[k], -k))
    if len(active) > 1:
        flags.append("multiple_survivors")
    return result(best, flags, active, values)


def verify_gates(result: PedelResult, tol: float = GATE_TOL) -> list[tuple[int, int]]:
    """(epoch, h) pairs whose stored design condition fails on recomputation."""
    return [(g.epoch, g.h) for g in result.gates if not g.verify(tol)]
