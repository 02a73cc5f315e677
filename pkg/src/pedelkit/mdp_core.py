"""Finite linear MDPs, Markov policies, exact oracles and batched simulation.

Steps are zero-indexed throughout: ``h = 0`` is the first step of an episode
and ``h = H - 1`` the last.  ``mu[h]`` maps step-``h`` pairs to step ``h + 1``
states, so a horizon-``H`` MDP stores ``H - 1`` transition measures.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

PROB_TOL = 1e-9
NEG_CLAMP = 1e-12
NORM_TOL = 1e-12
DIST_TOL = 1e-12
CHUNK = 1 << 20


class ContractError(ValueError):
    """Raised when an operation is called outside its documented contract."""


# --------------------------------------------------------------------------
# linear MDP
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearMdp:
    """A d-dimensional linear MDP on finite state and action sets.

    ``phi[s, a]`` is the feature of pair ``(s, a)``, ``mu[h, s']`` the
    transition measure and ``theta[h]`` the mean-reward vector, so that
    ``P_h(s'|s,a) = <phi[s,a], mu[h,s']>`` and ``E r_h = <phi[s,a], theta[h]>``.
    ``step_states[h]`` lists the states that can occur at step ``h``; validity
    checks only look at those.
    """

    phi: np.ndarray
    mu: np.ndarray
    theta: np.ndarray
    start_state: int = 0
    step_states: tuple[tuple[int, ...], ...] | None = None
    action_mask: np.ndarray | None = None
    reward_noise: str = "bernoulli"
    state_names: tuple[str, ...] | None = None
    action_names: tuple[str, ...] | None = None
    name: str = "mdp"

    def __post_init__(self) -> None:
        phi = np.asarray(self.phi, dtype=float)
        theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        H = theta.shape[0]
        mu = np.asarray(self.mu, dtype=float).reshape(max(H - 1, 0), phi.shape[0], phi.shape[2])
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "mu", mu)
        if phi.ndim != 3:
            raise ContractError("phi must have shape (S, A, d)")
        if theta.shape[1] != phi.shape[2]:
            raise ContractError("theta dimension does not match phi")
        if self.reward_noise not in ("bernoulli", "deterministic"):
            raise ContractError(f"unknown reward_noise {self.reward_noise!r}")
        if not 0 <= self.start_state < phi.shape[0]:
            raise ContractError("start_state out of range")
        mask = np.ones(phi.shape[:2], dtype=bool) if self.action_mask is None else np.asarray(self.action_mask, bool)
        if mask.shape != phi.shape[:2] or not mask.any(axis=1).all():
            raise ContractError("action_mask must allow at least one action in every state")
        object.__setattr__(self, "action_mask", mask)
        if self.step_states is None:
            object.__setattr__(self, "step_states", self._reachable_supports())
        else:
            object.__setattr__(self, "step_states", tuple(tuple(int(s) for s in ss) for ss in self.step_states))
            if len(self.step_states) != H:
                raise ContractError("step_states must list H steps")
        for arr in (self.phi, self.mu, self.theta):
            arr.setflags(write=False)

    # -- shapes -------------------------------------------------------------
    @property
    def d(self) -> int:
        return self.phi.shape[2]

    @property
    def H(self) -> int:
        return self.theta.shape[0]

    @property
    def S(self) -> int:
        return self.phi.shape[0]

    @property
    def A(self) -> int:
        return self.phi.shape[1]

    # -- derived tables -----------------------------------------------------
    @cached_property
    def P(self) -> np.ndarray:
        """Transition table of shape (H-1, S, A, S), tiny negatives clamped."""
        P = np.einsum("sad,hpd->hsap", self.phi, self.mu)
        P[(P < 0) & (P >= -NEG_CLAMP)] = 0.0
        return P

    @cached_property
    def R(self) -> np.ndarray:
        """Mean reward table of shape (H, S, A)."""
        return np.einsum("sad,hd->hsa", self.phi, self.theta)

    @cached_property
    def uniform_table(self) -> np.ndarray:
        m = self.action_mask.astype(float)
        return m / m.sum(axis=1, keepdims=True)

    def _reachable_supports(self) -> tuple[tuple[int, ...], ...]:
        P = np.einsum("sad,hpd->hsap", self.phi, self.mu)
        cur = {self.start_state}
        out = [tuple(sorted(cur))]
        for h in range(self.H - 1):
            nxt: set[int] = set()
            for s in cur:
                rows = P[h, s][self.action_mask[s]]
                nxt.update(np.flatnonzero((rows > NEG_CLAMP).any(axis=0)).tolist())
            cur = nxt
            out.append(tuple(sorted(cur)))
        return tuple(out)

    # -- serialization ------------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "d": self.d,
            "H": self.H,
            "S": self.S,
            "A": self.A,
            "start_state": self.start_state,
            "states": [list(ss) for ss in self.step_states],
            "action_mask": _encode_array(self.action_mask.astype(np.uint8)),
            "phi": _encode_array(self.phi),
            "mu": _encode_array(self.mu),
            "theta": _encode_array(self.theta),
            "reward_noise": self.reward_noise,
            "state_names": list(self.state_names) if self.state_names else None,
            "action_names": list(self.action_names) if self.action_names else None,
            "name": self.name,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LinearMdp":
        doc = json.loads(text)
        return cls(
            phi=_decode_array(doc["phi"]),
            mu=_decode_array(doc["mu"]),
            theta=_decode_array(doc["theta"]),
            start_state=doc["start_state"],
            step_states=tuple(tuple(ss) for ss in doc["states"]),
            action_mask=_decode_array(doc["action_mask"]).astype(bool),
            reward_noise=doc["reward_noise"],
            state_names=tuple(doc["state_names"]) if doc.get("state_names") else None,
            action_names=tuple(doc["action_names"]) if doc.get("action_names") else None,
            name=doc.get("name", "mdp"),
        )


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    return {
        "dtype": arr.dtype.str,
        "shape": list(arr.shape),
        "b64": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["b64"])
    return np.frombuffer(raw, dtype=np.dtype(doc["dtype"])).reshape(doc["shape"]).copy()


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    bound: str
    where: str
    value: float
    limit: float

    def __str__(self) -> str:
        return f"{self.bound} at {self.where}: {self.value:.6g} vs limit {self.limit:.6g}"


def validate(mdp: LinearMdp) -> list[Violation]:
    """Check every linear-MDP normalization bound; return the violations found."""
    out: list[Violation] = []
    d = mdp.d
    sqrt_d = np.sqrt(d)
    norms = np.linalg.norm(mdp.phi, axis=2)
    for s, a in zip(*np.nonzero(mdp.action_mask)):
        n = norms[s, a]
        if n > 1 + NORM_TOL:
            out.append(Violation("phi-norm-upper", f"(s={s}, a={a})", n, 1.0))
        if n < 1 / sqrt_d - NORM_TOL:
            out.append(Violation("phi-norm-lower", f"(s={s}, a={a})", n, 1 / sqrt_d))
    for h in range(mdp.H):
        tn = np.linalg.norm(mdp.theta[h])
        if tn > sqrt_d + NORM_TOL:
            out.append(Violation("theta-norm", f"h={h}", tn, sqrt_d))
        for s in mdp.step_states[h]:
            for a in np.flatnonzero(mdp.action_mask[s]):
                r = float(mdp.phi[s, a] @ mdp.theta[h])
                if r < -NORM_TOL or r > 1 + NORM_TOL:
                    out.append(Violation("reward-range", f"(h={h}, s={s}, a={a})", r, 1.0))
    raw_P = np.einsum("sad,hpd->hsap", mdp.phi, mdp.mu)
    for h in range(mdp.H - 1):
        mass = np.linalg.norm(np.abs(mdp.mu[h]).sum(axis=0))
        if mass > sqrt_d + NORM_TOL * sqrt_d:
            out.append(Violation("mu-norm", f"h={h}", mass, sqrt_d))
        for s in mdp.step_states[h]:
            for a in np.flatnonzero(mdp.action_mask[s]):
                row = raw_P[h, s, a]
                if row.min() < -NEG_CLAMP:
                    out.append(Violation("negative-probability", f"(h={h}, s={s}, a={a})", row.min(), 0.0))
                tot = row.sum()
                if abs(tot - 1) > PROB_TOL:
                    out.append(Violation("simplex-sum", f"(h={h}, s={s}, a={a})", tot, 1.0))
    return out


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------


class Policy:
    """Base class; Markov policies expose a (H, S, A) probability table."""

    def table(self, mdp: LinearMdp) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def is_markov(self) -> bool:
        return True


def _check_rows(tab: np.ndarray) -> None:
    sums = tab.sum(axis=-1)
    defined = sums > 0
    if tab.min() < 0 or np.abs(sums[defined] - 1).max(initial=0.0) > DIST_TOL:
        raise ContractError("policy distributions must be nonnegative and sum to 1")


@dataclass(frozen=True, eq=False)
class DeterministicTable(Policy):
    """``actions[h, s]`` is the action played; ``-1`` marks an undefined entry."""

    actions: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=int))

    @property
    def is_undefined_anywhere(self) -> bool:
        return bool((self.actions < 0).any())

    def table(self, mdp: LinearMdp) -> np.ndarray:
        tab = np.zeros((mdp.H, mdp.S, mdp.A))
        hh, ss = np.nonzero(self.actions >= 0)
        tab[hh, ss, self.actions[hh, ss]] = 1.0
        return tab


@dataclass(frozen=True, eq=False)
class StochasticTable(Policy):
    """Explicit (H, S, A) table; all-zero rows mark undefined states."""

    probs: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        _check_rows(p)
        object.__setattr__(self, "probs", p)

    def table(self, mdp: LinearMdp) -> np.ndarray:
        return self.probs


@dataclass(frozen=True, eq=False)
class LinearSoftmax(Policy):
    """pi_h(a|s) proportional to exp(eta <phi(s,a), w_h>) on an allowed action set."""

    eta: float
    w: np.ndarray
    restricted: np.ndarray | None = None
    name: str = ""

    def table(self, mdp: LinearMdp) -> np.ndarray:
        allowed = mdp.action_mask if self.restricted is None else (mdp.action_mask & np.asarray(self.restricted, bool))
        logits = self.eta * np.einsum("sad,hd->hsa", mdp.phi, np.asarray(self.w, float))
        logits = np.where(allowed[None], logits, -np.inf)
        logits -= logits.max(axis=2, keepdims=True)
        ex = np.exp(logits)
        return ex / ex.sum(axis=2, keepdims=True)


@dataclass(frozen=True, eq=False)
class Mixture(Policy):
    """Draw one component per episode with the given weights."""

    components: tuple[tuple[float, Policy], ...]
    name: str = ""

    def __post_init__(self) -> None:
        comps = tuple((float(w), p) for w, p in self.components)
        ws = np.array([w for w, _ in comps])
        if len(comps) == 0 or ws.min() < 0 or abs(ws.sum() - 1) > DIST_TOL:
            raise ContractError("mixture weights must be nonnegative and sum to 1")
        object.__setattr__(self, "components", comps)

    @property
    def is_markov(self) -> bool:
        return False

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])


def uniform_policy(mdp: LinearMdp) -> StochasticTable:
    return StochasticTable(np.broadcast_to(mdp.uniform_table, (mdp.H, mdp.S, mdp.A)).copy(), name="uniform")


def policy_table(mdp: LinearMdp, policy: Policy) -> np.ndarray:
    if not policy.is_markov:
        raise ContractError("mixture policies have no single Markov table")
    return policy.table(mdp)


# --------------------------------------------------------------------------
# exact oracles
# --------------------------------------------------------------------------


def occupancy(mdp: LinearMdp, policy: Policy) -> np.ndarray:
    """Pr_pi[s_h = s, a_h = a] as an (H, S, A) array (forward DP)."""
    if isinstance(policy, Mixture):
        return sum(w * occupancy(mdp, p) for w, p in policy.components)
    tab = policy.table(mdp)
    q = np.zeros((mdp.H, mdp.S, mdp.A))
    dist = np.zeros(mdp.S)
    dist[mdp.start_state] = 1.0
    for h in range(mdp.H):
        q[h] = dist[:, None] * tab[h]
        if h < mdp.H - 1:
            dist = np.einsum("sa,sap->p", q[h], mdp.P[h])
    return q


def exact_feature_visitation(mdp: LinearMdp, policy: Policy) -> np.ndarray:
    """phi_{pi,h} = E_pi[phi(s_h, a_h)] for every step, shape (H, d)."""
    return np.einsum("hsa,sad->hd", occupancy(mdp, policy), mdp.phi)


def exact_covariance(mdp: LinearMdp, policy: Policy, h: int) -> np.ndarray:
    """Lambda_{pi,h} = E_pi[phi phi^T] at step h."""
    q = occupancy(mdp, policy)[h]
    return np.einsum("sa,sad,sae->de", q, mdp.phi, mdp.phi)


def exact_policy_value(mdp: LinearMdp, policy: Policy) -> float:
    """Sum over steps of <phi_{pi,h}, theta_h>."""
    return float(np.einsum("hd,hd->", exact_feature_visitation(mdp, policy), mdp.theta))


def bellman_value(mdp: LinearMdp, policy: Policy, reward: np.ndarray | None = None) -> float:
    """Backward-DP policy evaluation, independent of the forward recursion."""
    if isinstance(policy, Mixture):
        return float(sum(w * bellman_value(mdp, p, reward) for w, p in policy.components))
    R = mdp.R if reward is None else reward
    tab = policy.table(mdp)
    V = np.zeros(mdp.S)
    for h in reversed(range(mdp.H)):
        Q = R[h] + (mdp.P[h] @ V if h < mdp.H - 1 else 0.0)
        V = (tab[h] * Q).sum(axis=1)
    return float(V[mdp.start_state])


def optimal_policy(mdp: LinearMdp, reward: np.ndarray | None = None, horizon: int | None = None) -> tuple[DeterministicTable, float]:
    """Greedy backward DP for a reward table; ties go to the lowest action index.

    ``horizon`` truncates the problem after that many steps; later steps play
    the first allowed action (any choice is optimal there).
    """
    R = mdp.R if reward is None else np.asarray(reward, float)
    H_eff = mdp.H if horizon is None else horizon
    acts = np.zeros((mdp.H, mdp.S), dtype=int)
    acts[:] = np.argmax(mdp.action_mask, axis=1)
    V = np.zeros(mdp.S)
    for h in reversed(range(H_eff)):
        Q = R[h] + (mdp.P[h] @ V if h < H_eff - 1 else 0.0)
        Q = np.where(mdp.action_mask, Q, -np.inf)
        acts[h] = np.argmax(Q, axis=1)
        V = Q[np.arange(mdp.S), acts[h]]
    return DeterministicTable(acts, name="greedy"), float(V[mdp.start_state])


# --------------------------------------------------------------------------
# simulation
# --------------------------------------------------------------------------


@dataclass
class EpisodeLog:
    """One episode: per-step state, action, feature, reward and next state.

    ``next_states[H-1]`` is -1.  Steps after ``truncated_at`` used uniform
    actions and must not enter any design covariance.
    """

    states: np.ndarray
    actions: np.ndarray
    features: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    truncated_at: int | None = None

    def usable_steps(self) -> range:
        H = len(self.states)
        return range(H if self.truncated_at is None else self.truncated_at + 1)


@dataclass
class Trajectories:
    """A batch of n episodes stored column-wise, shapes (n, H)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    truncated_at: int | None = None
    component: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def features(self, mdp_or_phi, h: int) -> np.ndarray:
        phi = mdp_or_phi.phi if hasattr(mdp_or_phi, "phi") else mdp_or_phi
        return phi[self.states[:, h], self.actions[:, h]]

    def covariance(self, phi: np.ndarray, h: int) -> np.ndarray:
        if self.truncated_at is not None and h > self.truncated_at:
            raise ContractError("steps after the truncation point are excluded from covariances")
        f = phi[self.states[:, h], self.actions[:, h]]
        return f.T @ f

    def episode(self, i: int, phi: np.ndarray) -> EpisodeLog:
        return EpisodeLog(
            states=self.states[i].copy(),
            actions=self.actions[i].copy(),
            features=phi[self.states[i], self.actions[i]],
            rewards=self.rewards[i].copy(),
            next_states=self.next_states[i].copy(),
            truncated_at=self.truncated_at,
        )

    @staticmethod
    def concat(parts: Sequence["Trajectories"]) -> "Trajectories":
        parts = [p for p in parts if p.n > 0] or list(parts[:1])
        trunc = {p.truncated_at for p in parts}
        return Trajectories(
            states=np.concatenate([p.states for p in parts]),
            actions=np.concatenate([p.actions for p in parts]),
            rewards=np.concatenate([p.rewards for p in parts]),
            next_states=np.concatenate([p.next_states for p in parts]),
            truncated_at=trunc.pop() if len(trunc) == 1 else None,
        )


@dataclass
class StepCounts:
    """Sufficient statistics of the step-h data: visit, transition and reward tallies.

    ``trans[s, a, s']`` counts step-h transitions (all zero at the last step),
    ``visits[s, a]`` counts step-h pairs and ``reward_sums[s, a]`` totals the
    observed rewards.  Every linear estimator of the step-h data is a function
    of these arrays.
    """

    h: int
    visits: np.ndarray
    trans: np.ndarray
    reward_sums: np.ndarray

    @property
    def n(self) -> int:
        return int(self.visits.sum())

    @classmethod
    def empty(cls, S: int, A: int, h: int) -> "StepCounts":
        return cls(h, np.zeros((S, A), np.int64), np.zeros((S, A, S), np.int64), np.zeros((S, A)))

    @classmethod
    def from_trajectories(cls, traj: Trajectories, h: int, S: int, A: int) -> "StepCounts":
        if traj.truncated_at is not None and traj.truncated_at < h:
            raise ContractError(f"step {h} lies past the truncation point {traj.truncated_at}")
        out = cls.empty(S, A, h)
        if traj.n == 0:
            return out
        s, a = traj.states[:, h], traj.actions[:, h]
        np.add.at(out.visits, (s, a), 1)
        np.add.at(out.reward_sums, (s, a), traj.rewards[:, h])
        nxt = traj.next_states[:, h]
        ok = nxt >= 0
        np.add.at(out.trans, (s[ok], a[ok], nxt[ok]), 1)
        return out

    def add(self, other: "StepCounts") -> "StepCounts":
        if other.h != self.h:
            raise ContractError("cannot merge counts from different steps")
        self.visits += other.visits
        self.trans += other.trans
        self.reward_sums += other.reward_sums
        return self

    @classmethod
    def merge(cls, parts: Sequence["StepCounts"]) -> "StepCounts":
        first = parts[0]
        out = cls(first.h, first.visits.copy(), first.trans.copy(), first.reward_sums.copy())
        for p in parts[1:]:
            out.add(p)
        return out

    def covariance(self, phi: np.ndarray, h: int | None = None) -> np.ndarray:
        if h is not None and h != self.h:
            raise ContractError(f"counts hold step {self.h}, not {h}")
        return np.einsum("sa,sad,sae->de", self.visits, phi, phi)


def sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of one index per row; never lands on a zero entry."""
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf <= u[:, None] * cdf[:, -1:]).sum(axis=1)
    idx = np.minimum(idx, probs.shape[1] - 1)
    bad = probs[np.arange(len(idx)), idx] <= 0
    if bad.any():
        last = probs.shape[1] - 1 - np.argmax(probs[bad][:, ::-1] > 0, axis=1)
        idx[bad] = last
    return idx


def simulate_batch(
    mdp: LinearMdp,
    policy: Policy,
    n: int,
    rng: np.random.Generator,
    truncate_at: int | None = None,
    tail: bool = True,
) -> Trajectories:
    """Sample n independent episodes.

    With ``truncate_at = h`` the policy is followed up to and including step h
    and uniform actions are taken afterwards.  ``tail=False`` skips simulating
    those uniform steps and marks them with -1; the step-h transition is still
    drawn and logged.
    """
    H = mdp.H
    if isinstance(policy, DeterministicTable) and not policy.is_undefined_anywhere:
        return _simulate_deterministic(mdp, policy, n, rng, truncate_at, tail)
    if isinstance(policy, Mixture):
        comp = rng.choice(len(policy.components), size=n, p=policy.weights)
        tables = np.stack([p.table(mdp) for _, p in policy.components])
    else:
        comp = None
        tables = policy.table(mdp)[None]
    states = np.empty((n, H), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    rewards = np.empty((n, H))
    nxt = np.full((n, H), -1, dtype=np.int64)
    s = np.full(n, mdp.start_state, dtype=np.int64)
    ci = np.zeros(n, dtype=np.int64) if comp is None else comp
    uni = mdp.uniform_table
    last = H - 1 if (tail or truncate_at is None) else min(truncate_at, H - 1)
    if last < H - 1:
        states[:, last + 1:] = -1
        actions[:, last + 1:] = -1
        rewards[:, last + 1:] = 0.0
    for h in range(last + 1):
        states[:, h] = s
        if truncate_at is not None and h > truncate_at:
            probs = uni[s]
        else:
            probs = tables[ci, h, s]
        if (probs.sum(axis=1) <= 0).any():
            bad = int(s[probs.sum(axis=1) <= 0][0])
            raise ContractError(f"policy undefined at reached state {bad} (step {h})")
        a = sample_rows(probs, rng.random(n))
        actions[:, h] = a
        mean_r = mdp.R[h, s, a]
        if mdp.reward_noise == "bernoulli":
            rewards[:, h] = (rng.random(n) < mean_r).astype(float)
        else:
            rewards[:, h] = mean_r
        if h < H - 1:
            s = sample_rows(mdp.P[h, s, a], rng.random(n))
            nxt[:, h] = s
    return Trajectories(states, actions, rewards, nxt, truncated_at=truncate_at, component=comp)


def _simulate_deterministic(mdp, policy, n, rng, truncate_at, tail) -> Trajectories:
    H = mdp.H
    acts_tab = policy.actions
    states = np.full((n, H), -1, dtype=np.int64)
    actions = np.full((n, H), -1, dtype=np.int64)
    rewards = np.zeros((n, H))
    nxt = np.full((n, H), -1, dtype=np.int64)
    s = np.full(n, mdp.start_state, dtype=np.int64)
    last = H - 1 if (tail or truncate_at is None) else min(truncate_at, H - 1)
    uni = mdp.uniform_table
    for h in range(last + 1):
        states[:, h] = s
        if truncate_at is not None and h > truncate_at:
            a = sample_rows(uni[s], rng.random(n))
        else:
            a = acts_tab[h, s]
        actions[:, h] = a
        mean_r = mdp.R[h, s, a]
        if mdp.reward_noise == "bernoulli":
            rewards[:, h] = (rng.random(n) < mean_r).astype(float)
        else:
            rewards[:, h] = mean_r
        if h < H - 1:
            s = sample_rows(mdp.P[h, s, a], rng.random(n))
            nxt[:, h] = s
    return Trajectories(states, actions, rewards, nxt, truncated_at=truncate_at)


def simulate(mdp: LinearMdp, policy: Policy, rng_seed: int, truncate_at: int | None = None) -> EpisodeLog:
    """One episode; a pure function of its arguments."""
    traj = simulate_batch(mdp, policy, 1, np.random.default_rng(rng_seed), truncate_at)
    return traj.episode(0, mdp.phi)


class EnvSampler:
    """Episode-level access to an MDP that counts every episode run.

    Learners receive the feature map and horizon from the sampler but never the
    dynamics; the ``mdp`` attribute is reserved for known-dynamics modes.
    """

    def __init__(self, mdp: LinearMdp, rng: np.random.Generator | int, cap: int | None = None,
                 tail: bool = False):
        self.mdp = mdp
        self.tail = tail
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.episodes = 0
        self.cap = cap

    @property
    def phi(self) -> np.ndarray:
        return self.mdp.phi

    @property
    def H(self) -> int:
        return self.mdp.H

    @property
    def d(self) -> int:
        return self.mdp.d

    @property
    def remaining(self) -> float:
        return np.inf if self.cap is None else self.cap - self.episodes

    def run(self, policy: Policy, n: int, truncate_at: int | None = None) -> Trajectories:
        if self.cap is not None and self.episodes + n > self.cap:
            raise BudgetExhausted(self.episodes, self.cap)
        self.episodes += n
        return simulate_batch(self.mdp, policy, n, self.rng, truncate_at, tail=self.tail)

    def run_counts(self, policy: Policy, n: int, h: int, truncate_at: int | None = None,
                   chunk: int = CHUNK) -> StepCounts:
        """Run n episodes in bounded-memory chunks, keeping only step-h tallies."""
        if self.cap is not None and self.episodes + n > self.cap:
            raise BudgetExhausted(self.episodes, self.cap)
        S, A = self.mdp.S, self.mdp.A
        out = StepCounts.empty(S, A, h)
        done = 0
        while done < n:
            m = min(chunk, n - done)
            traj = simulate_batch(self.mdp, policy, m, self.rng, truncate_at, tail=self.tail)
            out.add(StepCounts.from_trajectories(traj, h, S, A))
            done += m
        self.episodes += n
        return out


class BudgetExhausted(RuntimeError):
    def __init__(self, used: int, cap: int):
        super().__init__(f"episode cap {cap} reached after {used} episodes")
        self.used = used
        self.cap = cap


def step_feature_policy(mdp_phi: np.ndarray, table_h: np.ndarray) -> np.ndarray:
    """phi_{pi,h}(s) = E_{a ~ pi_h(.|s)} phi(s, a), shape (S, d)."""
    return np.einsum("sa,sad->sd", table_h, mdp_phi)


def chi2_homogeneity(counts_a: Iterable[int], counts_b: Iterable[int]) -> float:
    """p-value of a two-sample chi-square homogeneity test on category counts."""
    from scipy.stats import chi2_contingency

    tab = np.array([list(counts_a), list(counts_b)], dtype=float)
    keep = tab.sum(axis=0) > 0
    if keep.sum() < 2:
        return 1.0
    return float(chi2_contingency(tab[:, keep])[1])
