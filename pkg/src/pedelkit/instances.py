"""Benchmark environments: the hard linear bandit and its MDP embedding,
tabular encodings, deterministic chains and random simplex-feature MDPs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp_core import (
    ContractError,
    DeterministicTable,
    LinearMdp,
    Mixture,
)


CONSTRAINT_RTOL = 1e-12


class ParameterError(ContractError):
    """A hard-instance parameter violates one of the construction inequalities."""


@dataclass(frozen=True)
class HardInstanceParams:
    d: int
    Delta: float
    xi: float
    gamma: float
    alpha: float
    C1: float
    C2: float
    faithful: bool = True

    @property
    def zeta(self) -> float:
        return zeta_value(self.d, self.Delta, self.alpha, self.C1, self.C2)

    def constraint_report(self) -> dict[str, bool]:
        """Each inequality of the hard-instance constraint set, up to rounding.

        At the Delta cap xi = sqrt(Delta) holds with equality, so each side
        gets a relative slack of CONSTRAINT_RTOL.
        """
        d, xi, g, D = self.d, self.xi, self.gamma, self.Delta

        def le(a, b):
            return a <= b * (1 + CONSTRAINT_RTOL)

        return {
            "xi <= 1/(52d)": le(xi, 1 / (52 * d)),
            "xi >= gamma/sqrt(d)": le(g / np.sqrt(d), xi),
            "xi >= sqrt(Delta)": le(np.sqrt(D), xi),
            "zeta <= gamma^2": le(self.zeta, g * g),
            "Delta <= gamma^2": le(D, g * g),
        }


def zeta_value(d: int, Delta: float, alpha: float, C1: float, C2: float) -> float:
    """zeta = 2 C1 / (d/Delta^2)^(1-alpha) + 2 C2 Delta^2 / d."""
    return 2 * C1 / (d / Delta**2) ** (1 - alpha) + 2 * C2 * Delta**2 / d


def delta_upper_bound(d: int, alpha: float, C1: float, C2: float) -> dict[str, float]:
    return {
        "Delta <= 1/(2704 d^2)": 1 / (2704 * d**2),
        "Delta <= sqrt(1/(10816 C2))": np.sqrt(1 / (10816 * C2)) if C2 > 0 else np.inf,
        "Delta <= (1/(10816 d^alpha C1))^(1/(2(1-alpha)))": (
            (1 / (10816 * d**alpha * C1)) ** (1 / (2 * (1 - alpha))) if C1 > 0 else np.inf
        ),
    }


@dataclass(frozen=True)
class HardBandit:
    """Arms Z (rows), theta_star = e_1; arm 0 is the optimum xi e_1.

    Row layout: 0 -> xi e_1, 1..d-1 -> e_2..e_d, d..2d-2 -> x_2..x_d.
    """

    Z: np.ndarray
    theta_star: np.ndarray
    params: HardInstanceParams

    @property
    def d(self) -> int:
        return self.params.d

    @property
    def means(self) -> np.ndarray:
        """Bernoulli success probabilities <theta*, z> + 1/2."""
        return self.Z @ self.theta_star + 0.5

    @property
    def gaps(self) -> np.ndarray:
        v = self.Z @ self.theta_star
        return v.max() - v

    @property
    def arm_names(self) -> list[str]:
        d = self.d
        return ["xi*e1"] + [f"e{i}" for i in range(2, d + 1)] + [f"x{i}" for i in range(2, d + 1)]

    def pull(self, arms: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return (rng.random(len(arms)) < self.means[arms]).astype(int)


def _arms(d: int, xi: float, Delta: float, gamma: float) -> np.ndarray:
    Z = np.zeros((2 * d - 1, d))
    Z[0, 0] = xi
    for i in range(1, d):
        Z[i, i] = 1.0
        Z[d - 1 + i, 0] = xi - Delta
        Z[d - 1 + i, i] = gamma
    return Z


def make_hard_bandit(d: int, Delta: float, alpha: float = 0.5, C1: float = 1.0, C2: float = 1.0) -> HardBandit:
    """Hard instance with xi = 1/(52 d) and gamma^2 = max(zeta, d Delta).

    Raises ParameterError naming the first violated inequality.
    """
    if d < 2:
        raise ParameterError("d must be at least 2")
    if not 0 <= alpha < 1:
        raise ParameterError("alpha must lie in [0, 1)")
    for name, bound in delta_upper_bound(d, alpha, C1, C2).items():
        if Delta > bound:
            raise ParameterError(f"violates {name}: Delta={Delta:g} > {bound:g}")
    xi = 1 / (52 * d)
    z = zeta_value(d, Delta, alpha, C1, C2)
    gamma = float(np.sqrt(max(z, d * Delta)))
    params = HardInstanceParams(d, Delta, xi, gamma, alpha, C1, C2)
    failed = [k for k, ok in params.constraint_report().items() if not ok]
    if failed:
        raise ParameterError(f"violates {failed[0]}")
    Z = _arms(d, xi, Delta, gamma)
    if np.linalg.norm(Z, axis=1).max() > 1 + 1e-12:
        raise ParameterError("violates ||z|| <= 1")
    return HardBandit(Z, np.eye(d)[0], params)


def make_scaled_hard_bandit(d: int, Delta: float, xi: float, gamma: float) -> HardBandit:
    """Desk-scale variant with the same arm geometry but free (xi, Delta, gamma).

    Only the conditions needed for a valid bandit are enforced; the result is
    flagged non-faithful because the low-regret constraint set is not imposed.
    """
    if not (0 < Delta < xi <= 0.5):
        raise ParameterError("need 0 < Delta < xi <= 1/2")
    Z = _arms(d, xi, Delta, gamma)
    if np.linalg.norm(Z, axis=1).max() > 1 + 1e-12:
        raise ParameterError("violates ||z|| <= 1")
    params = HardInstanceParams(d, Delta, xi, gamma, 0.5, 1.0, 1.0, faithful=False)
    return HardBandit(Z, np.eye(d)[0], params)


# --------------------------------------------------------------------------
# MDP embedding
# --------------------------------------------------------------------------


def embed_bandit_as_mdp(bandit: HardBandit, reward_noise: str = "bernoulli") -> LinearMdp:
    """Two-step MDP in dimension d+1 whose step-1 transition encodes the bandit.

    States: 0 = s0, 1 = s1, 2..d+1 = sbar_2..sbar_{d+1}.
    Actions: the arms of Z in order, then e_{d+1}/2 as the last action.
    """
    d = bandit.d
    D = d + 1
    S = d + 2
    Z = bandit.Z
    nA = Z.shape[0] + 1
    phi = np.zeros((S, nA, D))
    phi[0, : Z.shape[0], :d] = Z / 2
    phi[0, : Z.shape[0], d] = 0.5
    phi[0, nA - 1, d] = 0.5
    phi[1, :, 0] = 1.0
    for i in range(1, d + 1):
        phi[1 + i, :, i] = 1.0
    ts = np.concatenate([bandit.theta_star, [0.0]])
    mu = np.zeros((1, S, D))
    mu[0, 1] = 2 * ts
    mu[0, 1, d] = 1.0
    for i in range(1, d + 1):
        mu[0, 1 + i] = -2 * ts / d
        mu[0, 1 + i, d] = 1 / d
    theta = np.zeros((2, D))
    theta[1, 0] = 1.0
    state_names = ("s0", "s1") + tuple(f"sbar{i}" for i in range(2, d + 2))
    action_names = tuple(bandit.arm_names) + (f"e{d + 1}/2",)
    return LinearMdp(
        phi=phi,
        mu=mu,
        theta=theta,
        start_state=0,
        step_states=((0,), tuple(range(1, S))),
        reward_noise=reward_noise,
        state_names=state_names,
        action_names=action_names,
        name=f"hard(d={d})",
    )


def hard_instance_policy_set(mdp: LinearMdp, distinct: bool = False) -> list[DeterministicTable]:
    """Policies pi^{z,z'}: z at s0 on step 1, z' at s0 on step 2, arm 0 elsewhere.

    s0 is unreachable on step 2, so policies sharing z are value-identical;
    ``distinct=True`` keeps one representative per z.
    """
    nA = mdp.A
    out = []
    seconds = [0] if distinct else range(nA)
    for z in range(nA):
        for z2 in seconds:
            acts = np.zeros((mdp.H, mdp.S), dtype=int)
            acts[0, 0] = z
            acts[1, 0] = z2
            name = f"pi[{mdp.action_names[z]}]" if distinct else f"pi[{mdp.action_names[z]},{mdp.action_names[z2]}]"
            out.append(DeterministicTable(acts, name=name))
    return out


def exploration_mixture(mdp: LinearMdp) -> Mixture:
    """Exploration preset with weight ratios 1 : 1 : 1/(d-1) on xi e_1, the
    e_{d+1} action and each e_i, normalized to sum to one."""
    nA = mdp.A
    d = mdp.d - 1
    w = np.zeros(nA)
    w[0] = 0.25
    w[nA - 1] = 0.25
    w[1:d] = 0.25 / (d - 1)
    w /= w.sum()
    comps = []
    for a in np.flatnonzero(w):
        acts = np.zeros((mdp.H, mdp.S), dtype=int)
        acts[0, 0] = a
        comps.append((float(w[a]), DeterministicTable(acts)))
    return Mixture(tuple(comps), name="exploration-mixture")


def bandit_protocol_next_states(bandit: HardBandit, actions: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Step-2 state produced by driving the MDP with bandit pulls.

    Arm actions go to s1 when the pull succeeds and to a uniform sbar state
    otherwise; the extra action ignores the pull and moves to s1 w.p. 1/2.
    """
    d = bandit.d
    n = len(actions)
    extra = actions == bandit.Z.shape[0]
    y = np.zeros(n, dtype=int)
    arm = ~extra
    y[arm] = bandit.pull(actions[arm], rng)
    y[extra] = (rng.random(extra.sum()) < 0.5).astype(int)
    bar = 2 + rng.integers(0, d, size=n)
    return np.where(y == 1, 1, bar)


# --------------------------------------------------------------------------
# tabular and deterministic encodings
# --------------------------------------------------------------------------


def encode_tabular(
    S: int,
    A: int,
    H: int,
    P: np.ndarray,
    r: np.ndarray,
    start_state: int = 0,
    reward_noise: str = "bernoulli",
    name: str = "tabular",
) -> LinearMdp:
    """Indicator-feature encoding with d = S*A.

    ``P`` may have H or H-1 leading entries (a trailing step is ignored);
    ``r`` has shape (H, S, A) with values in [0, 1].
    """
    P = np.asarray(P, float)
    r = np.asarray(r, float)
    if P.shape[0] == H:
        P = P[: H - 1]
    if P.shape != (H - 1, S, A, S) or r.shape != (H, S, A):
        raise ContractError("P must be (H-1, S, A, S) and r must be (H, S, A)")
    d = S * A
    phi = np.eye(d).reshape(S, A, d)
    mu = P.reshape(H - 1, d, S).transpose(0, 2, 1)
    theta = r.reshape(H, d)
    return LinearMdp(phi=phi, mu=mu, theta=theta, start_state=start_state, reward_noise=reward_noise, name=name)


def tabular_value_iteration(P: np.ndarray, r: np.ndarray, policy_table: np.ndarray, start_state: int = 0) -> float:
    """Classic tabular policy evaluation, kept free of any feature algebra."""
    H = r.shape[0]
    V = np.zeros(r.shape[1])
    for h in reversed(range(H)):
        Q = r[h] + (np.einsum("sap,p->sa", P[h], V) if h < H - 1 else 0)
        V = (policy_table[h] * Q).sum(axis=1)
    return float(V[start_state])


def random_tabular(S: int, A: int, H: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    P = rng.dirichlet(np.ones(S), size=(H - 1, S, A))
    r = rng.random((H, S, A))
    return P, r


def make_deterministic_mdp(next_state: np.ndarray, reward: np.ndarray, start_state: int = 0, name: str = "deterministic") -> LinearMdp:
    """Tabular encoding of a deterministic MDP given ``next_state[h, s, a]``."""
    H, S, A = reward.shape
    P = np.zeros((H - 1, S, A, S))
    for h in range(H - 1):
        hh = next_state[h]
        P[h, np.arange(S)[:, None], np.arange(A)[None, :], hh] = 1.0
    return encode_tabular(S, A, H, P, reward, start_state=start_state, reward_noise="deterministic", name=name)


def make_chain(S: int, H: int, eps: float = 0.1) -> LinearMdp:
    """The gap-visitation chain M1 on S states and S actions.

    Action 0 at state 0 loops with reward 1; action i > 0 moves to state i
    from anywhere; at state i > 0 action 0 stays and pays eps.
    """
    if S < 2 or not 0 <= eps < 1:
        raise ContractError("need S >= 2 and eps in [0, 1)")
    A = S
    nxt = np.zeros((H, S, A), dtype=int)
    rew = np.zeros((H, S, A))
    for s in range(S):
        for a in range(A):
            nxt[:, s, a] = a if a > 0 else s
    rew[:, 0, 0] = 1.0
    rew[:, 1:, 0] = eps
    return make_deterministic_mdp(nxt, rew, name=f"chain(S={S},H={H})")


def make_gap_vis_instances(S: int = 4, H: int = 3, eps: float = 0.1, seed: int = 0) -> tuple[LinearMdp, LinearMdp]:
    """Return (M1, M2).

    M1 is the chain of :func:`make_chain`.  M2 is an approximate stand-in: a
    tabular MDP with action-independent uniform transitions and a single
    eps-separated rewarding action per state.  Its name carries the
    ``approximate`` tag.
    """
    m1 = make_chain(S, H, eps)
    rng = np.random.default_rng(seed)
    P = np.full((H - 1, S, S, S), 1.0 / S)
    r = np.full((H, S, S), 0.5)
    best = rng.integers(0, S, size=(H, S))
    for h in range(H):
        r[h, np.arange(S), best[h]] += eps
    m2 = encode_tabular(S, S, H, P, r, name=f"gapvis-M2-approximate(S={S})")
    return m1, m2


def make_simplex_mdp(d: int, S: int, A: int, H: int, seed: int = 0, concentration: float = 1.0) -> LinearMdp:
    """Random linear MDP with features on the probability simplex.

    Each feature is a Dirichlet draw, each latent coordinate owns a next-state
    distribution, and rewards are convex combinations of [0, 1] values.
    """
    rng = np.random.default_rng(seed)
    phi = rng.dirichlet(np.full(d, concentration), size=(S, A))
    mu = rng.dirichlet(np.ones(S), size=(H - 1, d)).transpose(0, 2, 1)
    theta = rng.random((H, d))
    return LinearMdp(phi=phi, mu=mu, theta=theta, name=f"simplex(d={d},S={S},A={A},H={H})")


def all_deterministic_policies(mdp: LinearMdp, limit: int = 100_000) -> list[DeterministicTable]:
    """Enumerate deterministic policies over the step supports (small MDPs only)."""
    slots = [(h, s) for h in range(mdp.H) for s in mdp.step_states[h]]
    choices = [np.flatnonzero(mdp.action_mask[s]) for _, s in slots]
    total = int(np.prod([len(c) for c in choices], dtype=float))
    if total > limit:
        raise ContractError(f"{total} deterministic policies exceed the limit {limit}")
    out = []
    for idx in np.ndindex(*[len(c) for c in choices]):
        acts = np.zeros((mdp.H, mdp.S), dtype=int)
        for (h, s), c, i in zip(slots, choices, idx):
            acts[h, s] = c[i]
        out.append(DeterministicTable(acts))
    return out

