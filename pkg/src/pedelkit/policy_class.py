"""Finite policy classes: explicit lists and restricted-action linear-softmax nets.

A softmax class is indexed by per-step weight vectors drawn from a grid net of
the ball of radius 2H sqrt(d).  Each state's action set is first thinned to a
greedy cover of its feature vectors, so near-duplicate actions share mass.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp_core import (
    ContractError,
    DeterministicTable,
    LinearMdp,
    LinearSoftmax,
    Policy,
    StochasticTable,
    _decode_array,
    _encode_array,
)


class CardinalityError(ContractError):
    """A theory-mode class would exceed the size cap."""

    def __init__(self, log_cardinality: float, cap: int):
        self.log_cardinality = log_cardinality
        self.cap = cap
        super().__init__(
            f"policy class cardinality exp({log_cardinality:.6g}) ~ 10^{log_cardinality / math.log(10):.4g} "
            f"exceeds cap {cap}"
        )


# --------------------------------------------------------------------------
# action cover
# --------------------------------------------------------------------------


def cover_radius(delta_cover: float, H: int, d: int) -> float:
    """Greedy selection radius delta/(4 H sqrt(d))."""
    return delta_cover / (4 * H * math.sqrt(d))


def cover_guarantee(delta_cover: float, H: int, d: int) -> float:
    """Every action lies within delta/(2 H sqrt(d)) of a covering action."""
    return delta_cover / (2 * H * math.sqrt(d))


def cover_bound(delta_cover: float, H: int, d: int) -> float:
    """Cardinality bound (1 + 8 H sqrt(d) / delta)^d on each state's cover."""
    return (1 + 8 * H * math.sqrt(d) / delta_cover) ** d


def greedy_cover(features: np.ndarray, radius: float, order: np.ndarray | None = None) -> list[int]:
    """Indices of a greedy cover: scan ``order``, keep a point unless one kept is within ``radius``."""
    X = np.asarray(features, float)
    idx = np.arange(len(X)) if order is None else np.asarray(order)
    kept: list[int] = []
    for i in idx:
        if kept and np.min(np.linalg.norm(X[kept] - X[i], axis=1)) <= radius:
            continue
        kept.append(int(i))
    return sorted(kept)


def build_action_cover(mdp: LinearMdp, delta_cover: float, seed: int = 0) -> np.ndarray:
    """Boolean (S, A) mask of covering actions per state.

    The scan order is a seeded shuffle of each state's available actions.
    """
    if delta_cover <= 0:
        raise ContractError("delta_cover must be positive")
    rng = np.random.default_rng(seed)
    r = cover_radius(delta_cover, mdp.H, mdp.d)
    mask = np.zeros((mdp.S, mdp.A), bool)
    for s in range(mdp.S):
        avail = np.flatnonzero(mdp.action_mask[s])
        order = rng.permutation(avail)
        kept = greedy_cover(mdp.phi[s], r, order)
        mask[s, kept] = True
    return mask


def cover_gap(mdp: LinearMdp, cover: np.ndarray) -> float:
    """Largest distance from an available action's feature to its nearest covering feature."""
    worst = 0.0
    for s in range(mdp.S):
        avail = np.flatnonzero(mdp.action_mask[s])
        kept = np.flatnonzero(cover[s])
        if len(avail) == 0:
            continue
        if len(kept) == 0:
            return math.inf
        D = np.linalg.norm(mdp.phi[s, avail][:, None] - mdp.phi[s, kept][None], axis=2)
        worst = max(worst, float(D.min(axis=1).max()))
    return worst


# --------------------------------------------------------------------------
# softmax
# --------------------------------------------------------------------------


def softmax_policy_probs(
    phi: np.ndarray, w: np.ndarray, eta: float, restricted: np.ndarray, s: int, h: int
) -> np.ndarray:
    """pi_h(a|s) proportional to exp(eta <phi(s,a), w_h>) on the restricted actions of s."""
    allowed = np.asarray(restricted, bool)[s]
    if not allowed.any():
        raise ContractError(f"state {s} has an empty restricted action set")
    logits = eta * (phi[s] @ np.asarray(w, float)[h])
    logits = np.where(allowed, logits, -np.inf)
    logits = logits - logits[allowed].max()
    ex = np.exp(logits)
    return ex / ex.sum()


# --------------------------------------------------------------------------
# theory-level sizes
# --------------------------------------------------------------------------


def theory_eta(d: int, H: int, eps: float) -> float:
    """Smallest temperature the softmax approximation argument asks for."""
    return 2 * d * H * math.log(1 + 16 * H * d / eps) * (3 * math.sqrt(d)) ** H / eps


def weight_radius(d: int, H: int) -> float:
    return 2 * H * math.sqrt(d)


def net_resolution(d: int, H: int, eps: float, eta: float) -> float:
    return eps / (4 * d * H * H * eta)


def theory_log_cardinality(d: int, H: int, eps: float) -> float:
    """log of (1 + 32 H^4 d^{5/2} log(1 + 16 H d / eps) / eps^2)^{d H^2}."""
    inner = 1 + 32 * H**4 * d**2.5 * math.log(1 + 16 * H * d / eps) / eps**2
    return d * H * H * math.log(inner)


def net_log_cardinality(d: int, H: int, eps: float, eta: float) -> float:
    """log of the covering-number bound (1 + 2R/r)^{dH} for the per-step weight nets."""
    ratio = 2 * weight_radius(d, H) / net_resolution(d, H, eps, eta)
    return d * H * math.log1p(ratio)


def grid_spacing(resolution: float, d: int) -> float:
    """Cubic spacing whose cells have half-diagonal equal to ``resolution``."""
    return 2 * resolution / math.sqrt(d)


def grid_net(radius: float, resolution: float, d: int, limit: int = 1_000_000) -> np.ndarray:
    """All cubic grid points within radius + resolution of the origin.

    Every point of the radius ball lies within ``resolution`` of some row.
    """
    step = grid_spacing(resolution, d)
    m = math.ceil((radius + resolution) / step)
    if (2 * m + 1) ** d > limit:
        raise CardinalityError(d * math.log(2 * m + 1), limit)
    axis = np.arange(-m, m + 1) * step
    pts = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return pts[np.linalg.norm(pts, axis=1) <= radius + resolution + 1e-12]


def sample_grid_points(radius: float, resolution: float, d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n grid points drawn uniformly (with replacement) among those in the enlarged ball."""
    step = grid_spacing(resolution, d)
    m = math.ceil((radius + resolution) / step)
    out = np.empty((0, d))
    while len(out) < n:
        k = rng.integers(-m, m + 1, size=(max(2 * n, 16), d)) * step
        k = k[np.linalg.norm(k, axis=1) <= radius + resolution + 1e-12]
        out = np.vstack([out, k])
    return out[:n]


# --------------------------------------------------------------------------
# class construction
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyClassSpec:
    """Either an explicit policy list or a softmax net.

    ``mode='theory'`` enumerates the full net and refuses when it would exceed
    ``cap``; ``mode='capped'`` draws ``cap`` net members with ``seed`` and
    prepends ``pinned``.
    """

    kind: str = "explicit"
    policies: tuple = ()
    mdp: LinearMdp | None = None
    eta: float | None = None
    delta_cover: float | None = None
    mode: str = "capped"
    cap: int = 1000
    pinned: tuple = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("explicit", "softmax"):
            raise ContractError(f"unknown policy class kind {self.kind!r}")
        if self.mode not in ("theory", "capped"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.cap < 1:
            raise ContractError("cap must be positive")
        if self.kind == "softmax" and self.mdp is None:
            raise ContractError("softmax classes need an mdp")


@dataclass
class PolicyClass:
    policies: list[Policy]
    faithful: bool
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.policies)

    def __iter__(self):
        return iter(self.policies)

    def __getitem__(self, i):
        return self.policies[i]


def build_policy_class(spec: PolicyClassSpec, eps: float) -> PolicyClass:
    if spec.kind == "explicit":
        if not spec.policies:
            raise ContractError("explicit policy class is empty")
        return PolicyClass(list(spec.policies), True, {"kind": "explicit", "size": len(spec.policies)})
    if not 0 < eps < 1:
        raise ContractError("eps must lie in (0, 1)")
    mdp = spec.mdp
    d, H = mdp.d, mdp.H
    eta = theory_eta(d, H, eps) if spec.eta is None else spec.eta
    delta_cover = eps if spec.delta_cover is None else spec.delta_cover
    cover = build_action_cover(mdp, delta_cover, spec.seed)
    R, r = weight_radius(d, H), net_resolution(d, H, eps, eta)
    meta = {
        "kind": "softmax",
        "mode": spec.mode,
        "eta": eta,
        "theory_eta": theory_eta(d, H, eps),
        "weight_radius": R,
        "net_resolution": r,
        "log_cardinality_bound": theory_log_cardinality(d, H, eps),
        "log_net_cardinality": net_log_cardinality(d, H, eps, eta),
        "cover_sizes": cover.sum(axis=1).tolist(),
        "seed": spec.seed,
    }
    log_cap = math.log(spec.cap)
    if spec.mode == "theory":
        if eta < meta["theory_eta"]:
            raise ContractError(f"eta={eta:g} is below the theory requirement {meta['theory_eta']:g}")
        logc = max(meta["log_cardinality_bound"], meta["log_net_cardinality"])
        if logc > log_cap:
            raise CardinalityError(logc, spec.cap)
        pts = grid_net(R, r, d)
        if H * math.log(len(pts)) > log_cap:
            raise CardinalityError(H * math.log(len(pts)), spec.cap)
        idx = np.stack(np.meshgrid(*([np.arange(len(pts))] * H), indexing="ij"), -1).reshape(-1, H)
        policies = [LinearSoftmax(eta, pts[row], cover, name=f"softmax-{k}") for k, row in enumerate(idx)]
        meta["size"] = len(policies)
        return PolicyClass(policies, True, meta)

    rng = np.random.default_rng(spec.seed)
    n = max(spec.cap - len(spec.pinned), 0)
    W = sample_grid_points(R, r, d, n * H, rng).reshape(n, H, d)
    policies = list(spec.pinned) + [LinearSoftmax(eta, W[k], cover, name=f"softmax-{k}") for k in range(n)]
    meta.update(size=len(policies), pinned=len(spec.pinned))
    return PolicyClass(policies, False, meta)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def policy_to_dict(policy: Policy) -> dict:
    if isinstance(policy, DeterministicTable):
        return {"kind": "deterministic", "name": policy.name, "actions": policy.actions.tolist()}
    if isinstance(policy, StochasticTable):
        return {"kind": "stochastic", "name": policy.name, "probs": _encode_array(policy.probs)}
    if isinstance(policy, LinearSoftmax):
        return {
            "kind": "linear_softmax",
            "name": policy.name,
            "eta": float(policy.eta),
            "w": _encode_array(np.asarray(policy.w, float)),
            "restricted": None if policy.restricted is None
            else _encode_array(np.asarray(policy.restricted, np.uint8)),
        }
    raise ContractError(f"cannot serialize policy of type {type(policy).__name__}")


def policy_from_dict(doc: dict) -> Policy:
    kind = doc.get("kind")
    name = doc.get("name", "")
    if kind == "deterministic":
        return DeterministicTable(np.array(doc["actions"], dtype=int), name=name)
    if kind == "stochastic":
        probs = doc["probs"]
        return StochasticTable(_decode_array(probs) if isinstance(probs, dict) else np.array(probs, float), name=name)
    if kind == "linear_softmax":
        restricted = doc.get("restricted")
        return LinearSoftmax(
            float(doc["eta"]),
            _decode_array(doc["w"]),
            None if restricted is None else _decode_array(restricted).astype(bool),
            name=name,
        )
    raise ContractError(f"unsupported policy kind {kind!r}")


def policies_to_json(policies: Sequence[Policy]) -> str:
    return json.dumps({"policies": [policy_to_dict(p) for p in policies]}, sort_keys=True)


def policies_from_json(text: str) -> list[Policy]:
    doc = json.loads(text)
    if "policies" not in doc:
        raise ContractError("policy class JSON needs a 'policies' list")
    return [policy_from_dict(p) for p in doc["policies"]]
