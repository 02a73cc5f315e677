"""Seeded experiment campaigns with CSV and JSON output.

A campaign is the cross product of algorithms and seeds on one environment.
Each cell owns its RNG and environment instance, so cells can run in any order
or in a process pool and still produce identical files.  Output files carry
the config hash and constant_scale and never a timestamp.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import t as student_t

from .experiment_design import DesignConfig, collect_xy_design
from .instances import (
    all_deterministic_policies,
    embed_bandit_as_mdp,
    encode_tabular,
    hard_instance_policy_set,
    make_chain,
    make_hard_bandit,
    make_scaled_hard_bandit,
    make_simplex_mdp,
)
from .lower_bound import bound_report, closed_form_bound
from .mdp_core import (
    BudgetExhausted,
    ContractError,
    EnvSampler,
    LinearMdp,
    Policy,
    exact_feature_visitation,
    exact_policy_value,
    optimal_policy,
)
from .pedel import PedelConfig, run_pedel
from .policy_class import policies_from_json
from .regret_min import LsviLearner, make_learner, online_to_batch

ALGORITHMS = ("pedel", "online_to_batch", "design_only", "lower_bound")
SWEEP_AXES = ("d", "eps", "constant_scale")
LEARNERS = ("lsvi", "oracle", "uniform")


# --------------------------------------------------------------------------
# environments
# --------------------------------------------------------------------------


@dataclass
class Environment:
    mdp: LinearMdp
    policies: list[Policy]
    bandit: object | None = None


def parse_env(spec: str) -> tuple[str, dict]:
    """Split ``kind:k=v,k=v`` (or ``tabular:<file>[,policies=<file>]``) into (kind, params)."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    if kind == "tabular":
        path, _, pols = rest.partition(",policies=")
        if not path:
            raise ContractError("tabular preset needs a file: tabular:<file>")
        return kind, {"file": path, **({"policies": pols} if pols else {})}
    params: dict = {}
    for item in filter(None, (x.strip() for x in rest.split(","))):
        k, eq, v = item.partition("=")
        if not eq:
            raise ContractError(f"bad preset parameter {item!r}")
        params[k.strip()] = _number(v.strip())
    return kind, params


def _number(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def _policies_for(mdp: LinearMdp, params: dict) -> list[Policy]:
    src = params.get("policies")
    if src:
        try:
            text = Path(src).read_text()
        except OSError as e:
            raise ContractError(f"cannot read policy file {src!r}: {e}") from e
        return policies_from_json(text)
    return all_deterministic_policies(mdp, limit=int(params.get("policy_limit", 4096)))


def build_environment(kind: str, params: dict) -> Environment:
    """Instantiate a named preset.

    hard: d, Delta (alias delta); with xi and gamma the desk-scale variant.
    chain: S, H, eps.  simplex: d, S, A, H, seed.  tabular: a JSON file with
    S, A, H, P (H-1, S, A, S) and r (H, S, A).
    """
    p = dict(params)
    if kind == "hard":
        d = int(p.get("d", 4))
        Delta = float(p.get("Delta", p.get("delta", 1e-5)))
        if "xi" in p or "gamma" in p:
            bandit = make_scaled_hard_bandit(d, Delta, float(p.get("xi", 0.4)), float(p.get("gamma", 0.1)))
        else:
            bandit = make_hard_bandit(d, Delta, float(p.get("alpha", 0.5)), float(p.get("C1", 1.0)),
                                      float(p.get("C2", 1.0)))
        mdp = embed_bandit_as_mdp(bandit)
        return Environment(mdp, list(hard_instance_policy_set(mdp, distinct=True)), bandit)
    if kind == "chain":
        mdp = make_chain(int(p.get("S", 4)), int(p.get("H", 3)), float(p.get("eps", 0.1)))
        return Environment(mdp, _policies_for(mdp, p))
    if kind == "simplex":
        mdp = make_simplex_mdp(int(p.get("d", 3)), int(p.get("S", 3)), int(p.get("A", 2)), int(p.get("H", 2)),
                               seed=int(p.get("seed", 0)))
        return Environment(mdp, _policies_for(mdp, p))
    if kind == "tabular":
        try:
            doc = json.loads(Path(p["file"]).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ContractError(f"cannot read tabular file {p['file']!r}: {e}") from e
        mdp = encode_tabular(int(doc["S"]), int(doc["A"]), int(doc["H"]), np.array(doc["P"]), np.array(doc["r"]),
                             start_state=int(doc.get("start_state", 0)), name=doc.get("name", "tabular"))
        return Environment(mdp, _policies_for(mdp, p))
    raise ContractError(f"unknown environment preset {kind!r}")


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "chain:S=3,H=2"
    algorithms: tuple[str, ...] = ("pedel",)
    eps: float = 0.1
    delta: float = 0.1
    seeds: tuple[int, ...] = (0,)
    constant_scale: float = 1.0
    design: dict = field(default_factory=dict)
    regmin: str = "lsvi"
    regmin_kwargs: dict = field(default_factory=dict)
    episode_cap: int | None = None
    otb_budgets: tuple[int, ...] | None = None
    success_target: float = 0.9
    output_dir: str | None = None
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.otb_budgets is not None:
            object.__setattr__(self, "otb_budgets", tuple(int(k) for k in self.otb_budgets))
        if not self.seeds:
            raise ContractError("seeds must be nonempty")
        if not (0 < self.eps < 1 and 0 < self.delta < 1):
            raise ContractError("eps and delta must lie in (0, 1)")
        if self.constant_scale <= 0:
            raise ContractError("constant_scale must be positive")
        if self.episode_cap is not None and self.episode_cap <= 0:
            raise ContractError("episode caps must be positive")
        if self.otb_budgets is not None and (not self.otb_budgets or min(self.otb_budgets) <= 0):
            raise ContractError("otb_budgets must be positive")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ContractError(f"unknown algorithms {bad}; choose from {ALGORITHMS}")
        if self.regmin not in LEARNERS:
            raise ContractError(f"regmin must be one of {LEARNERS}")
        if self.workers < 1:
            raise ContractError("workers must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ContractError(f"unknown config keys {sorted(extra)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ContractError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["algorithms"] = list(self.algorithms)
        out["seeds"] = list(self.seeds)
        out["otb_budgets"] = None if self.otb_budgets is None else list(self.otb_budgets)
        return out

    def hash(self) -> str:
        """sha256 of the canonical JSON, excluding where and how the campaign runs."""
        doc = self.to_dict()
        doc.pop("output_dir")
        doc.pop("workers")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def design_config(self) -> DesignConfig:
        return DesignConfig(scale=self.constant_scale, cap=self.episode_cap, **self.design)


# --------------------------------------------------------------------------
# cells
# --------------------------------------------------------------------------


def _best_value(mdp: LinearMdp, policies: Sequence[Policy]) -> tuple[np.ndarray, float]:
    vals = np.array([exact_policy_value(mdp, p) for p in policies])
    return vals, float(vals.max())


def run_cell(config: ExperimentConfig, algorithm: str, seed: int) -> dict:
    """One (algorithm, seed) cell; returns a record with an optional trace."""
    kind, params = parse_env(config.env)
    env = build_environment(kind, params)
    mdp = env.mdp
    rec: dict = {"algorithm": algorithm, "seed": seed, "flags": [], "trace": []}
    if algorithm == "lower_bound":
        if env.bandit is None:
            raise ContractError("lower_bound needs the hard preset")
        rep = bound_report(env.bandit, config.delta)
        rec.update(episodes=rep["numeric"], success=True, report=rep)
        return rec
    sampler = EnvSampler(mdp, seed, config.episode_cap)
    if algorithm == "pedel":
        pc = PedelConfig(design=config.design_config(), learner=config.regmin,
                         learner_kwargs=tuple(sorted(config.regmin_kwargs.items())))
        vals, best = _best_value(mdp, env.policies)
        try:
            res = run_pedel(sampler, env.policies, config.eps, config.delta, pc)
        except BudgetExhausted:
            rec.update(episodes=sampler.episodes, success=False, flags=["budget_exhausted"])
            return rec
        rec.update(
            episodes=res.episodes,
            policy_index=res.policy_index,
            value=float(vals[res.policy_index]),
            best_value=best,
            success=bool(vals[res.policy_index] >= best - config.eps),
            flags=list(res.flags),
            trace=res.trace,
        )
        return rec
    if algorithm == "online_to_batch":
        learner = (LsviLearner(**config.regmin_kwargs) if config.regmin == "lsvi"
                   else make_learner(config.regmin, **config.regmin_kwargs))
        _, vstar = optimal_policy(mdp)
        try:
            res = online_to_batch(sampler, config.eps, config.delta, config.otb_budgets, learner)
        except BudgetExhausted:
            rec.update(episodes=sampler.episodes, success=False, flags=["budget_exhausted"])
            return rec
        ladder = []
        for k, pol, flags in res.checkpoints:
            ok = "undefined" not in flags and exact_policy_value(mdp, pol) >= vstar - config.eps
            ladder.append([int(k), bool(ok)])
        rec.update(episodes=res.episodes, success=ladder[-1][1], flags=list(res.flags), ladder=ladder)
        return rec
    if algorithm == "design_only":
        design = config.design_config()
        learner = make_learner(config.regmin, **config.regmin_kwargs)
        vis = np.stack([exact_feature_visitation(mdp, p) for p in env.policies])  # (n, H, d)
        achieved = []
        flags: list[str] = []
        for h in range(mdp.H):
            before = sampler.episodes
            try:
                r = collect_xy_design(sampler, vis[:, h], config.eps, config.delta, 1.0, h, learner, design)
            except BudgetExhausted:
                flags.append("budget_exhausted")
                break
            Lam = r.covariance + np.eye(mdp.d) / mdp.d
            q = np.einsum("nd,nd->n", vis[:, h], np.linalg.solve(Lam, vis[:, h].T).T)
            achieved.append(float(q.max()))
            flags.extend(r.flags)
            rec["trace"].append({"h": h, "episodes_this_phase": sampler.episodes - before,
                                 "design_value_achieved": float(q.max())})
        ok = len(achieved) == mdp.H and max(achieved) <= config.eps
        rec.update(episodes=sampler.episodes, success=bool(ok), flags=sorted(set(flags)))
        return rec
    raise ContractError(f"unknown algorithm {algorithm!r}")


def _cell_safe(args: tuple[ExperimentConfig, str, int]) -> dict:
    config, algorithm, seed = args
    try:
        return run_cell(config, algorithm, seed)
    except BudgetExhausted as e:
        return {"algorithm": algorithm, "seed": seed, "episodes": e.used, "success": False,
                "flags": ["budget_exhausted"], "trace": []}


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


def mean_ci(x: Sequence[float], level: float = 0.95) -> tuple[float, list[float]]:
    x = np.asarray(x, float)
    m = float(x.mean())
    if len(x) < 2:
        return m, [m, m]
    half = float(student_t.ppf(0.5 + level / 2, len(x) - 1) * x.std(ddof=1) / math.sqrt(len(x)))
    return m, [m - half, m + half]


def matched_budget(cells: Sequence[dict], target: float) -> tuple[int | None, float]:
    """Smallest checkpoint whose success rate across seeds reaches ``target``."""
    ladders = [c["ladder"] for c in cells if "ladder" in c]
    if not ladders:
        return None, 0.0
    ks = [k for k, _ in ladders[0]]
    for j, k in enumerate(ks):
        rate = float(np.mean([lad[j][1] for lad in ladders]))
        if rate >= target:
            return k, rate
    return None, float(np.mean([lad[-1][1] for lad in ladders]))


def aggregate(config: ExperimentConfig, cells: Sequence[dict]) -> dict:
    out: dict = {
        "config_hash": config.hash(),
        "constant_scale": config.constant_scale,
        "config": config.to_dict(),
        "algorithms": {},
    }
    out["config"].pop("output_dir")
    out["config"].pop("workers")
    for alg in config.algorithms:
        cs = [c for c in cells if c["algorithm"] == alg]
        eps_list = [c["episodes"] for c in cs]
        mean, ci = mean_ci(eps_list)
        entry = {
            "runs": len(cs),
            "mean_episodes": mean,
            "ci": ci,
            "success_rate": float(np.mean([c["success"] for c in cs])),
            "budget_exhausted": sum("budget_exhausted" in c["flags"] for c in cs),
        }
        if alg == "online_to_batch":
            k, rate = matched_budget(cs, config.success_target)
            entry["matched_budget"] = k
            entry["matched_success_rate"] = rate
            entry["success_target"] = config.success_target
        if alg == "lower_bound":
            entry["report"] = cs[0]["report"]
        out["algorithms"][alg] = entry
    return out


def headline_episodes(entry: dict) -> float | None:
    """Episodes reported in sweep tables: the matched budget for online_to_batch."""
    if "matched_budget" in entry:
        return entry["matched_budget"]
    return entry["mean_episodes"]


# --------------------------------------------------------------------------
# campaign driver
# --------------------------------------------------------------------------


TRACE_FIELDS = ("epoch", "h", "episodes_this_phase", "design_value_achieved", "n_active", "v_hat_max",
                "eliminated_count")


def _trace_csv(cell: dict, config_hash: str, scale: float) -> str:
    buf = io.StringIO()
    fields = TRACE_FIELDS + ("config_hash", "constant_scale")
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in cell["trace"]:
        w.writerow({**{k: row.get(k, "") for k in TRACE_FIELDS}, "config_hash": config_hash, "constant_scale": scale})
    return buf.getvalue()


def _jsonable(cell: dict) -> dict:
    return {k: v for k, v in cell.items() if k != "trace"}


def run_campaign(config: ExperimentConfig) -> dict:
    """Run every (algorithm, seed) cell and return the aggregate summary.

    When ``output_dir`` is set, writes runs/<algorithm>_seed<k>.csv|json and
    summary.json there.
    """
    jobs = []
    for alg in config.algorithms:
        seeds = config.seeds[:1] if alg == "lower_bound" else config.seeds
        jobs.extend((config, alg, s) for s in seeds)
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(config.workers) as ex:
            cells = list(ex.map(_cell_safe, jobs))
    else:
        cells = [_cell_safe(j) for j in jobs]
    summary = aggregate(config, cells)
    if config.output_dir:
        write_outputs(config, cells, summary)
    return summary


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_outputs(config: ExperimentConfig, cells: Sequence[dict], summary: dict) -> None:
    root = Path(config.output_dir)
    runs = root / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    h = summary["config_hash"]
    for c in cells:
        stem = f"{c['algorithm']}_seed{c['seed']}"
        (runs / f"{stem}.csv").write_text(_trace_csv(c, h, config.constant_scale))
        (runs / f"{stem}.json").write_text(
            dumps({**_jsonable(c), "config_hash": h, "constant_scale": config.constant_scale}))
    (root / "summary.json").write_text(dumps(summary))


def with_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "eps":
        return replace(config, eps=float(value))
    if axis == "constant_scale":
        return replace(config, constant_scale=float(value))
    if axis == "d":
        kind, params = parse_env(config.env)
        if kind == "tabular":
            raise ContractError("the d axis needs a parametric preset")
        params["d"] = int(value)
        env = f"{kind}:" + ",".join(f"{k}={v}" for k, v in params.items())
        return replace(config, env=env)
    raise ContractError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def sweep(config: ExperimentConfig, axis: str, values: Sequence) -> list[dict]:
    """Table rows (axis value, algorithm, mean episodes, success rate) over the sweep."""
    rows = []
    for v in values:
        sub = with_axis(config, axis, v)
        if config.output_dir:
            sub = replace(sub, output_dir=str(Path(config.output_dir) / f"{axis}={v}"))
        summary = run_campaign(sub)
        for alg, entry in summary["algorithms"].items():
            rows.append({
                axis: v,
                "algorithm": alg,
                "mean_episodes": headline_episodes(entry),
                "success_rate": entry.get("matched_success_rate", entry["success_rate"]),
                "config_hash": summary["config_hash"],
                "constant_scale": sub.constant_scale,
            })
    if config.output_dir:
        Path(config.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(config.output_dir) / f"sweep_{axis}.csv").write_text(sweep_csv(rows, axis))
    return rows


def sweep_csv(rows: Sequence[dict], axis: str) -> str:
    buf = io.StringIO()
    fields = (axis, "algorithm", "mean_episodes", "success_rate", "config_hash", "constant_scale")
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in fields})
    return buf.getvalue()


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log y against log x."""
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def lower_bound_report(d: int, delta: float, Delta: float, zeta: float | None = None) -> dict:
    """Closed form always; the numeric program when (d, Delta) admit the faithful instance."""
    try:
        bandit = make_hard_bandit(d, Delta)
    except ContractError as e:
        return {
            "d": d, "delta": delta, "Delta": Delta, "zeta": zeta,
            "closed_form": closed_form_bound(d, Delta, delta),
            "numeric": None,
            "details": {"status": f"numeric program skipped: {e}"},
        }
    return bound_report(bandit, delta, zeta)
