"""Acceptance suite A1-A10.

Each test records a PASS/FAIL line (criterion, measured quantity, runtime)
that the terminal summary prints after the run.  Statistical criteria use
desk-scale presets; their constant_scale is part of the printed line.
"""
import json
import math
import time

import numpy as np
import pytest

from pedelkit.experiment_design import (
    DesignConfig,
    SmoothedXY,
    approx_frank_wolfe,
    vertex_oracle,
    xy_gradient,
    xy_smoothed,
    xy_value,
)
from pedelkit.harness import ExperimentConfig, loglog_slope, matched_budget, sweep
from pedelkit.instances import (
    bandit_protocol_next_states,
    delta_upper_bound,
    embed_bandit_as_mdp,
    hard_instance_policy_set,
    make_gap_vis_instances,
    make_hard_bandit,
    make_scaled_hard_bandit,
    make_simplex_mdp,
)
from pedelkit.lower_bound import bound_report, closed_form_bound
from pedelkit.mdp_core import (
    DeterministicTable,
    EnvSampler,
    StochasticTable,
    chi2_homogeneity,
    exact_feature_visitation,
    exact_policy_value,
    policy_table,
    uniform_policy,
    validate,
)
from pedelkit.pedel import PedelConfig, estimate_feature_visitations, regularized_covariance, run_pedel
from pedelkit.policy_class import policies_to_json
from pedelkit.regret_min import LsviLearner, online_to_batch

from conftest import ACCEPTANCE, tabular_instance
from oracles import grid_design_optimum, simplex_design_case


def verdict(name, ok, detail, t0, limit):
    """Record and assert one criterion; the runtime limit is part of the verdict."""
    took = time.perf_counter() - t0
    ok = bool(ok) and took < limit
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({took:.1f}s of {limit:.0f}s)")
    assert ok, f"{name}: {detail} ({took:.1f}s of {limit:.0f}s)"


def random_case(rng, d=5, n=6):
    B = rng.normal(size=(d, d))
    C = rng.normal(size=(d, d))
    return B @ B.T / d, rng.normal(size=(n, d)) / np.sqrt(d), C @ C.T / d + 0.1 * np.eye(d)


# -- A1 to A4: design objective and Frank-Wolfe -----------------------------------------


def test_a1_logsumexp_sandwich():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_lo, worst_hi = math.inf, -math.inf
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        Lam, Phi, Lam0 = random_case(rng, d=int(rng.integers(2, 7)), n=n)
        eta = float(10 ** rng.uniform(-2, 4))
        gap = xy_smoothed(Lam, Phi, eta, Lam0) - xy_value(Lam, Phi, Lam0)
        worst_lo = min(worst_lo, gap)
        worst_hi = max(worst_hi, gap - math.log(n) / eta)
    verdict("A1", worst_lo >= -1e-12 and worst_hi <= 1e-12,
            f"min gap {worst_lo:.3g}, max excess over log|Phi|/eta {worst_hi:.3g}", t0, 10)


def test_a2_gradient_matches_central_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    step, d = 1e-5, 5
    worst = 0.0
    for _ in range(200):
        Lam, Phi, Lam0 = random_case(rng, d=d)
        eta = float(rng.uniform(0.5, 5.0))
        Xi = xy_gradient(Lam, Phi, eta, Lam0)
        fd = np.zeros((d, d))
        for i in range(d):
            for j in range(i, d):
                D = np.zeros((d, d))
                D[i, j] = D[j, i] = 1.0 if i == j else 0.5
                g = (xy_smoothed(Lam + step * D, Phi, eta, Lam0)
                     - xy_smoothed(Lam - step * D, Phi, eta, Lam0)) / (2 * step)
                fd[i, j] = fd[j, i] = -g
        worst = max(worst, np.linalg.norm(Xi - fd) / np.linalg.norm(Xi))
    verdict("A2", worst <= 1e-5, f"max relative error {worst:.2e}", t0, 30)


def test_a3_frank_wolfe_averaging_identity():
    t0 = time.perf_counter()
    V, Phi = simplex_design_case(0)
    f = SmoothedXY(Phi, 10.0, 1e-3 * np.eye(3))
    worst = 0.0
    for T in (1, 10, 100):
        st_ = approx_frank_wolfe(f, vertex_oracle(V), T, V[0])
        assert st_.step_sizes == [1 / (t + 1) for t in range(1, T + 1)]
        # uniform average of the start point and the T oracle answers
        avg = (V[0] + sum(s.y for s in st_.history)) / (T + 1)
        worst = max(worst, np.abs(avg - st_.Lam).max(), np.abs(st_.replay_average() - st_.Lam).max())
    verdict("A3", worst <= 1e-12, f"max deviation {worst:.2e}", t0, 60)


def test_a4_kiefer_wolfowitz_ceiling():
    t0 = time.perf_counter()
    ratios, values = [], []
    for inst in range(20):
        V, Phi = simplex_design_case(inst)
        f = SmoothedXY(Phi, 1000.0, 1e-8 * np.eye(3))
        st_ = approx_frank_wolfe(f, vertex_oracle(V), 1000, V.mean(0))
        fw = xy_value(st_.Lam, Phi, np.zeros((3, 3)))
        values.append(fw)
        ratios.append(fw / grid_design_optimum(V, Phi))
    ok = max(values) <= 1.05 * 3 and max(abs(r - 1) for r in ratios) <= 0.05
    verdict("A4", ok, f"max design value {max(values):.3f} (ceiling 3.15), "
            f"FW/grid in [{min(ratios):.4f}, {max(ratios):.4f}]", t0, 300)


# -- A5: estimator consistency ------------------------------------------------------------


def test_a5_visitation_rms_halves():
    t0 = time.perf_counter()
    mdp = make_simplex_mdp(4, 4, 3, 3, seed=7)
    rng = np.random.default_rng(123)
    targets = [StochasticTable(rng.dirichlet(np.ones(3), size=(3, 4))) for _ in range(3)]
    tables = np.stack([policy_table(mdp, p) for p in targets])
    exact = np.stack([exact_feature_visitation(mdp, p) for p in targets])
    logging = uniform_policy(mdp)

    def rms(K):
        errs = []
        for seed in range(50):
            sampler = EnvSampler(mdp, seed)
            est = exact[:, 0]
            for h in range(mdp.H - 1):
                tr = sampler.run(logging, K, truncate_at=h)
                Lam = regularized_covariance(mdp.phi, tr, h)
                est = estimate_feature_visitations(mdp.phi, tr, h, tables[:, h + 1], est, Lam)
            errs.append(np.sum((est - exact[:, -1]) ** 2))
        return math.sqrt(np.mean(errs))

    ratio = rms(2000) / rms(8000)
    verdict("A5", 1.6 <= ratio <= 2.6, f"RMS(K=2000)/RMS(K=8000) = {ratio:.3f}", t0, 300)


# -- A6, A7: hard instance ------------------------------------------------------------------

HARD_DELTA, HARD_XI, HARD_GAMMA = 0.02, 0.4, 0.1
HARD_EPS, CONF = 0.005, 0.1
HARD_DESIGN = DesignConfig(scale=6e-4, gate="off", cond_c=0.01)
OTB_LADDER = sorted({int(16 * 2 ** (k / 2)) for k in range(24)})


def hard_setup(d):
    mdp = embed_bandit_as_mdp(make_scaled_hard_bandit(d, HARD_DELTA, HARD_XI, HARD_GAMMA))
    pols = hard_instance_policy_set(mdp, distinct=True)
    vals = np.array([exact_policy_value(mdp, p) for p in pols])
    return mdp, pols, vals


def pedel_runs(d, seeds):
    mdp, pols, vals = hard_setup(d)
    out = []
    for seed in seeds:
        res = run_pedel(EnvSampler(mdp, seed), pols, HARD_EPS, CONF, PedelConfig(design=HARD_DESIGN))
        out.append((res.episodes, bool(vals[res.policy_index] == vals.max()), res.flags))
    return out


class PedelCache:
    def __init__(self):
        self.runs = {}
        self.seconds = {}

    def get(self, d, n):
        have = self.runs.setdefault(d, [])
        if len(have) < n:
            t0 = time.perf_counter()
            have.extend(pedel_runs(d, range(len(have), n)))
            self.seconds[d] = self.seconds.get(d, 0.0) + time.perf_counter() - t0
        return have[:n]


@pytest.fixture(scope="module")
def pedel_cache():
    return PedelCache()


def otb_matched(d, seeds):
    mdp, _, _ = hard_setup(d)
    ladders = []
    for seed in seeds:
        res = online_to_batch(EnvSampler(mdp, seed), HARD_EPS, CONF, OTB_LADDER, LsviLearner())
        ladders.append({"ladder": [[k, int(p.actions[0, 0]) == 0] for k, p, _ in res.checkpoints]})
    return matched_budget(ladders, 1 - CONF)


def test_a6_instance_dependent_separation(pedel_cache):
    t0 = time.perf_counter()
    seeds = range(30)
    p4, p16 = pedel_cache.get(4, 30), pedel_cache.get(16, 30)
    e4, e16 = np.mean([r[0] for r in p4]), np.mean([r[0] for r in p16])
    s4, s16 = np.mean([r[1] for r in p4]), np.mean([r[1] for r in p16])
    (k4, r4), (k16, r16) = otb_matched(4, seeds), otb_matched(16, seeds)
    pedel_ratio = e16 / e4
    otb_ratio = math.inf if k16 is None else k16 / k4 if k4 else math.nan
    ok = min(s4, s16) >= 0.9 and k4 is not None and pedel_ratio <= 2.0 and otb_ratio >= 3.0
    verdict("A6", ok, f"constant_scale={HARD_DESIGN.scale}; PEDEL d16/d4 = {e16:.4g}/{e4:.4g} = {pedel_ratio:.2f} "
            f"(success {s4:.2f}, {s16:.2f}); online_to_batch matched budget d16/d4 = {k16}/{k4} = {otb_ratio:.2f} "
            f"(success {r4:.2f}, {r16:.2f})", t0, 1800)


def test_a7_pedel_identifies_optimum(pedel_cache):
    runs = pedel_cache.get(4, 100)
    hits = sum(r[1] for r in runs)
    # runtime covers all 100 runs, including any shared with A6
    t0 = time.perf_counter() - pedel_cache.seconds[4]
    verdict("A7", hits >= 95, f"constant_scale={HARD_DESIGN.scale}; exactly optimal in {hits}/100, "
            f"mean episodes {np.mean([r[0] for r in runs]):.4g}", t0, 1200)


# -- A8: lower bound --------------------------------------------------------------------------


def test_a8_lower_bound_ordering():
    t0 = time.perf_counter()
    parts, ok = [], True
    for d in (3, 5):
        Delta = 0.5 * min(delta_upper_bound(d, 0.5, 1.0, 1.0).values())
        rep = bound_report(make_hard_bandit(d, Delta), CONF)
        ok &= rep["numeric"] >= rep["closed_form"]
        parts.append(f"d={d}: numeric {rep['numeric']:.3g} >= closed {rep['closed_form']:.3g}")
    cf = closed_form_bound(5, 0.01, 0.1)
    ok &= abs(cf - 1189.3) <= 0.1
    verdict("A8", ok, "; ".join(parts) + f"; closed form (5, 0.01, 0.1) = {cf:.4f}", t0, 60)


# -- A9: eps scaling ----------------------------------------------------------------------------


def test_a9_eps_scaling(tmp_path):
    t0 = time.perf_counter()
    P = np.zeros((1, 2, 2, 2))
    P[0, :, 0] = [0.7, 0.3]
    P[0, :, 1] = [0.3, 0.7]
    env = tmp_path / "tied.json"
    env.write_text(json.dumps({"S": 2, "A": 2, "H": 2, "P": P.tolist(), "r": np.full((2, 2, 2), 0.5).tolist()}))
    pols = tmp_path / "pols.json"
    # two equal-value policies: nothing is eliminated early, so every epoch runs
    pols.write_text(policies_to_json([DeterministicTable(np.zeros((2, 2), int)),
                                      DeterministicTable(np.array([[1, 1], [0, 0]]))]))
    cfg = ExperimentConfig(env=f"tabular:{env},policies={pols}", algorithms=("pedel",), seeds=(0, 1, 2),
                           constant_scale=1e-4, design={"gate": "off", "cond_c": 0.01})
    eps = [0.04, 0.02, 0.01]
    rows = sweep(cfg, "eps", eps)
    episodes = [r["mean_episodes"] for r in rows]
    slope = loglog_slope(eps, episodes)
    verdict("A9", abs(slope + 2) <= 0.4, f"constant_scale=1e-4; episodes {[f'{e:.4g}' for e in episodes]}, "
            f"log-log slope {slope:.3f}", t0, 1800)


# -- A10: instance validity -------------------------------------------------------------------------


def test_a10_instance_validity():
    t0 = time.perf_counter()
    checks = {
        "hard d=4": embed_bandit_as_mdp(make_hard_bandit(4, 1e-5)),
        "hard d=20": embed_bandit_as_mdp(make_hard_bandit(20, 5e-7)),
        "tabular": tabular_instance(0)[0],
        "tabular small": tabular_instance(1, S=2, A=2, H=2)[0],
        "M1": make_gap_vis_instances()[0],
    }
    bad = {k: [str(v) for v in validate(m)] for k, m in checks.items()}
    bad = {k: v for k, v in bad.items() if v}
    pvals = {}
    for d, Delta in ((4, 1e-5), (20, 5e-7)):
        b = make_hard_bandit(d, Delta)
        mdp = embed_bandit_as_mdp(b)
        tr = EnvSampler(mdp, 0).run(uniform_policy(mdp), 100_000)
        acts = tr.actions[:, 0]
        proto = bandit_protocol_next_states(b, acts, np.random.default_rng(1))
        m = mdp.A * mdp.S
        pvals[d] = chi2_homogeneity(np.bincount(acts * mdp.S + tr.next_states[:, 0], minlength=m),
                                    np.bincount(acts * mdp.S + proto, minlength=m))
    ok = not bad and min(pvals.values()) > 1e-3
    verdict("A10", ok, f"violations {bad or 'none'}; chi2 p-values "
            + ", ".join(f"d={d}: {p:.3f}" for d, p in pvals.items()), t0, 120)
