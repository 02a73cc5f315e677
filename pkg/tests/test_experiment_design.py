import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pedelkit.experiment_design import (
    TRACE_COLUMNS,
    DesignConfig,
    SmoothObjective,
    SmoothedXY,
    StagnationError,
    approx_frank_wolfe,
    collect_xy_design,
    conditioned_cov,
    design_reward,
    fw_rate_bound,
    fw_regret,
    K0_min,
    K0_tilde,
    n_star,
    reachable_basis,
    schedule,
    trace_csv,
    vertex_oracle,
    xy_gradient,
    xy_smoothed,
    xy_value,
)
from pedelkit.instances import all_deterministic_policies, hard_instance_policy_set, make_deterministic_mdp
from pedelkit.mdp_core import (
    ContractError,
    EnvSampler,
    exact_covariance,
    exact_feature_visitation,
    uniform_policy,
)
from pedelkit.regret_min import LsviLearner, OracleLearner, RegretBound, run_regmin, RewardFunction

from conftest import tabular_instance
from oracles import grid_design_optimum, simplex_design_case


def random_case(rng, d=5, n=6):
    B = rng.normal(size=(d, d))
    Lam = B @ B.T / d
    C = rng.normal(size=(d, d))
    Lam0 = C @ C.T / d + 0.1 * np.eye(d)
    Phi = rng.normal(size=(n, d)) / np.sqrt(d)
    return Lam, Phi, Lam0


# -- XY objective ------------------------------------------------------------------


def test_single_target_smoothing_is_exact():
    rng = np.random.default_rng(0)
    Lam, Phi, Lam0 = random_case(rng, n=1)
    assert xy_smoothed(Lam, Phi, 3.0, Lam0) == xy_value(Lam, Phi, Lam0)


@pytest.mark.parametrize("eta", [0.5, 1.0, 10.0, 1e4])
def test_two_axis_example(eta):
    I = np.eye(2)
    assert xy_value(np.zeros((2, 2)), I, I) == pytest.approx(1.0)
    assert xy_smoothed(np.zeros((2, 2)), I, eta, I) == pytest.approx(1 + math.log(2) / eta, rel=1e-14)


def test_smoothing_survives_large_eta():
    I = np.eye(2)
    assert np.isfinite(xy_smoothed(np.zeros((2, 2)), I, 1e9, I))


@given(st.integers(0, 100_000), st.floats(1e-2, 1e3))
def test_sandwich(seed, eta):
    Lam, Phi, Lam0 = random_case(np.random.default_rng(seed))
    gap = xy_smoothed(Lam, Phi, eta, Lam0) - xy_value(Lam, Phi, Lam0)
    assert -1e-12 <= gap <= math.log(len(Phi)) / eta + 1e-12


def test_smoothed_value_decreases_in_eta():
    rng = np.random.default_rng(1)
    for _ in range(100):
        Lam, Phi, Lam0 = random_case(rng)
        assert xy_smoothed(Lam, Phi, 10.0, Lam0) <= xy_smoothed(Lam, Phi, 1.0, Lam0) + 1e-12


@given(st.integers(0, 100_000), st.floats(0.1, 100.0), st.floats(0.1, 100.0))
def test_eta_monotone(seed, a, b):
    Lam, Phi, Lam0 = random_case(np.random.default_rng(seed))
    lo, hi = sorted((a, b))
    assert xy_smoothed(Lam, Phi, hi, Lam0) <= xy_smoothed(Lam, Phi, lo, Lam0) + 1e-12


def test_gradient_collapses_for_one_target():
    e1 = np.array([[1.0, 0.0, 0.0]])
    assert np.allclose(xy_gradient(np.zeros((3, 3)), e1, 2.0, np.eye(3)), np.diag([1.0, 0, 0]))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    Lam, Phi, Lam0 = random_case(np.random.default_rng(seed))
    eta, step = 2.0, 1e-5
    Xi = xy_gradient(Lam, Phi, eta, Lam0)
    d = len(Lam)
    for i in range(d):
        for j in range(i, d):
            D = np.zeros((d, d))
            D[i, j] = D[j, i] = 1.0 if i == j else 0.5
            fd = (xy_smoothed(Lam + step * D, Phi, eta, Lam0) - xy_smoothed(Lam - step * D, Phi, eta, Lam0)) / (2 * step)
            if abs(Xi[i, j]) >= 1e-8:
                assert abs(-fd - Xi[i, j]) <= 1e-5 * abs(Xi[i, j])


def test_gradient_trace_bounded_by_M():
    rng = np.random.default_rng(2)
    for _ in range(100):
        Lam, Phi, Lam0 = random_case(rng)
        f = SmoothedXY(Phi, 5.0, Lam0)
        Xi = f.xi(Lam)
        assert np.linalg.eigvalsh(Xi).min() >= -1e-12
        assert np.trace(Xi) <= f.M * (1 + 1e-12)


def test_smoothness_constants():
    Lam0 = np.diag([0.5, 2.0])
    f = SmoothedXY(np.eye(2), 3.0, Lam0)
    assert f.L == f.M == pytest.approx(4.0)
    assert f.beta == pytest.approx(2 * 8 * (1 + 3 * 2))


def test_objective_contracts():
    with pytest.raises(ContractError):
        SmoothedXY(np.eye(2), 0.0, np.eye(2))
    with pytest.raises(ContractError):
        SmoothedXY(np.eye(2), 1.0, np.diag([1.0, 0.0]))
    with pytest.raises(ContractError):
        xy_value(np.eye(2), np.zeros((0, 2)), np.eye(2))


def test_default_eta():
    Phi = np.eye(3)
    f = SmoothedXY.build(Phi)
    assert np.allclose(f.Lam0, np.eye(3) / 3)
    assert f.eta == pytest.approx(2 * (1 + 1 / 3) * math.log(3))
    assert SmoothedXY.default_eta(Phi[:1], np.eye(3)) == 1.0
    assert SmoothedXY.default_eta(1e-9 * Phi, np.eye(3)) == 1e6


# -- Frank-Wolfe -------------------------------------------------------------------


def test_fw_single_step_halves():
    V, Phi = simplex_design_case(0)
    f = SmoothedXY(Phi, 10.0, 1e-3 * np.eye(3))
    st_ = approx_frank_wolfe(f, vertex_oracle(V), 1, V[0])
    y = st_.history[0].y
    assert np.array_equal(st_.Lam, 0.5 * (V[0] + y))


def test_fw_step_sizes_and_averaging():
    V, Phi = simplex_design_case(1)
    f = SmoothedXY(Phi, 10.0, 1e-3 * np.eye(3))
    T = 50
    st_ = approx_frank_wolfe(f, vertex_oracle(V), T, V.mean(0))
    assert st_.step_sizes == [1 / (t + 1) for t in range(1, T + 1)]
    assert np.abs(st_.replay_average() - st_.Lam).max() <= 1e-12
    assert np.linalg.norm(st_.Lam, 2) <= 1


def test_fw_rejects_infeasible_oracle():
    f = SmoothedXY(np.eye(2), 1.0, np.eye(2))
    with pytest.raises(ContractError):
        approx_frank_wolfe(f, lambda Xi, t: (2 * np.eye(2), 0.0, None), 3, np.eye(2) / 2)
    with pytest.raises(ContractError):
        approx_frank_wolfe(f, lambda Xi, t: (np.array([[0.5, 0.1], [0.0, 0.5]]), 0.0, None), 3, np.eye(2) / 2)


def test_fw_vertex_oracle_ties_pick_lowest_index():
    V = np.stack([np.eye(2) / 2] * 3)
    assert vertex_oracle(V)(np.eye(2), 1)[2] == 0


def test_fw_matches_grid_optimum():
    V, Phi = simplex_design_case(3)
    f = SmoothedXY(Phi, 1000.0, 1e-8 * np.eye(3))
    st_ = approx_frank_wolfe(f, vertex_oracle(V), 1000, V.mean(0))
    fw = xy_value(st_.Lam, Phi, np.zeros((3, 3)))
    grid = grid_design_optimum(V, Phi)
    assert fw <= 1.05 * grid
    # the grid is a subset of the hull, so FW may only beat it by the smoothing slack
    assert fw >= grid * (1 - 0.05)


def test_fw_rate_bound_holds():
    V, Phi = simplex_design_case(4)
    f = SmoothedXY(Phi, 1.0, 0.5 * np.eye(3))
    best = grid_design_optimum(V + 0.5 * np.eye(3), Phi, res=60)
    for T in (1, 5, 20):
        st_ = approx_frank_wolfe(f, vertex_oracle(V), T, V[0])
        # best >= hull optimum of the plain value >= smoothed optimum - log|Phi|/eta
        assert f.smoothed(st_.Lam) - best <= fw_rate_bound(f.beta, T) + math.log(len(Phi)) / f.eta + 1e-9
    assert fw_rate_bound(2.0, 4, [1.0, 1.0]) == pytest.approx(2 * 4 * (math.log(4) + 1) / 10 + 2 / 5)


def test_kiefer_wolfowitz_ceiling():
    mdp, _, _ = tabular_instance(5, S=2, A=2, H=2)
    pols = all_deterministic_policies(mdp)
    h = 1
    V = np.stack([exact_covariance(mdp, p, h) for p in pols])
    Phi = np.stack([exact_feature_visitation(mdp, p)[h] for p in pols])
    U = reachable_basis(mdp, h)
    Vr = np.einsum("di,kde,ej->kij", U, V, U)
    Phir = Phi @ U
    f = SmoothedXY(Phir, 1e4, 1e-9 * np.eye(U.shape[1]))
    st_ = approx_frank_wolfe(f, vertex_oracle(Vr), 2000, Vr.mean(0))
    assert xy_value(st_.Lam, Phir, np.zeros_like(f.Lam0)) <= U.shape[1] * 1.05


# -- schedule and thresholds ------------------------------------------------------------


@pytest.mark.parametrize("i,expect", [(1, (2, 8)), (2, (4, 64)), (3, (8, 512))])
def test_schedule(i, expect):
    assert schedule(i) == expect


def test_n_star_halving():
    assert n_star(3.0, 0.05) == pytest.approx(2 * n_star(3.0, 0.1))


def test_K0_min_is_minimal():
    rb = RegretBound(1.0, 1.0)
    K = K0_min(4, 10.0, 1.0, 0.1, rb, 2)
    assert K >= 1
    k0, k1 = K0_tilde(4, 10.0, 1.0, 0.1, rb, 2)
    assert k0 > 0 and k1 > 0
    assert K0_min(1, 1e12, 1e-6, 0.5, RegretBound(0.0, 0.0), 1) == 1


# -- FWRegret --------------------------------------------------------------------------


def test_design_reward_formula():
    rng = np.random.default_rng(0)
    phi = rng.random((3, 2, 4))
    Xi = np.zeros((4, 4))
    Xi[0, 0] = 1.0
    assert np.allclose(design_reward(phi, Xi, 1.0), phi[..., 0] ** 2)
    assert design_reward(phi, Xi, 1.0, mode="max").max() == pytest.approx(1.0)


def one_action_mdp(H=2, S=3):
    nxt = np.zeros((H, S, 1), int)
    nxt[:, :, 0] = (np.arange(S) + 1) % S
    return make_deterministic_mdp(nxt, np.full((H, S, 1), 0.3))


def test_fw_regret_single_policy_is_empirical_covariance():
    mdp = one_action_mdp()
    f = SmoothedXY.build(mdp.phi[:, 0, :])
    res = fw_regret(f, EnvSampler(mdp, 0), 5, 40, 1, 0.1)
    assert res.episodes == 240
    assert np.abs(res.state.Lam - res.covariance / 240).max() <= 1e-12
    assert res.data.n == 240


class LoudObjective(SmoothObjective):
    L = M = beta = 0.01

    def value(self, Lam):
        return 0.0

    smoothed = value

    def xi(self, Lam):
        return np.eye(len(Lam))


def test_fw_regret_rejects_out_of_range_reward(tab3):
    mdp, _, _ = tab3
    with pytest.raises(ContractError, match=r"\[0, 1\]"):
        fw_regret(LoudObjective(), EnvSampler(mdp, 0), 2, 10, 1, 0.1)
    with pytest.raises(ContractError):
        fw_regret(LoudObjective(), EnvSampler(mdp, 0), 2, 0, 1, 0.1)


def test_fw_regret_with_oracle_matches_exact_fw():
    mdp, _, _ = tabular_instance(8, S=2, A=2, H=2)
    h, T, K = 1, 10, 3000
    pols = all_deterministic_policies(mdp)
    Phi = np.stack([exact_feature_visitation(mdp, p)[h] for p in pols])
    f = SmoothedXY(Phi, 20.0, np.eye(mdp.d) / mdp.d)
    V = np.stack([exact_covariance(mdp, p, h) for p in pols])
    x1 = exact_covariance(mdp, uniform_policy(mdp), h)
    exact = f.value(approx_frank_wolfe(f, vertex_oracle(V), T, x1).Lam)
    sims = [f.value(fw_regret(f, EnvSampler(mdp, s), T, K, h, 0.1, OracleLearner()).state.Lam) for s in range(20)]
    assert abs(np.mean(sims) - exact) <= 3 * np.std(sims, ddof=1)


# -- ConditionedCov -------------------------------------------------------------------


def test_conditioned_cov_single_round():
    phi = np.array([[[1.0]]])
    mdp = make_deterministic_mdp(np.zeros((1, 1, 1), int), np.full((1, 1, 1), 0.5))
    res = conditioned_cov(EnvSampler(mdp, 0), 10, 0.5, 0.1, 0, config=DesignConfig(cond_c=1e-6))
    assert np.array_equal(mdp.phi, phi)
    assert res.rounds == 1 and res.target_met
    assert res.covariance[0, 0] == res.episodes


def test_conditioned_cov_rerun_keeps_half_the_eigenvalue():
    mdp, _, _ = tabular_instance(3, S=2, A=2, H=2)
    h = 1
    U = reachable_basis(mdp, h)
    cfg = DesignConfig(cond_c=0.5)
    ok = 0
    for trial in range(50):
        res = conditioned_cov(EnvSampler(mdp, trial), 200, 5.0, 0.1, h, LsviLearner(seed=trial), cfg)
        reps = math.ceil(200 / sum(n for _, n in res.policies))
        lam1 = np.linalg.eigvalsh(U.T @ res.phase1 @ U)[0]
        lam2 = np.linalg.eigvalsh(U.T @ (res.covariance - res.phase1) @ U)[0] / reps
        ok += lam2 >= 0.5 * lam1
    assert ok == 50


def test_conditioned_cov_hard_instance(scaled4):
    _, mdp = scaled4
    res = conditioned_cov(EnvSampler(mdp, 0), 1000, 20.0, 0.1, 0, config=DesignConfig(cond_c=0.01))
    assert res.target_met
    assert res.min_eig >= res.target
    assert res.complement is None


def test_conditioned_cov_stagnation_names_step():
    # a feature direction that no state reaches with positive weight at step 1
    mdp, _, _ = tabular_instance(0, S=2, A=2, H=2)
    cfg = DesignConfig(cond_c=1e3, cond_patience=2, cond_max_episodes=2000)
    with pytest.raises(StagnationError, match="step 1"):
        conditioned_cov(EnvSampler(mdp, 0), 10, 1e9, 0.1, 1, config=cfg)


# -- OptCov -----------------------------------------------------------------------------


def test_collect_xy_design_post_hoc(scaled4):
    _, mdp = scaled4
    pols = hard_instance_policy_set(mdp, distinct=True)
    Phi = np.stack([exact_feature_visitation(mdp, p)[0] for p in pols])
    eps_exp = 0.05
    cfg = DesignConfig(scale=1e-3, gate="off", cond_c=0.01)
    res = collect_xy_design(EnvSampler(mdp, 0), Phi, eps_exp, 0.1, 1.0, 0, config=cfg)
    assert res.flags == ()
    assert xy_value(res.covariance, Phi, np.zeros((mdp.d, mdp.d))) <= eps_exp
    assert res.episodes == res.data.n
    rows = trace_csv(res.trace).splitlines()
    assert rows[0] == ",".join(TRACE_COLUMNS) and len(rows) == len(res.trace) + 1
    assert res.config["constant_scale"] == 1e-3


def test_collect_xy_design_budget_cap(scaled4):
    _, mdp = scaled4
    Phi = np.eye(mdp.d)[:2] / 2
    cfg = DesignConfig(gate="off", cond_c=0.01, cap=300)
    res = collect_xy_design(EnvSampler(mdp, 0), Phi, 1e-6, 0.1, 1.0, 0, config=cfg)
    assert res.partial and res.episodes <= 300


def test_design_config_contracts():
    with pytest.raises(ContractError):
        DesignConfig(scale=0)
    with pytest.raises(ContractError):
        DesignConfig(gate="maybe")
    assert DesignConfig(scale=0.5).cond_constant == 6272.0


# -- covariance concentration ------------------------------------------------------------


def test_covariance_concentration_rate(tab3):
    mdp, _, _ = tab3
    h = 1
    Ks = [100, 1000, 10_000, 100_000]
    rng = np.random.default_rng(0)
    reward = RewardFunction(rng.random(mdp.R.shape))
    errs = []
    for K in Ks:
        e = []
        for seed in range(5):
            res = run_regmin(EnvSampler(mdp, seed), reward, K, 0.1, LsviLearner(seed=seed))
            expect = sum(n * exact_covariance(mdp, p, h) for p, n in res.segments) / K
            e.append(np.linalg.norm(res.covariance[h] / K - expect, 2))
        errs.append(np.mean(e))
    slope = np.polyfit(np.log(Ks), np.log(errs), 1)[0]
    assert abs(slope + 0.5) <= 0.15
