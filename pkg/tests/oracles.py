"""Brute-force reference computations shared by the tests."""

import itertools

import numpy as np


def compositions(n, m):
    """All ways to write m as an ordered sum of n nonnegative integers."""
    c = np.array(list(itertools.combinations(range(m + n - 1), n - 1)))
    ext = np.hstack([np.full((len(c), 1), -1), c, np.full((len(c), 1), m + n - 1)])
    return np.diff(ext, axis=1) - 1


def grid_design_optimum(V, Phi, res=100):
    """min over the grid-weighted mixtures of V of max_phi phi^T Lam^{-1} phi, for d = 3.

    Uses the closed-form 3x3 adjugate so the whole grid is evaluated at once.
    """
    lam = compositions(len(V), res) / res
    iu = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
    E = lam @ np.stack([V[:, i, j] for i, j in iu], 1)
    a, b, c, d, e, f = E.T
    A00, A01, A02 = d * f - e * e, c * e - b * f, b * e - c * d
    A11, A12, A22 = a * f - c * c, b * c - a * e, a * d - b * b
    det = a * A00 + b * A01 + c * A02
    q = np.full(len(lam), -np.inf)
    for x, y, z in Phi:
        num = A00 * x * x + A11 * y * y + A22 * z * z + 2 * (A01 * x * y + A02 * x * z + A12 * y * z)
        q = np.maximum(q, num / det)
    q[det <= 1e-15] = np.inf
    return float(q.min())


def simplex_design_case(inst, n_pol=5):
    """Known-covariance toy: 5 stochastic policies on a 3-dim simplex MDP, step 1."""
    from pedelkit.instances import make_simplex_mdp
    from pedelkit.mdp_core import StochasticTable, exact_covariance, exact_feature_visitation

    rng = np.random.default_rng(inst)
    mdp = make_simplex_mdp(3, 3, 3, 2, seed=inst)
    pols = [StochasticTable(rng.dirichlet(np.ones(3) * 0.3, size=(2, 3))) for _ in range(n_pol)]
    V = np.stack([exact_covariance(mdp, p, 1) for p in pols])
    Phi = np.stack([exact_feature_visitation(mdp, p)[1] for p in pols])
    return V, Phi
