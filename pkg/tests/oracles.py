"""Slow, independent reference solvers used only by the tests.

Nothing here imports the package's solvers: the adaptive LASSO oracle is
FISTA with backtracking, the fused LASSO oracle is a shrinking dense grid
search, and the g-formula oracle enumerates the empirical distribution of
discrete data.
"""

import itertools

import numpy as np


def logistic_mean_loss(X, y, beta):
    eta = X @ beta
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


def _grad(X, y, beta):
    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    return X.T @ (p - y) / X.shape[0]


def standardize_columns(X, unpen):
    sc = np.ones(X.shape[1])
    sd = X.std(axis=0)
    sc[~unpen] = sd[~unpen]
    return sc


def adaptive_lasso_objective(X, y, unpen, w, lam, coef):
    """Mean loss + lam * sum w_j |coef_j * sd_j| over penalized columns."""
    sc = standardize_columns(X, unpen)
    pen = np.where(unpen, 0.0, w)
    return logistic_mean_loss(X, y, coef) + lam * float(np.sum(pen * np.abs(coef * sc)))


def fista_adaptive_lasso(X, y, unpen, w, lam, iters=200000, tol=1e-15):
    """Accelerated proximal gradient on the standardized problem; returns original-scale coefficients."""
    sc = standardize_columns(X, unpen)
    Xs = X / sc
    pen = np.where(unpen, 0.0, w) * lam
    P = X.shape[1]
    b = np.zeros(P)
    z = b.copy()
    t = 1.0
    L = 0.25 * np.linalg.norm(Xs, 2) ** 2 / X.shape[0]

    def F(v):
        return logistic_mean_loss(Xs, y, v) + float(np.sum(pen * np.abs(v)))

    fb = F(b)
    for _ in range(iters):
        g = _grad(Xs, y, z)
        u = z - g / L
        nb = np.sign(u) * np.maximum(np.abs(u) - pen / L, 0.0)
        fn = F(nb)
        # restart momentum whenever the objective goes up
        if fn > fb:
            z = b.copy()
            t = 1.0
            continue
        tn = (1 + np.sqrt(1 + 4 * t * t)) / 2
        z = nb + (t - 1) / tn * (nb - b)
        done = fb - fn < tol and np.max(np.abs(nb - b)) < 1e-12
        b, fb, t = nb, fn, tn
        if done:
            break
    return b / sc, fb


def fused_objective(X, y, edges, weights, lam1, coef):
    pen = sum(w * abs(coef[u] - coef[v]) for (u, v), w in zip(edges, weights))
    return logistic_mean_loss(X, y, coef) + lam1 * pen


def grid_fused_lasso(X, y, edges, weights, lam1, center=None, width=4.0, points=15, rounds=80):
    """Dense grid over all coefficients, re-centred and shrunk each round.

    Each round evaluates ``points ** P`` candidates in a box around the
    current best point; the box halves when the best point is interior.
    """
    P = X.shape[1]
    c = np.zeros(P) if center is None else np.asarray(center, float).copy()
    h = width
    E = np.array(edges, dtype=int).reshape(-1, 2)
    W = np.asarray(weights, float)
    best = fused_objective(X, y, edges, weights, lam1, c)
    for _ in range(rounds):
        axes = [np.linspace(c[j] - h, c[j] + h, points) for j in range(P)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, P)
        vals = np.empty(grid.shape[0])
        for s in range(0, grid.shape[0], 20000):
            G = grid[s:s + 20000]
            eta = G @ X.T
            loss = np.mean(np.logaddexp(0.0, eta) - y * eta, axis=1)
            if E.size:
                loss = loss + lam1 * np.abs(G[:, E[:, 0]] - G[:, E[:, 1]]) @ W
            vals[s:s + 20000] = loss
        k = int(np.argmin(vals))
        interior = bool(np.all(np.abs(grid[k] - c) < h * (1 - 1e-9)))
        if vals[k] <= best:
            best, c = float(vals[k]), grid[k].copy()
        if interior:
            h *= 0.5
        if h < 1e-7:
            break
    return c, best


def enumerated_g_formula(L0, A0, L1, A1, Y, a):
    """E_n[Y^a | L0 = l0] for each l0 by summing over the empirical law of discrete data."""
    out = {}
    for l0 in np.unique(L0):
        s0 = L0 == l0
        total = 0.0
        base = s0 & (A0 == a[0])
        for l1 in np.unique(L1[base]):
            p_l1 = np.mean(L1[base] == l1)
            cell = base & (L1 == l1) & (A1 == a[1])
            total += p_l1 * Y[cell].mean()
        out[float(l0)] = total
    return out


def msm_from_g_formula(L0, A0, L1, A1, Y, terms):
    """Least squares of the enumerated counterfactual means on the MSM regressors.

    Each (pattern, l0) cell gets weight P_n(L0 = l0), the same weighting as
    one row per subject and pattern.
    """
    rows, targets, wts = [], [], []
    for a in itertools.product((0, 1), repeat=2):
        g = enumerated_g_formula(L0, A0, L1, A1, Y, a)
        for l0, m in g.items():
            cum = float(sum(a))
            reg = {"intercept": 1.0, "modifier": l0, "cum": cum, "modifier:cum": l0 * cum}
            rows.append([reg[t] for t in terms])
            targets.append(m)
            wts.append(np.mean(L0 == l0))
    X = np.array(rows)
    w = np.array(wts)
    return np.linalg.solve(X.T @ (X * w[:, None]), X.T @ (w * np.array(targets)))
