"""Penalized logistic regression: adaptive LASSO and graph-fused LASSO.

Both solvers minimise the mean negative Bernoulli log-likelihood plus a
penalty, so ``lambda`` here equals the summed-loss penalty divided by the
number of pooled rows.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import expit

from .data_model import PenaltyGraph, PooledDesign
from .glm_core import fit_logistic, logistic_loglik

logger = logging.getLogger(__name__)

LAMBDA_RATIO = 1e-4
PREFUSE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class AdaptiveLassoFit:
    coefficients: np.ndarray
    support: np.ndarray
    lam: float
    penalty_weights: np.ndarray
    objective: float
    log_likelihood: float
    n_obs: int
    unpenalized_mask: np.ndarray
    converged: bool = True
    iterations: int = 0
    scale: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class FusedFit:
    coefficients: np.ndarray
    groups: tuple
    lambda1: float
    gamma1: float
    objective: float
    log_likelihood: float
    n_obs: int
    unpenalized_mask: np.ndarray
    zero_mask: np.ndarray
    converged: bool = True
    iterations: int = 0
    bic: float = field(default=np.nan)


# ---------------------------------------------------------------------------
# adaptive LASSO


@numba.njit(cache=True)
def _softplus_loss(eta, y):
    s = 0.0
    for i in range(eta.shape[0]):
        e = eta[i]
        if e > 0:
            s += e + np.log1p(np.exp(-e)) - y[i] * e
        else:
            s += np.log1p(np.exp(e)) - y[i] * e
    return s / eta.shape[0]


@numba.njit(cache=True)
def _newton_step(X, y, eta, beta, pen, lam, idx, max_sweeps, tol_inner):
    # proximal Newton direction restricted to the columns in idx
    N = X.shape[0]
    A = idx.shape[0]
    XA = np.empty((N, A))
    WA = np.empty((N, A))
    r = np.empty(N)
    for i in range(N):
        p = 1.0 / (1.0 + np.exp(-eta[i]))
        hi = max(p * (1.0 - p), 1e-10) / N
        r[i] = (y[i] - p) / N
        for a in range(A):
            xa = X[i, idx[a]]
            XA[i, a] = xa
            WA[i, a] = hi * xa
    H = XA.T @ WA
    g = XA.T @ r
    b = np.empty(A)
    for a in range(A):
        b[a] = beta[idx[a]]
    u = -g  # gradient of the quadratic model at b
    for sweep in range(max_sweeps):
        dmax = 0.0
        for a in range(A):
            h = H[a, a]
            if h <= 0:
                continue
            z = h * b[a] - u[a]
            t = lam * pen[idx[a]]
            if z > t:
                x = (z - t) / h
            elif z < -t:
                x = (z + t) / h
            else:
                x = 0.0
            d = x - b[a]
            if d != 0.0:
                for c in range(A):
                    u[c] += H[c, a] * d
                b[a] = x
                dd = abs(d) * np.sqrt(h)
                if dd > dmax:
                    dmax = dd
        if dmax < tol_inner:
            break
    d = np.zeros(beta.shape[0])
    for a in range(A):
        d[idx[a]] = b[a] - beta[idx[a]]
    return d


@numba.njit(cache=True)
def _kkt_violators(X, y, eta, beta, pen, lam, active):
    N, P = X.shape
    r = np.empty(N)
    for i in range(N):
        r[i] = (y[i] - 1.0 / (1.0 + np.exp(-eta[i]))) / N
    found = False
    for j in range(P):
        if active[j]:
            continue
        gj = 0.0
        for i in range(N):
            gj += X[i, j] * r[i]
        if abs(gj) > lam * pen[j] * (1.0 + 1e-9) + 1e-14:
            active[j] = True
            found = True
    return found


@numba.njit(cache=True)
def _al_solve(X, y, pen, lam, beta0, max_outer, tol, max_sweeps, tol_inner, move_tol=1e-9):
    N, P = X.shape
    beta = beta0.copy()
    eta = X @ beta
    obj = _softplus_loss(eta, y) + lam * np.sum(pen * np.abs(beta))
    active = np.empty(P, np.bool_)
    for j in range(P):
        active[j] = beta[j] != 0.0 or pen[j] == 0.0
    _kkt_violators(X, y, eta, beta, pen, lam, active)
    converged = False
    it = 0
    while it < max_outer:
        idx = np.flatnonzero(active)
        inner_done = False
        while it < max_outer:
            it += 1
            d = _newton_step(X, y, eta, beta, pen, lam, idx, max_sweeps, tol_inner)
            Xd = X @ d
            step = 1.0
            new_obj = obj
            new_beta = beta
            new_eta = eta
            for _ in range(50):
                cb = beta + step * d
                ce = eta + step * Xd
                co = _softplus_loss(ce, y) + lam * np.sum(pen * np.abs(cb))
                if co <= obj + 1e-13 * max(1.0, abs(obj)):
                    new_obj = co
                    new_beta = cb
                    new_eta = ce
                    break
                step *= 0.5
            change = obj - new_obj
            move = np.max(np.abs(new_beta - beta)) if P > 0 else 0.0
            beta = new_beta
            eta = new_eta
            obj = new_obj
            if change <= tol * max(1.0, abs(obj)) and move <= move_tol * (1.0 + np.max(np.abs(beta))):
                inner_done = True
                break
        if not inner_done:
            break
        if not _kkt_violators(X, y, eta, beta, pen, lam, active):
            converged = True
            break
    return beta, obj, converged, it


def _penalty_vector(design_unpen, penalty_weights):
    """Split columns into excluded (infinite weight) and penalty multipliers."""
    w = np.asarray(penalty_weights, float).copy()
    unpen = np.asarray(design_unpen, bool)
    if w.shape != unpen.shape:
        raise ValueError("one penalty weight per design column is required")
    w[unpen] = 0.0
    if np.any(w < 0) or np.any(np.isnan(w)):
        raise ValueError("penalty weights must be nonnegative")
    excluded = np.isinf(w)
    return w, excluded


def _scales(X, unpen, standardize):
    P = X.shape[1]
    sc = np.ones(P)
    if standardize:
        sd = X.std(axis=0)
        pen = ~unpen
        sc[pen] = sd[pen]
    return sc


def _design_arrays(design):
    if isinstance(design, PooledDesign):
        return design.X, design.y, design.unpenalized_mask
    X, y, unpen = design
    return np.asarray(X, float), np.asarray(y, float), np.asarray(unpen, bool)


def adaptive_lasso_path(design, penalty_weights, lambdas, standardize=True, start=None,
                        max_outer=100, tol=1e-12, exclude=None) -> list[AdaptiveLassoFit]:
    """Adaptive LASSO fits along ``lambdas`` with warm starts.

    ``design`` is a PooledDesign or a tuple ``(X, y, unpenalized_mask)``.
    Penalized columns are scaled to unit standard deviation before fitting
    (the per-time intercepts absorb centring), so the penalty acts on the
    standardized coefficients. Results are returned on the original scale.
    """
    X, y, unpen = _design_arrays(design)
    N, P = X.shape
    w, excluded = _penalty_vector(unpen, penalty_weights)
    sc = _scales(X, unpen, standardize)
    excluded = excluded | (sc <= 1e-12)
    if exclude is not None:
        excluded = excluded | np.asarray(exclude, bool)
    keep = np.flatnonzero(~excluded)
    Xs = np.ascontiguousarray(X[:, keep] / sc[keep])
    pen = np.ascontiguousarray(w[keep])
    beta = np.zeros(keep.size)
    if start is not None:
        beta = np.asarray(start, float)[keep] * sc[keep]
    yv = np.ascontiguousarray(y, dtype=float)
    fits = []
    for lam in lambdas:
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        beta, obj, conv, it = _al_solve(Xs, yv, pen, float(lam), beta, max_outer, tol, 10000, 1e-11)
        if not conv:
            logger.debug("adaptive LASSO did not converge at lambda=%g", lam)
        coef = np.zeros(P)
        coef[keep] = beta / sc[keep]
        support = coef != 0
        support[unpen & ~excluded] = True
        ll = -N * _softplus_loss(Xs @ beta, yv)
        fits.append(AdaptiveLassoFit(coef, support, float(lam), np.asarray(penalty_weights, float),
                                     float(obj), ll, N, unpen, bool(conv), int(it), sc))
    return fits


def adaptive_lasso_logistic(design, penalty_weights, lam, standardize=True, start=None) -> AdaptiveLassoFit:
    """Minimise mean logistic loss + lam * sum_j w_j |alpha_j| over penalized columns."""
    return adaptive_lasso_path(design, penalty_weights, [lam], standardize, start)[0]


def lambda_max(design, penalty_weights, standardize=True, exclude=None) -> float:
    """Smallest lambda at which every penalized coefficient is zero."""
    X, y, unpen = _design_arrays(design)
    w, excluded = _penalty_vector(unpen, penalty_weights)
    if exclude is not None:
        excluded = excluded | np.asarray(exclude, bool)
    cand = ~unpen & ~excluded & (w > 0)
    if not np.any(cand):
        raise ValueError("no penalized column has a finite penalty weight")
    sc = _scales(X, unpen, standardize)
    null_cols = unpen & ~excluded
    null = fit_logistic(X, y, fixed_zero_mask=~null_cols)
    p = expit(X @ null.coefficients)
    score = np.abs(X.T @ (y - p)) / X.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = score[cand] / (sc[cand] * w[cand])
    return float(np.max(ratio))


def lambda_grid(design, penalty_weights, n_points=20, ratio=LAMBDA_RATIO, standardize=True,
                exclude=None) -> np.ndarray:
    """Decreasing log-spaced grid from lambda_max down to ratio * lambda_max."""
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    lmax = lambda_max(design, penalty_weights, standardize, exclude)
    # a hair above the bound so the first point is exactly the null model
    lmax *= 1.0 + 1e-9
    return np.exp(np.linspace(np.log(lmax), np.log(lmax * ratio), n_points))


# ---------------------------------------------------------------------------
# graph-fused LASSO


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def _max_flow_cut(n_nodes, arcs, source, sink):
    """Edmonds-Karp on a tiny graph. Returns (flow value, source-side node set)."""
    cap = {}
    adj = [set() for _ in range(n_nodes)]
    for u, v, c in arcs:
        cap[(u, v)] = cap.get((u, v), 0.0) + c
        cap.setdefault((v, u), 0.0)
        adj[u].add(v)
        adj[v].add(u)
    flow = 0.0
    eps = 1e-15
    while True:
        prev = [-1] * n_nodes
        prev[source] = source
        q = deque([source])
        while q and prev[sink] < 0:
            u = q.popleft()
            for v in adj[u]:
                if prev[v] < 0 and cap[(u, v)] > eps:
                    prev[v] = u
                    q.append(v)
        if prev[sink] < 0:
            break
        aug = np.inf
        v = sink
        while v != source:
            u = prev[v]
            aug = min(aug, cap[(u, v)])
            v = u
        v = sink
        while v != source:
            u = prev[v]
            cap[(u, v)] -= aug
            cap[(v, u)] += aug
            v = u
        flow += aug
    side = {source}
    q = deque([source])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in side and cap[(u, v)] > eps:
                side.add(v)
                q.append(v)
    return flow, side


class _FusedQP:
    """Exact solver for 0.5 b'Hb - c'b + lam * sum_e w_e |b_u - b_v|.

    Coordinate descent over groups of equal coefficients. A group that
    lands on the value of a neighbouring group is merged with it; when
    descent stalls, each group is tested for a profitable split with a
    max-flow feasibility check on its internal edges.
    """

    def __init__(self, H, c, edges, weights, lam):
        self.H = H
        self.c = c
        self.P = H.shape[0]
        self.nbr = [dict() for _ in range(self.P)]
        for (u, v), w in zip(edges, weights):
            self.nbr[u][v] = self.nbr[u].get(v, 0.0) + lam * w
            self.nbr[v][u] = self.nbr[v].get(u, 0.0) + lam * w

    def solve(self, b, labels, max_rounds=200, max_sweeps=5000, tol=1e-12):
        H, c = self.H, self.c
        b = b.copy()
        groups = {}
        for j, g in enumerate(labels):
            groups.setdefault(g, []).append(j)
        groups = [sorted(m) for m in groups.values()]
        for m in groups:
            b[m] = np.mean(b[m])
        for _ in range(max_rounds):
            groups, b = self._descend(groups, b, max_sweeps, tol)
            split = self._split(groups, b)
            if not split:
                break
            groups = split
        labels = np.empty(self.P, dtype=int)
        for gi, m in enumerate(groups):
            labels[m] = gi
        return b, labels

    def _descend(self, groups, b, max_sweeps, tol):
        H, c = self.H, self.c
        scale = np.sqrt(np.maximum(np.diag(H), 1e-300))
        grad = H @ b - c
        for _ in range(max_sweeps):
            changed = 0.0
            merged = False
            gid = np.empty(self.P, dtype=int)
            for gi, m in enumerate(groups):
                gid[m] = gi
            alive = [True] * len(groups)
            for gi in range(len(groups)):
                if not alive[gi]:
                    continue
                m = groups[gi]
                v0 = b[m[0]]
                a = H[np.ix_(m, m)].sum()
                # slope of the smooth part at v0 along the group direction
                s = grad[m].sum()
                links = {}
                for j in m:
                    for k, w in self.nbr[j].items():
                        h = gid[k]
                        if h != gi:
                            links[h] = links.get(h, 0.0) + w
                if a <= 0:
                    continue
                v, hit = _piecewise_min(a, s - a * v0, [(b[groups[h][0]], w, h) for h, w in links.items()])
                d = v - v0
                if d != 0.0:
                    b[m] = v
                    grad += H[:, m].sum(axis=1) * d
                    changed = max(changed, abs(d) * np.sqrt(a))
                if hit:
                    for h in hit:
                        if alive[h]:
                            m = m + groups[h]
                            alive[h] = False
                            groups[h] = []
                    m.sort()
                    groups[gi] = m
                    b[m] = v
                    gid[m] = gi
                    merged = True
            groups = [m for m, ok in zip(groups, alive) if ok]
            if not merged and changed < tol * max(1.0, float(np.max(scale))):
                break
        # final exact group values after merges
        grad = H @ b - c
        return groups, b

    def _split(self, groups, b):
        grad = self.H @ b - self.c
        out = []
        did = False
        for m in groups:
            if len(m) < 2:
                out.append(m)
                continue
            inside = set(m)
            r = {}
            for j in m:
                rj = grad[j]
                for k, w in self.nbr[j].items():
                    if k not in inside:
                        rj += w * np.sign(b[j] - b[k])
                r[j] = rj
            pos = {j: i + 1 for i, j in enumerate(m)}
            src, snk = 0, len(m) + 1
            arcs = []
            supply = 0.0
            for j in m:
                if r[j] < 0:
                    arcs.append((src, pos[j], -r[j]))
                    supply -= r[j]
                elif r[j] > 0:
                    arcs.append((pos[j], snk, r[j]))
                for k, w in self.nbr[j].items():
                    if k in inside and j < k:
                        arcs.append((pos[j], pos[k], w))
                        arcs.append((pos[k], pos[j], w))
            flow, side = _max_flow_cut(len(m) + 2, arcs, src, snk)
            total = sum(abs(x) for x in r.values())
            if supply - flow > 1e-9 * max(1.0, total):
                S = sorted(j for j in m if pos[j] in side)
                rest = sorted(j for j in m if pos[j] not in side)
                if S and rest:
                    out.extend([S, rest])
                    did = True
                    continue
            out.append(m)
        return out if did else None


def _piecewise_min(a, s, knots):
    """Minimise 0.5*a*v^2 + s*v + sum_h w_h |v - t_h|; return (v, merged ids)."""
    if not knots:
        return -s / a, []
    vals = {}
    for t, w, h in knots:
        e = vals.setdefault(t, [0.0, []])
        e[0] += w
        e[1].append(h)
    ts = sorted(vals)
    W = [vals[t][0] for t in ts]
    right = sum(W)
    left = 0.0
    for i, t in enumerate(ts):
        # interval below t
        v = -(s + left - right) / a
        if v < t:
            return v, []
        right -= W[i]
        lo = a * t + s + left - right - W[i]
        hi = a * t + s + left - right + W[i]
        if lo <= 0.0 <= hi:
            return t, vals[t][1]
        left += W[i]
    return -(s + left - right) / a, []


def _fused_objective(Xa, y, beta, edges, weights, lam):
    eta = Xa @ beta
    loss = float(np.mean(np.logaddexp(0.0, eta) - y * eta))
    pen = sum(w * abs(beta[u] - beta[v]) for (u, v), w in zip(edges, weights))
    return loss + lam * pen


def fused_lasso_logistic(X, y, edges, weights, lam1, zero_mask=None, unpenalized_mask=None,
                         start=None, max_outer=100, tol=1e-10, gamma1=np.nan) -> FusedFit:
    """Mean logistic loss + lam1 * sum_e w_e |alpha_u - alpha_v| with exact groups.

    Edges with infinite weight are merged before solving. Columns in
    ``zero_mask`` are fixed at zero and may not appear in ``edges``.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    N, P = X.shape
    zero = np.zeros(P, bool) if zero_mask is None else np.asarray(zero_mask, bool)
    unpen = np.zeros(P, bool) if unpenalized_mask is None else np.asarray(unpenalized_mask, bool)
    free = np.flatnonzero(~zero)
    fpos = {j: i for i, j in enumerate(free)}
    edges = [tuple(e) for e in edges]
    weights = np.asarray(weights, float)
    if len(edges) != weights.size:
        raise ValueError("one fusion weight per edge is required")
    if np.any(weights < 0):
        raise ValueError("fusion weights must be nonnegative")
    for u, v in edges:
        if zero[u] or zero[v]:
            raise ValueError("fusion edge touches an excluded column")
        if unpen[u] or unpen[v]:
            raise ValueError("fusion edge touches an unpenalized column")
    uf = _UnionFind(free.size)
    for (u, v), w in zip(edges, weights):
        if np.isinf(w):
            uf.union(fpos[u], fpos[v])
    roots = sorted({uf.find(i) for i in range(free.size)})
    atom_of = {r: a for a, r in enumerate(roots)}
    atom = np.array([atom_of[uf.find(i)] for i in range(free.size)], dtype=int)
    nA = len(roots)
    M = np.zeros((free.size, nA))
    M[np.arange(free.size), atom] = 1.0
    Xa = X[:, free] @ M
    agg = {}
    for (u, v), w in zip(edges, weights):
        a, b = atom[fpos[u]], atom[fpos[v]]
        if a == b or np.isinf(w):
            continue
        key = (min(a, b), max(a, b))
        agg[key] = agg.get(key, 0.0) + w
    a_edges = list(agg)
    a_w = np.array([agg[e] for e in a_edges])
    if lam1 == 0 or not a_edges:
        fit = fit_logistic(Xa, y, start=None if start is None else _atom_start(start, free, atom, nA))
        beta = fit.coefficients
        labels = np.arange(nA)
        converged, its = fit.converged, fit.iterations
    else:
        beta, labels, converged, its = _fused_irls(Xa, y, a_edges, a_w, float(lam1),
                                                   None if start is None else _atom_start(start, free, atom, nA),
                                                   max_outer, tol)
    coef = np.zeros(P)
    coef[free] = beta[atom]
    obj = _fused_objective(X, y, coef, edges, np.where(np.isinf(weights), 0.0, weights), lam1)
    ll = logistic_loglik(X @ coef, y, np.ones(N))
    groups = {}
    for i, j in enumerate(free):
        if not unpen[j]:
            groups.setdefault(labels[atom[i]], []).append(int(j))
    groups = tuple(sorted(tuple(m) for m in groups.values()))
    fit = FusedFit(coef, groups, float(lam1), gamma1, obj, ll, N, unpen, zero, converged, its)
    return FusedFit(**{**fit.__dict__, "bic": bic(fit)})


def _atom_start(start, free, atom, nA):
    s = np.asarray(start, float)[free]
    out = np.zeros(nA)
    cnt = np.zeros(nA)
    np.add.at(out, atom, s)
    np.add.at(cnt, atom, 1)
    return out / np.maximum(cnt, 1)


def _fused_irls(Xa, y, edges, w, lam, start, max_outer, tol):
    N, P = Xa.shape
    if start is None:
        beta = fit_logistic(Xa, y, max_iter=50).coefficients if P else np.zeros(0)
    else:
        beta = start.copy()
    labels = np.arange(P)
    obj = _fused_objective(Xa, y, beta, edges, w, lam)
    converged = False
    it = 0
    for it in range(1, max_outer + 1):
        eta = Xa @ beta
        p = expit(eta)
        h = np.maximum(p * (1 - p), 1e-10) / N
        g = Xa.T @ (y - p) / N
        H = (Xa * h[:, None]).T @ Xa
        qp = _FusedQP(H, H @ beta + g, edges, w, lam)
        b_new, lab_new = qp.solve(beta, labels)
        d = b_new - beta
        step = 1.0
        for _ in range(50):
            cand = beta + step * d
            cobj = _fused_objective(Xa, y, cand, edges, w, lam)
            if cobj <= obj + 1e-13 * max(1.0, abs(obj)):
                break
            step *= 0.5
        else:
            cand, cobj = beta, obj
        change = obj - cobj
        move = float(np.max(np.abs(cand - beta))) if P else 0.0
        beta, obj = cand, cobj
        labels = lab_new if step == 1.0 else np.arange(P)
        if change <= tol * max(1.0, abs(obj)) and move <= 1e-8 * (1 + float(np.max(np.abs(beta)))):
            converged = True
            break
    if step != 1.0:
        labels = np.arange(P)
    return beta, labels, converged, it


def graph_fused_lasso_logistic(design: PooledDesign, zero_mask, graph: PenaltyGraph, fusion_weights,
                               lambda1, gamma1=np.nan, start=None) -> FusedFit:
    """Fused LASSO over ``graph`` on a pooled design (no sparsity penalty)."""
    return fused_lasso_logistic(design.X, design.y, graph.edges, fusion_weights, lambda1,
                                zero_mask=zero_mask, unpenalized_mask=design.unpenalized_mask,
                                start=start, gamma1=gamma1)


def fusion_lambda_max(X, y, edges, weights, zero_mask, unpenalized_mask) -> float:
    """Penalty above which every connected component is fully fused."""
    X = np.asarray(X, float)
    P = X.shape[1]
    free = np.flatnonzero(~np.asarray(zero_mask, bool))
    edges = [tuple(e) for e in edges]
    weights = np.asarray(weights, float)
    fin = [(e, w) for e, w in zip(edges, weights) if np.isfinite(w)]
    if not fin:
        return 0.0
    fused = fused_lasso_logistic(X, y, edges, np.full(len(edges), np.inf), 0.0,
                                 zero_mask=zero_mask, unpenalized_mask=unpenalized_mask)
    p = expit(X @ fused.coefficients)
    grad = -(X.T @ (y - p)) / X.shape[0]
    uf = _UnionFind(P)
    for u, v in edges:
        uf.union(u, v)
    comps = {}
    for j in free:
        comps.setdefault(uf.find(j), []).append(j)
    best = 0.0
    for m in comps.values():
        if len(m) < 2:
            continue
        inside = set(m)
        ew = [(u, v, w) for (u, v), w in fin if u in inside]
        if len(m) <= 12:
            for mask in range(1, 2 ** len(m) - 1):
                S = {m[i] for i in range(len(m)) if mask >> i & 1}
                cut = sum(w for u, v, w in ew if (u in S) != (v in S))
                load = abs(sum(grad[j] for j in S))
                if cut > 0:
                    best = max(best, load / cut)
                elif load > 1e-12:
                    best = np.inf
        else:
            wmin = min(w for _, _, w in ew)
            best = max(best, 0.5 * sum(abs(grad[j]) for j in m) / wmin)
    return float(best)


def bic(fit, n_obs=None) -> float:
    """-2 loglik + df * log(n_obs); df counts fused groups and unpenalized columns."""
    n_obs = fit.n_obs if n_obs is None else n_obs
    unpen = np.asarray(fit.unpenalized_mask, bool)
    coef = fit.coefficients
    if isinstance(fit, FusedFit):
        free = ~np.asarray(fit.zero_mask, bool)
        df = int(np.count_nonzero(unpen & free))
        df += sum(1 for g in fit.groups if coef[g[0]] != 0)
    else:
        df = int(np.count_nonzero(unpen & fit.support)) + int(np.count_nonzero((coef != 0) & ~unpen))
    return float(-2.0 * fit.log_likelihood + df * np.log(n_obs))
