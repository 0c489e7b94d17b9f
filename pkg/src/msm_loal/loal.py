"""Longitudinal outcome-adaptive LASSO: selection, balance tuning and fusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data_model import (
    LongitudinalDataset,
    PenaltyGraph,
    PooledDesign,
    ValidationError,
    build_pooled_censoring_design,
    build_pooled_treatment_design,
    default_patterns,
    make_fusion_graph,
)
from .glm_core import SeparationError, SingularDesignError, fit_logistic
from .outcome_models import WorkingBeta, estimate_q_sequence, working_betas
from .penalized import (
    PREFUSE_TOL,
    adaptive_lasso_path,
    fused_lasso_logistic,
    fusion_lambda_max,
    lambda_grid,
)

logger = logging.getLogger(__name__)

TIE_TOL = 1e-10


class SelectionError(RuntimeError):
    """No candidate penalty produced a usable propensity model."""


@dataclass(frozen=True, eq=False)
class ModelFit:
    """Coefficients of one pooled model (treatment or censoring).

    ``constant`` maps model times whose response never varies to that
    response value; those times are left out of the fit and predicted
    exactly.
    """

    design: PooledDesign
    coefficients: np.ndarray
    support: np.ndarray
    groups: tuple = ()
    lam: float | None = None
    lam1: float | None = None
    converged: bool = True
    constant: dict = field(default_factory=dict)

    def probabilities(self) -> np.ndarray:
        """P(response = 1) per subject (rows) and model time (columns)."""
        d = self.design
        out = np.empty((d.n_subjects, len(d.blocks)))
        for i, b in enumerate(d.blocks):
            if b.tau in self.constant:
                out[:, i] = self.constant[b.tau]
            else:
                out[:, i] = expit(b.X_local @ self.coefficients[b.columns])
        return out

    def named(self) -> dict:
        return {nm: float(c) for nm, c in zip(self.design.column_names, self.coefficients)}


@dataclass(frozen=True, eq=False)
class PropensityFit:
    treatment: ModelFit
    censoring: ModelFit | None
    provenance: str
    gamma: float = np.nan
    gamma1: float = np.nan
    trail: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True, eq=False)
class BalanceReport:
    """Weighted absolute mean differences scaled by |beta| / se.

    ``treatment_terms`` and ``censoring_terms`` are aligned with the keys
    ``(tau, block, k)`` in ``treatment_keys`` and ``censoring_keys``.
    """

    treatment_keys: tuple
    treatment_terms: np.ndarray
    censoring_keys: tuple
    censoring_terms: np.ndarray
    lam: float | None = None
    lam_c: float | None = None

    @property
    def M(self) -> float:
        return float(np.sum(self.treatment_terms))

    @property
    def N(self) -> float:
        return float(np.sum(self.censoring_terms))

    @property
    def total(self) -> float:
        return self.M + self.N

    def terms(self) -> dict:
        out = {("A",) + k: float(v) for k, v in zip(self.treatment_keys, self.treatment_terms)}
        out.update({("C",) + k: float(v) for k, v in zip(self.censoring_keys, self.censoring_terms)})
        return out


@dataclass(frozen=True)
class LoalConfig:
    gamma: float = 2.5
    gamma1: float = 2.5
    gamma1_grid: tuple = ()
    n_lambda: int = 20
    lambda_ratio: float = 1e-4
    n_lambda1: int = 20
    lambda1_ratio: float = 1e-4
    q_spec: object = None
    outcome_family: str = "gaussian"
    graph: str = "clique"
    fuse: bool = True
    stabilizer: str = "none"
    joint_search: str = "grid"
    standardize: bool = True
    unpenalized_modifier: bool = False


# ---------------------------------------------------------------------------
# model fitting helpers


def _constant_times(design: PooledDesign) -> dict:
    out = {}
    for b in design.blocks:
        y = b.y_local[b.risk]
        if y.size == 0 or np.all(y == y[0]):
            out[b.tau] = float(y[0]) if y.size else 0.0
    return out


def _constant_mask(design: PooledDesign, const: dict) -> np.ndarray:
    mask = np.zeros(design.n_cols, bool)
    for b in design.blocks:
        if b.tau in const:
            mask[b.columns] = True
    return mask


def fit_unpenalized(design: PooledDesign, support=None, groups=()) -> ModelFit:
    """Logistic MLE on ``support`` with each group in ``groups`` sharing one coefficient."""
    const = _constant_times(design)
    cmask = _constant_mask(design, const)
    support = np.ones(design.n_cols, bool) if support is None else np.asarray(support, bool).copy()
    support &= ~cmask
    cols = np.flatnonzero(support)
    pos = {j: i for i, j in enumerate(cols)}
    merged = list(range(cols.size))
    for g in groups:
        for j in g:
            if j not in pos:
                raise ValidationError("fused column is outside the support")
        for j in g[1:]:
            merged[pos[j]] = pos[g[0]]
    # column summation for equality constraints
    roots = sorted(set(_root(merged, i) for i in range(cols.size)))
    rpos = {r: i for i, r in enumerate(roots)}
    M = np.zeros((cols.size, len(roots)))
    for i in range(cols.size):
        M[i, rpos[_root(merged, i)]] = 1.0
    Xr = design.X[:, cols] @ M
    names = ["+".join(design.column_names[cols[i]] for i in range(cols.size) if M[i, r]) for r in range(len(roots))]
    fit = fit_logistic(Xr, design.y, columns=names)
    coef = np.zeros(design.n_cols)
    coef[cols] = M @ fit.coefficients
    out_groups = _groups_from(design, support, groups)
    return ModelFit(design, coef, support, out_groups, None, None, fit.converged, const)


def _root(parent, i):
    while parent[i] != i:
        i = parent[i]
    return i


def _groups_from(design, support, groups):
    seen = set()
    out = []
    for g in groups:
        out.append(tuple(sorted(g)))
        seen.update(g)
    for j in np.flatnonzero(support & ~design.unpenalized_mask):
        if j not in seen:
            out.append((int(j),))
    return tuple(sorted(out))


# ---------------------------------------------------------------------------
# weights


class Stabilizer:
    """Numerator models P(A_t = 1 | L0^1) fitted per time on the treatment risk set."""

    def __init__(self, dataset: LongitudinalDataset, kind: str = "baseline"):
        if kind not in ("baseline", "intercept", "none"):
            raise ValueError(f"unknown stabilizer {kind!r}")
        self.kind = kind
        n, T1 = dataset.n, dataset.T + 1
        self.prob = np.full((n, T1), np.nan)
        if kind == "none":
            return
        mod = dataset.modifier if kind == "baseline" else None
        Z = np.ones((n, 1)) if mod is None else np.column_stack([np.ones(n), mod])
        for t, risk in enumerate(treatment_risk_sets(dataset)):
            a = dataset.treatments[risk, t]
            if np.all(a == a[0]):
                self.prob[:, t] = a[0]
                continue
            fit = fit_logistic(Z[risk], a)
            self.prob[:, t] = expit(Z @ fit.coefficients)


def treatment_risk_sets(dataset: LongitudinalDataset) -> list[np.ndarray]:
    out = []
    for t in range(dataset.T + 1):
        r = dataset.at_risk(t).copy()
        if dataset.monotone_treatment and t > 0:
            r &= dataset.treatments[:, t - 1] == 0
        out.append(r)
    return out


def treatment_factors(dataset: LongitudinalDataset, prob: np.ndarray, stab: Stabilizer | None):
    """Per-time ratio numerator / g_t(a_t | history) and the denominators.

    Factors are exactly 1 for subjects already initiated under monotone
    treatment and NaN where the treatment is unobserved.
    """
    A = dataset.treatments
    g = np.where(A == 1, prob, 1.0 - prob)
    if stab is None or stab.kind == "none":
        num = np.ones_like(g)
    else:
        num = np.where(A == 1, stab.prob, 1.0 - stab.prob)
    with np.errstate(divide="ignore"):
        # zero denominators are reported by the callers
        ratio = num / g
    if dataset.monotone_treatment and dataset.T > 0:
        done = np.zeros(dataset.n, bool)
        for t in range(1, dataset.T + 1):
            done = done | (A[:, t - 1] == 1)
            ratio[done, t] = 1.0
            g[done, t] = 1.0
    ratio[np.isnan(A)] = np.nan
    g[np.isnan(A)] = np.nan
    return ratio, g


def censoring_factors(dataset: LongitudinalDataset, cprob: np.ndarray | None):
    """Cumulative inverse probability of remaining uncensored, times 0..n_censor."""
    n = dataset.n
    K = dataset.n_censor
    out = np.ones((n, K + 1))
    if K == 0:
        return out
    stay = 1.0 - cprob
    for t in range(1, K + 1):
        out[:, t] = out[:, t - 1] / stay[:, t - 1]
    return out


def _cumprod_nan(x):
    return np.cumprod(np.nan_to_num(x, nan=np.inf), axis=1)


# ---------------------------------------------------------------------------
# balance


def adaptive_weights(beta: WorkingBeta, gamma: float = 2.5) -> dict:
    """omega = |beta|^-gamma per covariate coefficient; infinite when beta is 0."""
    out = {}
    for key, (b, _) in beta.covariate.items():
        out[key] = np.inf if b == 0 else abs(b) ** (-gamma)
    return out


def column_weights(design: PooledDesign, omega: dict, modifier: int | None = None) -> np.ndarray:
    w = np.zeros(design.n_cols)
    for j, c in enumerate(design.columns):
        if design.unpenalized_mask[j]:
            continue
        if (c.tau, c.block, c.k) not in omega:
            raise ValidationError(f"no working coefficient for design column {design.column_names[j]}")
        w[j] = omega[(c.tau, c.block, c.k)]
        if modifier is not None and c.block == 0 and c.k == modifier:
            w[j] = 0.0
    return w


class BalanceContext:
    """Precomputed pieces of the balance metric that do not depend on the propensity fit."""

    def __init__(self, dataset: LongitudinalDataset, beta: WorkingBeta, stabilizer: Stabilizer | None):
        self.dataset = dataset
        self.stab = stabilizer
        self.treat = []
        for tau, risk in enumerate(treatment_risk_sets(dataset)):
            self.treat.append(self._piece(tau, risk, dataset.treatments[:, tau], beta))
        self.cens = []
        for tau in range(1, dataset.n_censor + 1):
            risk = dataset.at_risk(tau - 1)
            self.cens.append(self._piece(tau, risk, dataset.censoring[:, tau - 1], beta))
        self.treatment_keys = tuple(k for p in self.treat for k in p[4])
        self.censoring_keys = tuple(k for p in self.cens for k in p[4])

    def _piece(self, tau, risk, group, beta):
        ds = self.dataset
        rows = np.flatnonzero(risk)
        L = ds.history(tau)[rows]
        keys, scale = [], []
        for blk in range(tau + 1):
            for k in range(ds.covariates[blk].shape[1]):
                b, se = beta.covariate[(tau, blk, k)]
                keys.append((tau, blk, k))
                scale.append(abs(b) / se)
        return rows, L, np.asarray(scale), group[rows] == 1, tuple(keys)

    @staticmethod
    def _diff(rows, L, scale, g1, w):
        w = w[rows]
        w1, w0 = w[g1], w[~g1]
        s1, s0 = w1.sum(), w0.sum()
        if not (s1 > 0 and s0 > 0 and np.isfinite(s1) and np.isfinite(s0)):
            return np.full(scale.size, np.inf)
        m1 = w1 @ L[g1] / s1
        m0 = w0 @ L[~g1] / s0
        terms = scale * np.abs(m1 - m0)
        # a zero-weight coefficient contributes nothing even if imbalance is infinite
        terms[scale == 0] = 0.0
        return terms

    def weights(self, tprob, cprob):
        ds = self.dataset
        ratio, _ = treatment_factors(ds, tprob, self.stab)
        Wa = _cumprod_nan(ratio)
        Wc = censoring_factors(ds, cprob)
        return Wa, Wc

    def treatment_terms(self, Wa, Wc):
        T = self.dataset.T
        K = self.dataset.n_censor
        parts = []
        for tau, (rows, L, scale, g1, _) in enumerate(self.treat):
            w = Wa[:, tau] * Wc[:, min(tau, K)]
            parts.append(self._diff(rows, L, scale, g1, w))
        return np.concatenate(parts) if parts else np.zeros(0)

    def censoring_terms(self, Wa, Wc, cprob):
        T = self.dataset.T
        parts = []
        for i, (rows, L, scale, g1, _) in enumerate(self.cens):
            tau = i + 1
            prev_a = Wa[:, min(tau - 1, T)]
            c = self.dataset.censoring[:, tau - 1]
            cur = np.where(c == 1, cprob[:, tau - 1], 1.0 - cprob[:, tau - 1])
            w = prev_a * Wc[:, tau - 1] / cur
            parts.append(self._diff(rows, L, scale, g1, w))
        return np.concatenate(parts) if parts else np.zeros(0)

    def report(self, tfit: ModelFit, cfit: ModelFit | None, lam=None, lam_c=None) -> BalanceReport:
        tprob = tfit.probabilities()
        cprob = None if cfit is None else cfit.probabilities()
        if self.dataset.n_censor and cprob is None:
            raise ValidationError("censoring model required for a censored dataset")
        Wa, Wc = self.weights(tprob, cprob)
        tt = self.treatment_terms(Wa, Wc)
        ct = self.censoring_terms(Wa, Wc, cprob) if self.cens else np.zeros(0)
        return BalanceReport(self.treatment_keys, tt, self.censoring_keys, ct, lam, lam_c)


def balance_metric(dataset: LongitudinalDataset, refit: PropensityFit, beta: WorkingBeta,
                   stabilizer: Stabilizer | str | None = "none") -> BalanceReport:
    if isinstance(stabilizer, str):
        stabilizer = Stabilizer(dataset, stabilizer)
    ctx = BalanceContext(dataset, beta, stabilizer)
    return ctx.report(refit.treatment, refit.censoring)


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True, eq=False)
class _Candidate:
    lam: float
    path_fit: object
    refit: ModelFit | None
    note: str = ""


def _candidates(design, omega_cols, grid, standardize):
    const = _constant_times(design)
    exclude = _constant_mask(design, const)
    path = adaptive_lasso_path(design, omega_cols, grid, standardize=standardize, exclude=exclude)
    cache = {}
    out = []
    for lam, pf in zip(grid, path):
        key = pf.support.tobytes()
        if key not in cache:
            try:
                cache[key] = (fit_unpenalized(design, pf.support), "")
            except (SeparationError, SingularDesignError) as exc:
                cache[key] = (None, f"refit failed: {exc}")
        refit, note = cache[key]
        if refit is not None:
            # the coefficient array stays shared so callers can detect repeats
            refit = replace(refit, lam=float(lam))
        out.append(_Candidate(float(lam), pf, refit, note))
    return out


def _grid_for(design, omega_cols, config):
    exclude = _constant_mask(design, _constant_times(design))
    return lambda_grid(design, omega_cols, config.n_lambda, config.lambda_ratio, config.standardize, exclude)


def select_lambda(dataset, grid, beta, gamma=2.5, stabilizer="none", config: LoalConfig | None = None,
                  context: BalanceContext | None = None):
    """Pick lambda on ``grid`` by minimising the balance metric of the refitted model.

    With censoring, ``grid`` may be a pair ``(grid_a, grid_c)`` and the
    pair minimising M + N is chosen. Ties go to the larger penalty.
    Returns ``(lambda, reports, PropensityFit)``; for a censored dataset
    ``lambda`` is the pair ``(lambda_a, lambda_c)``.
    """
    config = config or LoalConfig(gamma=gamma)
    if isinstance(stabilizer, str):
        stabilizer = Stabilizer(dataset, stabilizer)
    ctx = context or BalanceContext(dataset, beta, stabilizer)
    omega = adaptive_weights(beta, gamma)
    mod = dataset.baseline_modifier if config.unpenalized_modifier else None
    tdesign = build_pooled_treatment_design(dataset)
    tw = column_weights(tdesign, omega, mod)
    cens = dataset.n_censor > 0
    if cens:
        cdesign = build_pooled_censoring_design(dataset)
        cw = column_weights(cdesign, omega, mod)
        if isinstance(grid, tuple) and len(grid) == 2 and np.ndim(grid[0]) == 1:
            ga, gc = grid
        else:
            ga = gc = grid
    else:
        ga = grid
    if ga is None:
        ga = _grid_for(tdesign, tw, config)
    tc = _candidates(tdesign, tw, np.asarray(ga, float), config.standardize)
    if not cens:
        reports = []
        best, best_val = None, np.inf
        seen = {}
        for cand in tc:
            if cand.refit is None:
                reports.append(None)
                continue
            key = id(cand.refit.coefficients)
            if key not in seen:
                seen[key] = ctx.report(cand.refit, None)
            rep = replace(seen[key], lam=cand.lam)
            reports.append(rep)
            val = rep.total
            if np.isfinite(val) and (best is None or val < best_val - TIE_TOL):
                best, best_val = cand, val
        if best is None:
            raise SelectionError("every candidate lambda was disqualified")
        fit = PropensityFit(best.refit, None, "loal", gamma, np.nan,
                            {"reports": reports, "lasso": best.path_fit, "grid": np.asarray(ga)})
        return best.lam, reports, fit
    if gc is None:
        gc = _grid_for(cdesign, cw, config)
    cc = _candidates(cdesign, cw, np.asarray(gc, float), config.standardize)
    reports = {}
    probs_t = [None if c.refit is None else c.refit.probabilities() for c in tc]
    probs_c = [None if c.refit is None else c.refit.probabilities() for c in cc]
    uid_t = [None if c.refit is None else id(c.refit.coefficients) for c in tc]
    uid_c = [None if c.refit is None else id(c.refit.coefficients) for c in cc]
    by_fit = {}

    def evaluate(i, j):
        if (i, j) in reports:
            return reports[(i, j)]
        if probs_t[i] is None or probs_c[j] is None:
            reports[(i, j)] = None
            return None
        key = (uid_t[i], uid_c[j])
        if key not in by_fit:
            Wa, Wc = ctx.weights(probs_t[i], probs_c[j])
            by_fit[key] = (ctx.treatment_terms(Wa, Wc), ctx.censoring_terms(Wa, Wc, probs_c[j]))
        tt, ct = by_fit[key]
        rep = BalanceReport(ctx.treatment_keys, tt, ctx.censoring_keys, ct, tc[i].lam, cc[j].lam)
        reports[(i, j)] = rep
        return rep

    def value(i, j):
        rep = evaluate(i, j)
        return np.inf if rep is None else rep.total

    if config.joint_search == "grid":
        pairs = [(i, j) for i in range(len(tc)) for j in range(len(cc))]
    else:
        pairs = _coordinate_pairs(value, len(tc), len(cc))
    best, best_val = None, np.inf
    for i, j in pairs:
        v = value(i, j)
        if np.isfinite(v) and (best is None or v < best_val - TIE_TOL):
            best, best_val = (i, j), v
    if best is None:
        raise SelectionError("every candidate (lambda_a, lambda_c) pair was disqualified")
    i, j = best
    fit = PropensityFit(tc[i].refit, cc[j].refit, "loal", gamma, np.nan,
                        {"reports": reports, "lasso": tc[i].path_fit, "lasso_c": cc[j].path_fit,
                         "grid": np.asarray(ga), "grid_c": np.asarray(gc)})
    return (tc[i].lam, cc[j].lam), reports, fit


def _coordinate_pairs(value, na, nc, max_rounds=10):
    # alternate one-dimensional searches; row order keeps larger penalties first
    i, j = 0, 0
    visited = []
    for _ in range(max_rounds):
        prev = (i, j)
        vals = [value(a, j) for a in range(na)]
        visited += [(a, j) for a in range(na)]
        i = int(np.argmin(vals))
        vals = [value(i, c) for c in range(nc)]
        visited += [(i, c) for c in range(nc)]
        j = int(np.argmin(vals))
        if (i, j) == prev:
            break
    return sorted(set(visited))


# ---------------------------------------------------------------------------
# fusion


def fusion_weights(design: PooledDesign, coef: np.ndarray, graph: PenaltyGraph, gamma1: float) -> np.ndarray:
    w = np.empty(len(graph.edges))
    for e, (u, v) in enumerate(graph.edges):
        d = abs(coef[u] - coef[v])
        w[e] = np.inf if d < PREFUSE_TOL else d ** (-gamma1)
    return w


def fuse_model(model: ModelFit, graph_kind: str = "clique", gamma1: float = 2.5, lambda1_grid=None,
               n_lambda1: int = 20, ratio: float = 1e-4, gamma1_grid=()) -> tuple[ModelFit, dict]:
    """Adaptive fused LASSO on the support of ``model`` with BIC-selected penalty."""
    design = model.design
    graph = make_fusion_graph(design, graph_kind).restrict(model.support)
    info = {"graph": graph, "path": []}
    if not graph.edges:
        info["note"] = "no fusion edges within the support"
        return model, info
    zero = ~model.support | _constant_mask(design, model.constant)
    best = None
    for g1 in (gamma1_grid or (gamma1,)):
        w = fusion_weights(design, model.coefficients, graph, g1)
        grid = lambda1_grid
        if grid is None:
            lmax = fusion_lambda_max(design.X, design.y, graph.edges, w, zero, design.unpenalized_mask)
            if not np.isfinite(lmax) or lmax <= 0:
                grid = np.array([0.0])
            else:
                lmax *= 1.0 + 1e-6
                grid = np.exp(np.linspace(np.log(lmax), np.log(lmax * ratio), n_lambda1))
        for lam1 in grid:
            try:
                ff = fused_lasso_logistic(design.X, design.y, graph.edges, w, float(lam1), zero_mask=zero,
                                          unpenalized_mask=design.unpenalized_mask,
                                          start=model.coefficients, gamma1=g1)
            except (SeparationError, SingularDesignError) as exc:
                info["path"].append((g1, float(lam1), np.nan, str(exc)))
                continue
            info["path"].append((g1, float(lam1), ff.bic, ""))
            # ties favour the larger penalty, which comes first on the grid
            if best is None or ff.bic < best.bic - TIE_TOL:
                best = ff
    if best is None:
        info["note"] = "every fused fit failed"
        return model, info
    fitted = ModelFit(design, best.coefficients, model.support, best.groups, model.lam, best.lambda1,
                      best.converged, model.constant)
    info["gamma1"] = best.gamma1
    return fitted, info


def fuse_step(dataset: LongitudinalDataset, refit: PropensityFit, graph: str = "clique", gamma1: float = 2.5,
              lambda1_grid=None, n_lambda1: int = 20, ratio: float = 1e-4, gamma1_grid=()) -> PropensityFit:
    """Fuse the treatment (and censoring) models of a LOAL refit.

    The BIC sum over both models is minimised by minimising each BIC
    separately, since the two likelihoods share no parameters.
    """
    tfit, tinfo = fuse_model(refit.treatment, graph, gamma1, lambda1_grid, n_lambda1, ratio, gamma1_grid)
    cfit, cinfo = None, None
    if refit.censoring is not None:
        cfit, cinfo = fuse_model(refit.censoring, graph, gamma1, lambda1_grid, n_lambda1, ratio, gamma1_grid)
    trail = dict(refit.trail)
    trail.update({"fusion": tinfo, "fusion_c": cinfo, "loal_fit": refit})
    return PropensityFit(tfit, cfit, "fused_loal", refit.gamma, tinfo.get("gamma1", gamma1), trail)


def needed_taus(dataset: LongitudinalDataset):
    return range(max(dataset.T, dataset.n_censor) + 1)


def run_loal_pipeline(dataset: LongitudinalDataset, config: LoalConfig | None = None, qseq=None) -> PropensityFit:
    """q-sequence, working coefficients, balance-tuned selection, refit and fusion."""
    config = config or LoalConfig()
    if qseq is None:
        qseq = estimate_q_sequence(dataset, default_patterns(dataset), config.q_spec, config.outcome_family)
    beta = working_betas(qseq, needed_taus(dataset))
    stab = Stabilizer(dataset, config.stabilizer)
    ctx = BalanceContext(dataset, beta, stab)
    lam, reports, fit = select_lambda(dataset, None if dataset.n_censor == 0 else (None, None), beta,
                                      config.gamma, stab, config, ctx)
    trail = dict(fit.trail)
    trail.update({"qseq": qseq, "beta": beta, "lambda": lam})
    fit = replace(fit, trail=trail)
    if not config.fuse:
        return fit
    return fuse_step(dataset, fit, config.graph, config.gamma1, None, config.n_lambda1,
                     config.lambda1_ratio, config.gamma1_grid)
