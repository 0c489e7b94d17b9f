"""Sequential outcome regressions (q-functions) and working structural models."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data_model import LongitudinalDataset, PatternSpace, ValidationError, default_patterns
from .glm_core import GlmFit, fit_linear_wls, fit_logistic, ols_model_se, solve_normal

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class QSequence:
    """Predicted q-functions for every stage and treatment pattern.

    ``q[s]`` has shape ``(n_patterns, n)``; entries are NaN for subjects
    whose covariate history at stage ``s`` is unobserved. ``q[S + 1]`` is
    the observed outcome repeated for every pattern.
    """

    dataset: LongitudinalDataset
    patterns: PatternSpace
    q: tuple
    specs: tuple
    stage_fits: tuple
    stage_se: tuple
    family: str = "gaussian"

    @property
    def n_stages(self) -> int:
        return len(self.specs)


@dataclass(frozen=True, eq=False)
class WorkingBeta:
    """Coefficients of the working structural models, keyed by model time.

    ``covariate[(tau, block, k)]``, ``treatment[(tau, s)]`` and
    ``intercept[tau]`` each map to a ``(beta, se)`` pair.
    """

    covariate: dict
    treatment: dict
    intercept: dict

    def get(self, tau, block, k):
        return self.covariate[(tau, block, k)]

    def taus(self):
        return sorted({key[0] for key in self.covariate} | set(self.intercept))

    def merged(self, other: "WorkingBeta") -> "WorkingBeta":
        return WorkingBeta({**self.covariate, **other.covariate},
                           {**self.treatment, **other.treatment},
                           {**self.intercept, **other.intercept})


def main_terms(dataset: LongitudinalDataset, stage: int) -> list[str]:
    n_treat = min(stage, dataset.T) + 1
    return dataset.history_names(stage) + [f"A{s}" for s in range(n_treat)]


def _factor(dataset, name, stage, treat):
    if name.startswith("A") and name[1:].isdigit():
        s = int(name[1:])
        if s > min(stage, dataset.T):
            raise ValidationError(f"term {name} is not available at stage {stage}")
        if treat is not None:
            return np.full(dataset.n, float(treat[s]))
        return dataset.treatments[:, s]
    try:
        b, k = dataset.locate(name)
    except KeyError:
        raise ValidationError(f"unknown term {name!r}") from None
    if b > stage:
        raise ValidationError(f"covariate {name} is not available at stage {stage}")
    return dataset.covariates[b][:, k]


def term_matrix(dataset: LongitudinalDataset, terms, stage: int, treat=None) -> np.ndarray:
    """Intercept plus one column per term.

    A term is a name, a product ``"X*Y*Z"`` or a power ``"X^2"``;
    treatment names ``A0..AT`` are replaced by ``treat`` when given.
    """
    cols = [np.ones(dataset.n)]
    for term in terms:
        v = np.ones(dataset.n)
        for part in str(term).replace(":", "*").split("*"):
            part = part.strip()
            power = 1
            if "^" in part:
                part, p = part.split("^")
                power = int(p)
            v = v * _factor(dataset, part.strip(), stage, treat) ** power
        cols.append(v)
    return np.column_stack(cols)


def _resolve_spec(dataset, q_spec, n_stages):
    specs = []
    for s in range(n_stages):
        terms = None
        if q_spec is not None:
            if isinstance(q_spec, dict):
                terms = q_spec.get(s, q_spec.get(str(s)))
            elif s < len(q_spec):
                terms = q_spec[s]
        specs.append(tuple(main_terms(dataset, s) if terms is None else terms))
    return tuple(specs)


def estimate_q_sequence(dataset: LongitudinalDataset, pattern_space: PatternSpace | None = None,
                        q_spec=None, family: str = "gaussian") -> QSequence:
    """Backward recursion of outcome regressions evaluated at each pattern.

    Stage ``s`` regresses the stage ``s + 1`` prediction (the outcome at the
    last stage) on the stage-``s`` terms among subjects uncensored at
    ``s`` and predicts with the treatments set to each pattern.
    """
    if pattern_space is None:
        pattern_space = default_patterns(dataset)
    pats = pattern_space.patterns
    if pats.shape[1] != dataset.T + 1:
        raise ValidationError("pattern length does not match the number of treatment times")
    if family not in ("gaussian", "binomial"):
        raise ValueError(f"unknown family {family!r}")
    n_pat = pats.shape[0]
    S = dataset.n_blocks - 1
    specs = _resolve_spec(dataset, q_spec, S + 1)
    Y = dataset.outcome
    if family == "binomial":
        obs = Y[dataset.at_risk(S)]
        if np.any((obs < 0) | (obs > 1)):
            raise ValidationError("bounded outcome must be rescaled to [0, 1]")
    q = [None] * (S + 2)
    q[S + 1] = np.tile(Y, (n_pat, 1))
    fits = [None] * (S + 1)
    ses = [None] * (S + 1)
    for s in range(S, -1, -1):
        risk = dataset.at_risk(s)
        if not risk.any():
            raise ValidationError(f"empty risk set at stage {s}")
        visible = dataset.at_risk(s - 1) if s > 0 else np.ones(dataset.n, bool)
        X = term_matrix(dataset, specs[s], s)
        Xr = X[risk]
        names = ["(Intercept)"] + list(specs[s])
        target = q[s + 1][:, risk]
        out = np.full((n_pat, dataset.n), np.nan)
        if family == "gaussian":
            G = Xr.T @ Xr
            coefs = solve_normal(G, Xr.T @ target.T, columns=names)
            if coefs.ndim == 1:
                coefs = coefs[:, None]
            coef_for = lambda i: coefs[:, i]
        else:
            cache = {}

            def coef_for(i):
                key = target[i].tobytes()
                if key not in cache:
                    cache[key] = fit_logistic(Xr, target[i], columns=names).coefficients
                return cache[key]
        for i, pat in enumerate(pats):
            Xp = term_matrix(dataset, specs[s], s, treat=pat)[visible]
            eta = Xp @ coef_for(i)
            out[i, visible] = eta if family == "gaussian" else 1.0 / (1.0 + np.exp(-eta))
        q[s] = out
        # the stage fit on the first pattern is kept for diagnostics and the
        # degenerate-working-model fallback
        if family == "gaussian":
            fit = GlmFit(coef_for(0), True, 1, np.nan, np.zeros(X.shape[1], bool), "gaussian")
            ses[s] = dict(zip(names, ols_model_se(Xr, target[0], None, fit)))
        else:
            fit = GlmFit(coef_for(0), True, 1, np.nan, np.zeros(X.shape[1], bool), "binomial")
            ses[s] = {}
        fits[s] = fit
    for arr in q:
        arr.setflags(write=False)
    return QSequence(dataset, pattern_space, tuple(q), specs, tuple(fits), tuple(ses), family)


def fit_working_structural(qseq: QSequence, tau: int) -> WorkingBeta:
    """Stacked OLS of the stage-``tau`` predictions on covariate history and past pattern.

    Regressors are an intercept, every covariate of blocks ``0..tau`` and the
    pattern components ``a_0..a_{tau-1}``. Rows are (pattern, subject)
    pairs over subjects uncensored at ``tau``. Standard errors are
    model-based and ignore the correlation between stacked rows.
    """
    ds = qseq.dataset
    if not 0 <= tau < qseq.n_stages:
        raise ValueError(f"no stage {tau}")
    risk = ds.at_risk(tau)
    L = ds.history(tau)[risk]
    m = L.shape[0]
    n_treat = min(tau, ds.T + 1)
    pats = qseq.patterns.patterns
    qt = qseq.q[tau][:, risk]
    P = 1 + L.shape[1] + n_treat
    G = np.zeros((P, P))
    b = np.zeros(P)
    base = np.column_stack([np.ones(m), L])
    Gb = base.T @ base
    for i, pat in enumerate(pats):
        a = pat[:n_treat].astype(float)
        # X_i = [base, 1 * a]
        G[: base.shape[1], : base.shape[1]] += Gb
        cross = base.sum(axis=0)[:, None] * a[None, :]
        G[: base.shape[1], base.shape[1]:] += cross
        G[base.shape[1]:, : base.shape[1]] += cross.T
        G[base.shape[1]:, base.shape[1]:] += m * np.outer(a, a)
        b[: base.shape[1]] += base.T @ qt[i]
        b[base.shape[1]:] += a * qt[i].sum()
    names = ["(Intercept)"] + ds.history_names(tau) + [f"a{s}" for s in range(n_treat)]
    coef = solve_normal(G, b, columns=names)
    rss = 0.0
    tss = 0.0
    qbar = qt.mean()
    for i, pat in enumerate(pats):
        fitted = base @ coef[: base.shape[1]] + pat[:n_treat] @ coef[base.shape[1]:]
        rss += float(np.sum((qt[i] - fitted) ** 2))
        tss += float(np.sum((qt[i] - qbar) ** 2))
    N = m * len(pats)
    s2 = rss / max(N - P, 1)
    se = np.sqrt(np.maximum(np.diag(np.linalg.pinv(G)) * s2, 0.0))
    if rss <= 1e-20 * max(tss, 1e-300):
        # predictions are an exact linear function of the regressors, so the
        # stacked fit carries no residual information; fall back on the
        # stage regression's own standard errors
        stage_se = qseq.stage_se[tau] or {}
        logger.debug("degenerate stacked fit at tau=%d; using stage standard errors", tau)
        se = np.array([stage_se.get(nm, np.nan) for nm in names[: base.shape[1]]]
                      + [stage_se.get(f"A{s}", np.nan) for s in range(n_treat)])
    floor = 1e-12 * max(1.0, float(np.max(np.abs(coef))))
    se = np.where(np.isfinite(se) & (se > floor), se, floor)
    cov = {}
    j = 1
    for blk in range(tau + 1):
        for k in range(ds.covariates[blk].shape[1]):
            cov[(tau, blk, k)] = (float(coef[j]), float(se[j]))
            j += 1
    treat = {(tau, s): (float(coef[j + s]), float(se[j + s])) for s in range(n_treat)}
    return WorkingBeta(cov, treat, {tau: (float(coef[0]), float(se[0]))})


def working_betas(qseq: QSequence, taus=None) -> WorkingBeta:
    if taus is None:
        taus = range(qseq.n_stages)
    out = WorkingBeta({}, {}, {})
    for tau in taus:
        out = out.merged(fit_working_structural(qseq, tau))
    return out
