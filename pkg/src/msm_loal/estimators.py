"""MSM estimation: cumulative weights, IPTW, sequential g-computation and oracle fits."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data_model import (
    LongitudinalDataset,
    ValidationError,
    build_pooled_censoring_design,
    build_pooled_treatment_design,
    check_columns,
)
from .glm_core import SingularDesignError, fit_linear_wls, sandwich_se
from .loal import (
    ModelFit,
    PropensityFit,
    Stabilizer,
    censoring_factors,
    fit_unpenalized,
    treatment_factors,
)
from .outcome_models import QSequence

logger = logging.getLogger(__name__)

TERMS = ("intercept", "modifier", "cum", "modifier:cum")
QUANTILES = (0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 1.0)


class PositivityError(ValueError):
    """An observed treatment or censoring event has fitted probability zero."""


@dataclass(frozen=True)
class MsmSpec:
    terms: tuple = ("intercept", "modifier", "cum")

    def __post_init__(self):
        if not self.terms or self.terms[0] != "intercept":
            raise ValidationError("the MSM must start with an intercept")
        bad = [t for t in self.terms if t not in TERMS]
        if bad:
            raise ValidationError(f"unknown MSM terms {bad}")
        if len(set(self.terms)) != len(self.terms):
            raise ValidationError("duplicate MSM terms")

    @classmethod
    def default(cls, dataset: LongitudinalDataset) -> "MsmSpec":
        if dataset.baseline_modifier is None:
            return cls(("intercept", "cum"))
        return cls(("intercept", "modifier", "cum"))

    def matrix(self, dataset: LongitudinalDataset, treat=None) -> np.ndarray:
        """Regressors for every subject under observed (or pattern) treatments."""
        n = dataset.n
        needs_mod = any("modifier" in t for t in self.terms)
        if needs_mod and dataset.baseline_modifier is None:
            raise ValidationError("MSM uses the baseline modifier but the dataset declares none")
        mod = dataset.modifier if needs_mod else None
        if treat is None:
            cum = np.nansum(dataset.treatments, axis=1)
        else:
            cum = np.full(n, float(np.sum(treat)))
        cols = {"intercept": np.ones(n), "cum": cum}
        if needs_mod:
            cols["modifier"] = mod
            cols["modifier:cum"] = mod * cum
        return np.column_stack([cols[t] for t in self.terms])


@dataclass(frozen=True, eq=False)
class MsmEstimate:
    mu: np.ndarray
    se: np.ndarray
    estimator: str
    terms: tuple
    diagnostics: dict = field(default_factory=dict)
    cov: np.ndarray | None = field(default=None, repr=False)

    def as_row(self) -> dict:
        row = {"estimator": self.estimator}
        for t, m, s in zip(self.terms, self.mu, self.se):
            row[f"mu[{t}]"] = float(m)
            row[f"se[{t}]"] = float(s)
        for k, v in self.diagnostics.items():
            if np.isscalar(v):
                row[k] = v
        return row


# ---------------------------------------------------------------------------
# weights


def _check_positive(g, what):
    bad = np.argwhere(g == 0)
    if bad.size:
        i, t = bad[0]
        raise PositivityError(f"{what} probability is zero for subject {i} at time {t}")


def _final_observed(dataset: LongitudinalDataset) -> np.ndarray:
    return dataset.at_risk(dataset.n_blocks - 1)


def weights_from_probabilities(dataset: LongitudinalDataset, tprob, cprob=None, stabilizer=None,
                               per_time=False):
    """Cumulative weights from per-time probabilities P(A_t = 1 | history).

    Returns the weight at the last time for every subject (NaN when the
    outcome is unobserved) and, with ``per_time``, the matrix of cumulative
    treatment weights over times.
    """
    ratio, g = treatment_factors(dataset, np.asarray(tprob, float), stabilizer)
    _check_positive(g, "treatment")
    seen = np.isfinite(ratio)
    cum = np.cumprod(np.where(seen, ratio, 1.0), axis=1)
    cum[~seen] = np.nan
    wa = cum[:, -1]
    if dataset.n_censor:
        if cprob is None:
            raise ValidationError("censoring probabilities required for a censored dataset")
        cprob = np.asarray(cprob, float)
        for t in range(dataset.n_censor):
            kept = dataset.at_risk(t) & (dataset.censoring[:, t] == 0)
            zero = np.flatnonzero(kept & (cprob[:, t] >= 1.0))
            if zero.size:
                raise PositivityError(
                    f"probability of remaining uncensored is zero for subject {zero[0]} at time {t + 1}")
        wc = censoring_factors(dataset, cprob)
        w = wa * wc[:, -1]
    else:
        wc = None
        w = wa.copy()
    w[~_final_observed(dataset)] = np.nan
    if per_time:
        return w, cum, wc
    return w


def compute_cumulative_weights(dataset: LongitudinalDataset, fit: PropensityFit, stabilized: bool = False,
                               per_time: bool = False, stabilizer: Stabilizer | None = None):
    """IPT weights times inverse probabilities of remaining uncensored.

    Unstabilized weights target the least-squares projection of the
    counterfactual means with every treatment pattern weighted equally,
    the same target as g-computation. ``stabilized`` uses numerators
    P(A_t = a_t | L0^1), which changes the target when the MSM is
    misspecified.
    """
    if stabilized and stabilizer is None:
        stabilizer = Stabilizer(dataset, "baseline")
    if not stabilized:
        stabilizer = None
    tprob = fit.treatment.probabilities()
    cprob = None
    if dataset.n_censor:
        if fit.censoring is None:
            raise ValidationError("fit has no censoring model for a censored dataset")
        cprob = fit.censoring.probabilities()
    return weights_from_probabilities(dataset, tprob, cprob, stabilizer, per_time)


def cumulative_treatment_probability(dataset: LongitudinalDataset, tprob) -> np.ndarray:
    """Product of fitted probabilities of the observed treatments, per subject with observed outcome."""
    _, g = treatment_factors(dataset, np.asarray(tprob, float), None)
    prod = np.prod(np.where(np.isfinite(g), g, 1.0), axis=1)
    return prod[_final_observed(dataset)]


def weight_diagnostics(weights: np.ndarray, cum_prob: np.ndarray | None = None) -> dict:
    w = weights[np.isfinite(weights)]
    out = {"n_weighted": int(w.size)}
    for q, v in zip(QUANTILES, np.quantile(w, QUANTILES) if w.size else [np.nan] * len(QUANTILES)):
        out[f"w_q{q:g}"] = float(v)
    out["w_mean"] = float(w.mean()) if w.size else np.nan
    if cum_prob is not None and cum_prob.size:
        for q, v in zip(QUANTILES, np.quantile(cum_prob, QUANTILES)):
            out[f"p_q{q:g}"] = float(v)
        out["min_cum_prob"] = float(cum_prob.min())
    return out


# ---------------------------------------------------------------------------
# estimators


def fit_msm_iptw(dataset: LongitudinalDataset, weights, spec: MsmSpec | None = None,
                 estimator: str = "iptw", diagnostics: dict | None = None) -> MsmEstimate:
    """Weighted least squares of Y on the MSM regressors with sandwich standard errors.

    One row per subject with observed outcome, so the subject-clustered
    sandwich equals the HC0 sandwich. Standard errors ignore estimation of
    the weights and any variable selection.
    """
    spec = spec or MsmSpec.default(dataset)
    weights = np.asarray(weights, float)
    keep = _final_observed(dataset)
    w = weights[keep]
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise ValidationError("weights must be finite and nonnegative for uncensored subjects")
    X = spec.matrix(dataset)[keep]
    y = dataset.outcome[keep]
    fit = fit_linear_wls(X, y, w, columns=list(spec.terms))
    se, cov = sandwich_se(X, y, w, fit, return_cov=True)
    return MsmEstimate(fit.coefficients, se, estimator, spec.terms, diagnostics or {}, cov)


def g_computation(dataset: LongitudinalDataset, qseq: QSequence, spec: MsmSpec | None = None) -> MsmEstimate:
    """OLS of the stacked stage-0 predictions on the MSM regressors over (pattern, subject) rows."""
    spec = spec or MsmSpec.default(dataset)
    q0 = qseq.q[0]
    pats = qseq.patterns.patterns
    X = np.vstack([spec.matrix(dataset, treat=p) for p in pats])
    y = q0.reshape(-1)
    if np.any(~np.isfinite(y)):
        raise ValidationError("stage-0 predictions missing for some subjects")
    cluster = np.tile(np.arange(dataset.n), len(pats))
    fit = fit_linear_wls(X, y, columns=list(spec.terms))
    se, cov = sandwich_se(X, y, None, fit, cluster=cluster, return_cov=True)
    return MsmEstimate(fit.coefficients, se, "gcomp", spec.terms, {}, cov)


def _support_from_names(design, names):
    support = design.unpenalized_mask.copy()
    for j in check_columns(list(names), design):
        support[j] = True
    return support


def _groups_from_names(design, groups, support):
    out = []
    for g in groups:
        idx = tuple(sorted(check_columns(list(g), design)))
        if not all(support[j] for j in idx):
            raise ValidationError(f"fused group {g} is not contained in the support")
        out.append(idx)
    return tuple(out)


def oracle_fit(dataset: LongitudinalDataset, support_spec, fuse_spec=(), censoring_support=None,
               censoring_fuse=()) -> PropensityFit:
    """Unpenalized pooled models on a given support with given groups of equal coefficients.

    Names refer to design columns (``"A1~C0"``). Intercepts and treatment
    history are always included. Without ``censoring_support`` the censoring
    model is the full one.
    """
    td = build_pooled_treatment_design(dataset)
    sup = _support_from_names(td, support_spec)
    groups = _groups_from_names(td, fuse_spec, sup)
    treat = fit_unpenalized(td, sup, groups)
    cens = None
    if dataset.n_censor:
        cd = build_pooled_censoring_design(dataset)
        csup = None if censoring_support is None else _support_from_names(cd, censoring_support)
        cgroups = _groups_from_names(cd, censoring_fuse, csup if csup is not None else np.ones(cd.n_cols, bool))
        cens = fit_unpenalized(cd, csup, cgroups)
    return PropensityFit(treat, cens, "oracle_fuse" if groups else "oracle")


def full_fit(dataset: LongitudinalDataset) -> PropensityFit:
    """Unpenalized pooled models with every covariate."""
    treat = fit_unpenalized(build_pooled_treatment_design(dataset))
    cens = fit_unpenalized(build_pooled_censoring_design(dataset)) if dataset.n_censor else None
    return PropensityFit(treat, cens, "full")


def iptw(dataset: LongitudinalDataset, fit: PropensityFit, spec: MsmSpec | None = None,
         stabilized: bool = False, estimator: str | None = None, stabilizer: Stabilizer | None = None) -> MsmEstimate:
    """IPTW estimate with weight and cumulative-probability diagnostics."""
    w = compute_cumulative_weights(dataset, fit, stabilized, stabilizer=stabilizer)
    cp = cumulative_treatment_probability(dataset, fit.treatment.probabilities())
    diag = weight_diagnostics(w, cp)
    return fit_msm_iptw(dataset, w, spec, estimator or f"iptw_{fit.provenance}", diag)


def true_weight_iptw(dataset: LongitudinalDataset, probs, spec: MsmSpec | None = None) -> MsmEstimate:
    """IPTW with unstabilized weights from known treatment probabilities."""
    w = weights_from_probabilities(dataset, probs)
    return fit_msm_iptw(dataset, w, spec, "iptw_true")


def model_fit_table(fit: ModelFit) -> list[dict]:
    """One row per design column: coefficient, support flag and fused group id (0 = none)."""
    gid = {}
    label = 0
    for g in fit.groups:
        if len(g) > 1:
            label += 1
            for j in g:
                gid[j] = label
    d = fit.design
    return [{"column": nm, "coefficient": float(c), "selected": bool(fit.support[j]),
             "group": gid.get(j, 0)} for j, (nm, c) in enumerate(zip(d.column_names, fit.coefficients))]

