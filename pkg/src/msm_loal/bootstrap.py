"""m-out-of-n bootstrap confidence intervals and the naive n-out-of-n comparator.

An estimator is any callable taking a dataset and returning the MSM
coefficients (an array or an object with a ``mu`` attribute). Draw ``b`` of
subsample size index ``j`` always uses the stream ``make_rng(seed, j, b)``,
so the naive bootstrap with the same seed reuses the ``m = n`` draws.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data_model import LongitudinalDataset, ValidationError
from .simulation import make_rng

logger = logging.getLogger(__name__)

Z95 = 1.959963984540054
MIN_M = 30
MAX_FAILURE = 0.2
ECDF_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
KS_TIE = 1e-12


class BootstrapError(RuntimeError):
    """Too many resampled fits failed."""


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    method: str
    terms: tuple
    n: int
    mu_hat: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    m: np.ndarray
    variances: np.ndarray
    B: int
    seed: int
    q: float = 1.0
    K: int = 0
    m_star: np.ndarray | None = None
    j_star: np.ndarray | None = None
    epsilon: np.ndarray | None = None
    ks: np.ndarray | None = None
    ecdf_quantiles: np.ndarray | None = None
    failures: np.ndarray | None = None
    boot_mean: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def covers(self, mu) -> np.ndarray:
        mu = np.asarray(mu, float)
        return (self.lower <= mu) & (mu <= self.upper)

    def rows(self) -> list[dict]:
        """One row per MSM parameter."""
        out = []
        for l, term in enumerate(self.terms):
            row = {"method": self.method, "term": term, "mu_hat": float(self.mu_hat[l]),
                   "lower": float(self.lower[l]), "upper": float(self.upper[l])}
            if self.m_star is not None:
                row["m_star"] = int(self.m_star[l])
                row["epsilon"] = float(self.epsilon[l])
            row["sd"] = float(np.sqrt(self.variances[int(self.j_star[l]) if self.j_star is not None else 0, l]))
            out.append(row)
        return out

    def m_rows(self) -> list[dict]:
        """One row per subsample size with variances, KS distances and ECDF quantiles."""
        out = []
        for j, mj in enumerate(self.m):
            row = {"j": j, "m": int(mj), "failures": int(self.failures[j]) if self.failures is not None else 0}
            for l, term in enumerate(self.terms):
                row[f"var[{term}]"] = float(self.variances[j, l])
                if self.ks is not None and j < self.ks.shape[0]:
                    row[f"ks[{term}]"] = float(self.ks[j, l])
                if self.ecdf_quantiles is not None:
                    for qq, v in zip(ECDF_QUANTILES, self.ecdf_quantiles[j, l]):
                        row[f"R{qq:g}[{term}]"] = float(v)
            out.append(row)
        return out


def subsample_sizes(n: int, q: float, K: int) -> np.ndarray:
    """m_j = floor(q^j n) for j = 0..K, checked to be strictly decreasing and at least 30."""
    if not 0 < q < 1:
        raise ValidationError("q must lie in (0, 1)")
    if K < 1:
        raise ValidationError("K must be >= 1")
    if n * q ** K < MIN_M:
        raise ValidationError(f"n q^K = {n * q ** K:.1f} < {MIN_M}; use a larger n, q or a smaller K")
    # the small offset guards floor() against q**j * n landing a hair below an integer
    m = np.array([math.floor(q ** j * n + 1e-9) for j in range(K + 1)], dtype=int)
    if np.any(np.diff(m) >= 0):
        raise ValidationError("subsample sizes are not strictly decreasing; decrease q")
    return m


def ks_distance(a: np.ndarray, b: np.ndarray) -> float:
    """sup_x |F_a(x) - F_b(x)| evaluated over every pooled sample point."""
    a = np.sort(np.asarray(a, float))
    b = np.sort(np.asarray(b, float))
    if a.size == 0 or b.size == 0:
        return np.nan
    x = np.concatenate([a, b])
    fa = np.searchsorted(a, x, side="right") / a.size
    fb = np.searchsorted(b, x, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def rate_exponent(m: np.ndarray, variances: np.ndarray) -> float:
    """Slope of log variance on -2 log m (least squares with an intercept)."""
    x = -2.0 * np.log(np.asarray(m, float))
    v = np.asarray(variances, float)
    ok = np.isfinite(v) & (v > 0)
    if ok.sum() < 2:
        return np.nan
    x, yv = x[ok], np.log(v[ok])
    xc = x - x.mean()
    return float(xc @ (yv - yv.mean()) / (xc @ xc))


def _mu_of(value) -> np.ndarray:
    return np.asarray(getattr(value, "mu", value), float).ravel()


def _one_draw(args):
    dataset, estimator, seed, j, b, m = args
    idx = make_rng(seed, j, b).integers(0, dataset.n, size=m)
    try:
        return _mu_of(estimator(dataset.subset(idx)))
    except Exception as exc:
        logger.debug("bootstrap draw (%d, %d) failed: %s", j, b, exc)
        return None


def _draws(dataset, estimator, m, B, seed, p, workers, js=None):
    """(J, B, p) array of resampled estimates with NaN rows for failed fits."""
    js = range(len(m)) if js is None else js
    jobs = [(dataset, estimator, seed, j, b, int(m[k])) for k, j in enumerate(js) for b in range(B)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            res = list(pool.map(_one_draw, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    else:
        res = [_one_draw(job) for job in jobs]
    out = np.full((len(m), B, p), np.nan)
    for k in range(len(m)):
        for b in range(B):
            r = res[k * B + b]
            if r is not None:
                if r.shape != (p,):
                    raise ValueError("estimator returned a different number of parameters on a resample")
                out[k, b] = r
    return out


def _check_failures(est, m):
    failed = np.any(~np.isfinite(est), axis=2).sum(axis=1)
    B = est.shape[1]
    for j, f in enumerate(failed):
        if f > MAX_FAILURE * B:
            raise BootstrapError(f"{f} of {B} resampled fits failed at m={m[j]} (limit {MAX_FAILURE:.0%})")
    return failed


def _terms_of(value, p):
    terms = getattr(value, "terms", None)
    return tuple(terms) if terms is not None else tuple(f"mu{l}" for l in range(p))


def _mn_from_draws(mu_hat, terms, n, m, est, failed, q, K, B, seed) -> BootstrapResult:
    J, _, p = est.shape
    var = np.full((J, p), np.nan)
    quant = np.full((J, p, len(ECDF_QUANTILES)), np.nan)
    roots = []
    for j in range(J):
        ok = np.all(np.isfinite(est[j]), axis=1)
        e = est[j, ok]
        var[j] = e.var(axis=0, ddof=1) if e.shape[0] > 1 else np.nan
        r = math.sqrt(m[j]) * (e - mu_hat)
        roots.append(r)
        if r.shape[0]:
            quant[j] = np.quantile(r, ECDF_QUANTILES, axis=0).T
    ks = np.array([[ks_distance(roots[j][:, l], roots[j + 1][:, l]) for l in range(p)] for j in range(J - 1)])
    j_star = np.zeros(p, dtype=int)
    eps = np.zeros(p)
    lower = np.zeros(p)
    upper = np.zeros(p)
    for l in range(p):
        d = ks[:, l]
        best = np.nanmin(d)
        # ties go to the larger m, i.e. the smallest j
        j_star[l] = int(np.flatnonzero(d <= best + KS_TIE)[0])
        eps[l] = rate_exponent(m, var[:, l])
        half = Z95 * (m[j_star[l]] / n) ** eps[l] * math.sqrt(var[j_star[l], l])
        lower[l] = mu_hat[l] - half
        upper[l] = mu_hat[l] + half
    if not np.all(np.isfinite(eps)):
        raise BootstrapError("rate exponent is not finite (zero or missing bootstrap variances)")
    return BootstrapResult("mn", terms, n, mu_hat, lower, upper, m, var, B, seed, q, K,
                           m_star=m[j_star], j_star=j_star, epsilon=eps, ks=ks, ecdf_quantiles=quant,
                           failures=failed, boot_mean=np.nanmean(est, axis=1)[j_star, np.arange(p)])


def _naive_from_draws(mu_hat, terms, n, est, failed, B, seed) -> BootstrapResult:
    ok = np.all(np.isfinite(est), axis=1)
    e = est[ok]
    var = e.var(axis=0, ddof=1)[None, :]
    half = Z95 * np.sqrt(var[0])
    return BootstrapResult("naive", terms, n, mu_hat, mu_hat - half, mu_hat + half, np.array([n]), var, B, seed,
                           failures=np.array([failed]), boot_mean=e.mean(axis=0))


def _full_sample(dataset, estimator):
    value = estimator(dataset)
    mu_hat = _mu_of(value)
    return mu_hat, _terms_of(value, mu_hat.size)


def m_out_of_n_ci(dataset: LongitudinalDataset, estimator, q: float = 0.95, K: int = 14, B: int = 200,
                  seed: int = 0, workers: int = 1) -> BootstrapResult:
    """Wald intervals mu_hat +- 1.96 (m*/n)^eps sd_{m*} with m* chosen by ECDF stability.

    For each m_j the B resampled estimates give the ECDF of
    sqrt(m_j) (mu[jb] - mu_hat); m* is the m_j whose ECDF is closest (in
    Kolmogorov-Smirnov distance) to that of m_{j+1}, and eps is the slope of
    log var_j on -2 log m_j.
    """
    if B < 2:
        raise ValidationError("B must be >= 2")
    m = subsample_sizes(dataset.n, q, K)
    mu_hat, terms = _full_sample(dataset, estimator)
    est = _draws(dataset, estimator, m, B, seed, mu_hat.size, workers)
    failed = _check_failures(est, m)
    return _mn_from_draws(mu_hat, terms, dataset.n, m, est, failed, q, K, B, seed)


def naive_bootstrap_ci(dataset: LongitudinalDataset, estimator, B: int = 200, seed: int = 0,
                       workers: int = 1) -> BootstrapResult:
    """mu_hat +- 1.96 sd of B estimates on full-size resamples."""
    if B < 2:
        raise ValidationError("B must be >= 2")
    mu_hat, terms = _full_sample(dataset, estimator)
    m = np.array([dataset.n])
    est = _draws(dataset, estimator, m, B, seed, mu_hat.size, workers)
    failed = _check_failures(est, m)
    return _naive_from_draws(mu_hat, terms, dataset.n, est[0], failed[0], B, seed)


def bootstrap_both(dataset: LongitudinalDataset, estimator, q: float = 0.95, K: int = 14, B: int = 200,
                   seed: int = 0, workers: int = 1) -> tuple[BootstrapResult, BootstrapResult]:
    """m-out-of-n and naive intervals from one set of draws (the naive uses the m = n draws).

    Identical to calling the two functions separately with the same seed.
    """
    m = subsample_sizes(dataset.n, q, K)
    mu_hat, terms = _full_sample(dataset, estimator)
    est = _draws(dataset, estimator, m, B, seed, mu_hat.size, workers)
    failed = _check_failures(est, m)
    mn = _mn_from_draws(mu_hat, terms, dataset.n, m, est, failed, q, K, B, seed)
    naive = _naive_from_draws(mu_hat, terms, dataset.n, est[0], failed[0], B, seed)
    return mn, naive


# ---------------------------------------------------------------------------
# named estimators (picklable, for worker pools and the command line)


BOOTSTRAP_ESTIMATORS = ("iptw_loal", "iptw_fused_loal", "iptw_full", "gcomp")


@dataclass(frozen=True)
class NamedEstimator:
    """Callable running one of the package's MSM estimators on a dataset."""

    name: str
    terms: tuple | None = None
    loal_config: object = None

    def __post_init__(self):
        if self.name not in BOOTSTRAP_ESTIMATORS:
            raise ValidationError(f"unknown estimator {self.name!r}; choose from {BOOTSTRAP_ESTIMATORS}")

    def __call__(self, dataset: LongitudinalDataset):
        from dataclasses import replace

        from .estimators import MsmSpec, full_fit, g_computation, iptw
        from .loal import LoalConfig, run_loal_pipeline
        from .outcome_models import estimate_q_sequence

        spec = MsmSpec(self.terms) if self.terms else MsmSpec.default(dataset)
        if self.name == "gcomp":
            return g_computation(dataset, estimate_q_sequence(dataset), spec)
        if self.name == "iptw_full":
            return iptw(dataset, full_fit(dataset), spec)
        cfg = self.loal_config or LoalConfig()
        if self.name == "iptw_loal":
            return iptw(dataset, run_loal_pipeline(dataset, replace(cfg, fuse=False)), spec)
        return iptw(dataset, run_loal_pipeline(dataset, replace(cfg, fuse=True)), spec)
