"""Data generators for the simulation scenarios and the Monte Carlo harness."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data_model import LongitudinalDataset

logger = logging.getLogger(__name__)

SCENARIOS = ("1a", "1b", "1c", "2", "3", "sweep")


def make_rng(seed, *key) -> np.random.Generator:
    """Philox stream for ``seed`` and an integer key path (e.g. replicate index)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class Truth:
    """Known MSM parameters and oracle propensity specification of a scenario.

    ``support`` lists treatment-design column names of the true marginal
    model and ``fuse`` lists groups of those columns with equal
    coefficients. ``probs`` holds the true per-time treatment probabilities
    of the observed data (n x (T + 1)).
    """

    mu: tuple
    msm_terms: tuple = ("intercept", "modifier", "cum")
    support: tuple = ()
    fuse: tuple = ()
    probs: np.ndarray | None = field(default=None, compare=False, repr=False)
    confounders: tuple = ()
    instruments: tuple = ()


@dataclass(frozen=True, eq=False)
class Simulated:
    data: LongitudinalDataset
    truth: Truth


def _bern(rng, p):
    return (rng.random(p.shape[0]) < p).astype(float)


def _standardize(x):
    return (x - x.mean()) / x.std(ddof=1)


def generate_scenario1(n: int, variant: str = "a", seed: int = 0, rng=None,
                       nu0: float = 0.0, nuI: float = 1.0) -> Simulated:
    """Two-time scenario with one confounder and one instrument per time.

    ``nu0`` and ``nuI`` modify the A0 mechanism for positivity sweeps.
    """
    if variant not in ("a", "b", "c"):
        raise ValueError(f"unknown variant {variant!r}")
    rng = make_rng(seed) if rng is None else rng
    C0 = rng.standard_normal(n)
    I0 = rng.standard_normal(n)
    p0 = expit(nu0 + 1.515 * C0 + nuI * I0)
    A0 = _bern(rng, p0)
    C1 = C0 + A0 + rng.standard_normal(n)
    I1 = C0 + rng.standard_normal(n)
    p1 = expit(-0.5 + 0.5 * C0 + 0.25 * C1 + 0.5 * A0 + I1)
    A1 = _bern(rng, p1)
    mean = -1.5 + 0.5 * C0 + 0.5 * A0 + C1 + A1
    if variant == "b":
        mean = mean + 2.5 * C0 * C1
    elif variant == "c":
        mean = mean + 2.5 * A0 * C1 ** 2
    Y = mean + 0.5 * rng.standard_normal(n)
    data = LongitudinalDataset(
        covariates=(np.column_stack([_standardize(C0), _standardize(I0)]),
                    np.column_stack([_standardize(C1), _standardize(I1)])),
        covariate_names=(("C0", "I0"), ("C1", "I1")),
        treatments=np.column_stack([A0, A1]),
        outcome=Y,
        baseline_modifier=0,
    )
    mu = {"a": (-1.5, 1.5, 1.25), "b": (1.0, 2.75, 1.25), "c": (-1.5, 4.0, 5.0)}[variant]
    truth = Truth(
        mu=mu,
        support=("A0~C0", "A1~C0", "A1~C1", "A1~A0"),
        fuse=(("A0~C0", "A1~C0"),),
        probs=np.column_stack([p0, p1]),
        confounders=("A0~C0", "A1~C0", "A1~C1"),
        instruments=("A0~I0", "A1~I0", "A1~I1"),
    )
    return Simulated(data, truth)


def generate_positivity_sweep(n: int, nu0: float, nuI: float, seed: int = 0, rng=None) -> Simulated:
    """Scenario 1(a) with A0 ~ Bernoulli(expit(nu0 + 1.515 C0 + nuI I0))."""
    return generate_scenario1(n, "a", seed, rng=rng, nu0=nu0, nuI=nuI)


def _names2():
    base = ["C0_1", "C0_2", "P0_1", "P0_2", "I0_1", "I0_2"] + [f"S0_{j}" for j in range(1, 15)]
    t1 = ["C1_1", "C1_2", "P1_1", "P1_2", "I1_1", "I1_2"] + [f"S1_{j}" for j in range(1, 5)]
    return base, t1


def generate_scenario2(n: int, seed: int = 0, rng=None) -> Simulated:
    """Two-time scenario with confounders, outcome causes, instruments and noise.

    Each time-1 confounder, outcome cause and noise variable depends on the
    baseline variable with the same role and index; the time-1 instruments
    depend on A0 only.
    """
    rng = make_rng(seed) if rng is None else rng
    L0 = rng.standard_normal((n, 20))
    C0, P0, I0, S0 = L0[:, 0:2], L0[:, 2:4], L0[:, 4:6], L0[:, 6:20]
    p0 = expit(C0[:, 0] + C0[:, 1] + I0[:, 0] + I0[:, 1])
    A0 = _bern(rng, p0)
    e = rng.standard_normal((n, 10))
    C1 = np.column_stack([0.5 * C0[:, 0] + 0.5 * A0, 0.2 * C0[:, 1] - A0]) + e[:, 0:2]
    P1 = np.column_stack([0.5 * P0[:, 0] + 0.5 * A0, 0.2 * P0[:, 1] - A0]) + e[:, 2:4]
    I1 = np.column_stack([-0.5 * A0, A0]) + e[:, 4:6]
    S1 = 0.5 * S0[:, 0:4] + 0.2 * A0[:, None] + e[:, 6:10]
    p1 = expit(1.026 * C0[:, 0] + 0.987 * C0[:, 1] + 0.5 * A0 + C1[:, 0] + C1[:, 1] + I1[:, 0] + I1[:, 1])
    A1 = _bern(rng, p1)
    Y = (1.0 + 0.6 * (C0.sum(1) + P0.sum(1) + C1.sum(1) + P1.sum(1)) + 0.5 * A0 + A1
         + rng.standard_normal(n))
    base, t1 = _names2()
    data = LongitudinalDataset(
        covariates=(L0, np.column_stack([C1, P1, I1, S1])),
        covariate_names=(tuple(base), tuple(t1)),
        treatments=np.column_stack([A0, A1]),
        outcome=Y,
        baseline_modifier=0,
    )
    sup0 = ["C0_1", "C0_2", "P0_1", "P0_2"]
    support = tuple(f"A0~{v}" for v in sup0) + tuple(
        f"A1~{v}" for v in sup0 + ["C1_1", "C1_2", "P1_1", "P1_2"]) + ("A1~A0",)
    fuse = tuple((f"A0~{v}", f"A1~{v}") for v in sup0)
    truth = Truth(
        mu=(1.00, 0.88, 0.45),
        support=support,
        fuse=fuse,
        probs=np.column_stack([p0, p1]),
        confounders=("A0~C0_1", "A0~C0_2", "A1~C0_1", "A1~C0_2", "A1~C1_1", "A1~C1_2"),
        instruments=("A0~I0_1", "A0~I0_2", "A1~I0_1", "A1~I0_2", "A1~I1_1", "A1~I1_2"),
    )
    return Simulated(data, truth)


_S3_COEF = (
    (0.5, 1.0, -0.5, -0.5, 0.0),
    (0.542, 1.075, -0.545, -0.545, -0.5),
    (0.568, 1.142, -0.565, -0.569, -0.5),
    (0.615, 1.23, -0.61, -0.61, -0.5),
    (0.66, 1.322, -0.655, -0.655, -0.5),
)


def generate_scenario3(n: int, seed: int = 0, rng=None) -> Simulated:
    """Five treatment times, 20 correlated baseline covariates, no time-varying ones."""
    rng = make_rng(seed) if rng is None else rng
    cov = np.full((20, 20), 0.192)
    np.fill_diagonal(cov, 0.64)
    L = rng.multivariate_normal(np.zeros(20), cov, size=n, method="cholesky")
    C, P, I = L[:, 0:2], L[:, 2:4], L[:, 4:6]
    A = np.zeros((n, 5))
    probs = np.zeros((n, 5))
    prev = np.zeros(n)
    for t, (c1, c2, i1, i2, a) in enumerate(_S3_COEF):
        probs[:, t] = expit(c1 * C[:, 0] + c2 * C[:, 1] + i1 * I[:, 0] + i2 * I[:, 1] + a * prev)
        A[:, t] = _bern(rng, probs[:, t])
        prev = A[:, t]
    Y = 0.6 * (C.sum(1) + P.sum(1)) + 0.5 * A.sum(1) + rng.standard_normal(n)
    names = ["C0_1", "C0_2", "P0_1", "P0_2", "I0_1", "I0_2"] + [f"S0_{j}" for j in range(1, 15)]
    blocks = (L,) + tuple(np.zeros((n, 0)) for _ in range(4))
    data = LongitudinalDataset(
        covariates=blocks,
        covariate_names=(tuple(names),) + ((),) * 4,
        treatments=A,
        outcome=Y,
        baseline_modifier=0,
    )
    sup = ["C0_1", "C0_2", "P0_1", "P0_2"]
    support = tuple(f"A{t}~{v}" for t in range(5) for v in sup) + tuple(
        f"A{t}~A{s}" for t in range(1, 5) for s in range(t))
    fuse = tuple(tuple(f"A{t}~{v}" for t in range(5)) for v in sup)
    truth = Truth(
        mu=(0.0, 1.14, 0.5),
        support=support,
        fuse=fuse,
        probs=probs,
        confounders=tuple(f"A{t}~{v}" for t in range(5) for v in ("C0_1", "C0_2")),
        instruments=tuple(f"A{t}~{v}" for t in range(5) for v in ("I0_1", "I0_2")),
    )
    return Simulated(data, truth)


def generate_ndit_like(n: int, seed: int = 0, rng=None, n_baseline: int = 8, n_varying: int = 6,
                       n_treat: int = 5) -> Simulated:
    """Synthetic cohort with monotone treatment initiation and drop-out.

    Blocks 0..n_treat carry ``n_varying`` time-varying covariates (block 0
    also holds ``n_baseline`` baseline ones); treatments occur at times
    0..n_treat-1 and censoring at times 1..n_treat. The first baseline
    covariate is binary and serves as the effect modifier.
    """
    rng = make_rng(seed) if rng is None else rng
    K = n_treat + 1
    base = rng.standard_normal((n, n_baseline))
    base[:, 0] = (base[:, 0] > 0).astype(float)
    A = np.full((n, n_treat), np.nan)
    cens = np.zeros((n, n_treat))
    blocks = []
    treated = np.zeros(n)
    alive = np.ones(n, bool)
    cum = np.zeros(n)
    prev = np.zeros((n, n_varying))
    for t in range(K):
        v = 0.6 * prev + 0.3 * treated[:, None] + 0.2 * base[:, [1]] + rng.standard_normal((n, n_varying))
        if t > 0:
            v[~alive] = np.nan
            drop = expit(-3.0 + 0.4 * np.nan_to_num(v[:, 0]) - 0.3 * base[:, 2] + 0.3 * treated)
            alive = alive & (rng.random(n) >= drop)
            cens[:, t - 1] = (~alive).astype(float)
        blocks.append(v if t > 0 else np.column_stack([base, v]))
        prev = np.nan_to_num(v)
        if t < n_treat:
            p = expit(-1.5 + 0.5 * prev[:, 0] + 0.4 * prev[:, 1] + 0.3 * base[:, 1] + 0.6 * base[:, 3])
            start = alive & (treated == 0) & (rng.random(n) < p)
            treated = np.where(start, 1.0, treated)
            A[alive, t] = treated[alive]
            cum += treated
    Y = (0.5 * base[:, 0] + 0.4 * base[:, 1] + 0.3 * prev[:, 0] + 0.2 * prev[:, 2]
         - 0.3 * cum + rng.standard_normal(n))
    Y = np.where(alive, Y, np.nan)
    vnames = [f"V{j}" for j in range(1, n_varying + 1)]
    bnames = [f"B{j}" for j in range(1, n_baseline + 1)]
    names = [bnames + [f"{v}_0" for v in vnames]] + [[f"{v}_{t}" for v in vnames] for t in range(1, K)]
    fams = [bnames + vnames] + [vnames for _ in range(1, K)]
    data = LongitudinalDataset(
        covariates=tuple(blocks),
        covariate_names=tuple(tuple(x) for x in names),
        treatments=A,
        outcome=Y,
        censoring=cens,
        baseline_modifier=0,
        monotone_treatment=True,
        families=tuple(tuple(f) for f in fams),
    )
    return Simulated(data, Truth(mu=(np.nan,) * 4, msm_terms=("intercept", "modifier", "cum", "modifier:cum")))


def generate(scenario: str, n: int, seed: int = 0, rng=None, **kw) -> Simulated:
    if scenario in ("1a", "1b", "1c"):
        return generate_scenario1(n, scenario[1], seed, rng=rng)
    if scenario == "2":
        return generate_scenario2(n, seed, rng=rng)
    if scenario == "3":
        return generate_scenario3(n, seed, rng=rng)
    if scenario == "sweep":
        return generate_positivity_sweep(n, kw.get("nu0", 0.0), kw.get("nuI", 1.0), seed, rng=rng)
    if scenario == "ndit":
        return generate_ndit_like(n, seed, rng=rng)
    raise ValueError(f"unknown scenario {scenario!r}")


# ---------------------------------------------------------------------------
# Monte Carlo harness

ESTIMATORS = ("gcomp", "iptw_full", "iptw_oracle_select", "iptw_oracle_select_fuse", "iptw_loal",
              "iptw_fused_loal", "iptw_true")

# stage-0 outcome regression used by LOAL in the two-time scenarios
SCENARIO1_Q_SPEC = {0: ["C0", "I0", "A0", "C0*A0", "I0^2"]}


def default_q_spec(scenario: str):
    return SCENARIO1_Q_SPEC if scenario in ("1a", "1b", "1c", "sweep") else None


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    n: int
    seed: int = 0
    nu0: float = 0.0
    nuI: float = 1.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS + ("ndit",):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n < 1:
            raise ValueError("n must be positive")

    def draw(self, rep: int) -> Simulated:
        kw = {"nu0": self.nu0, "nuI": self.nuI} if self.scenario == "sweep" else {}
        return generate(self.scenario, self.n, rng=make_rng(self.seed, rep), **kw)


@dataclass
class Replicate:
    """Estimates and selection outcomes of one simulated dataset."""

    rep: int
    estimates: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    selected: dict = field(default_factory=dict)
    fused: dict = field(default_factory=dict)
    fused_oracle: dict = field(default_factory=dict)
    seconds: float = 0.0


def _pairs_fused(model, names):
    """(name_u, name_v) -> 1 if fused, 0 if both selected but not fused, absent otherwise."""
    d = model.design
    group_of = {}
    for gi, g in enumerate(model.groups):
        for j in g:
            group_of[j] = gi
    out = {}
    for g in names:
        idx = [d.column_names.index(nm) for nm in g]
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                u, v = idx[a], idx[b]
                if model.support[u] and model.support[v] and model.coefficients[u] != 0 and model.coefficients[v] != 0:
                    out[(g[a], g[b])] = int(group_of.get(u, -1) == group_of.get(v, -2))
    return out


def run_replicate(config: ScenarioConfig, rep: int, estimators=ESTIMATORS, loal_config=None) -> Replicate:
    """Draw replicate ``rep`` and apply every requested estimator, recording failures."""
    from .estimators import MsmSpec, full_fit, g_computation, iptw, oracle_fit, true_weight_iptw
    from .loal import LoalConfig, Stabilizer, fuse_model, run_loal_pipeline
    from .outcome_models import estimate_q_sequence

    t0 = time.perf_counter()
    sim = config.draw(rep)
    ds, truth = sim.data, sim.truth
    spec = MsmSpec(truth.msm_terms)
    out = Replicate(rep)
    if loal_config is None:
        loal_config = LoalConfig(q_spec=default_q_spec(config.scenario))
    want = set(estimators)
    stab = Stabilizer(ds, loal_config.stabilizer)
    stabilized = stab.kind != "none"

    def attempt(name, fn):
        if name not in want:
            return
        try:
            out.estimates[name] = np.asarray(fn().mu, float)
        except Exception as exc:  # recorded per estimator, never silently dropped
            out.errors[name] = f"{type(exc).__name__}: {exc}"

    attempt("gcomp", lambda: g_computation(ds, estimate_q_sequence(ds), spec))
    attempt("iptw_true", lambda: true_weight_iptw(ds, truth.probs, spec))
    attempt("iptw_full", lambda: iptw(ds, full_fit(ds), spec, stabilized, stabilizer=stab))
    attempt("iptw_oracle_select", lambda: iptw(ds, oracle_fit(ds, truth.support), spec, stabilized, stabilizer=stab))
    oracle_fused = {}

    def oracle_fuse():
        fit = oracle_fit(ds, truth.support, truth.fuse)
        return iptw(ds, fit, spec, stabilized, stabilizer=stab)

    attempt("iptw_oracle_select_fuse", oracle_fuse)
    if "fused_oracle_alpha" in want and truth.fuse:
        try:
            base = oracle_fit(ds, truth.support).treatment
            fused, _ = fuse_model(base, loal_config.graph, loal_config.gamma1, n_lambda1=loal_config.n_lambda1,
                                  ratio=loal_config.lambda1_ratio)
            oracle_fused.update(_pairs_fused(fused, truth.fuse))
        except Exception as exc:
            out.errors["fused_oracle_alpha"] = f"{type(exc).__name__}: {exc}"
    out.fused_oracle = oracle_fused
    if want & {"iptw_loal", "iptw_fused_loal"}:
        cfg = loal_config if "iptw_fused_loal" in want else replace(loal_config, fuse=False)
        try:
            pf = run_loal_pipeline(ds, cfg)
        except Exception as exc:
            for name in want & {"iptw_loal", "iptw_fused_loal"}:
                out.errors[name] = f"{type(exc).__name__}: {exc}"
        else:
            loal = pf.trail.get("loal_fit", pf)
            d = loal.treatment.design
            out.selected = {nm: bool(loal.treatment.coefficients[j] != 0)
                            for j, nm in enumerate(d.column_names) if not d.unpenalized_mask[j]}
            attempt("iptw_loal", lambda: iptw(ds, loal, spec, stabilized, stabilizer=stab))
            if cfg.fuse:
                out.fused = _pairs_fused(pf.treatment, truth.fuse)
                attempt("iptw_fused_loal", lambda: iptw(ds, pf, spec, stabilized, stabilizer=stab))
    out.seconds = time.perf_counter() - t0
    return out


@dataclass(frozen=True, eq=False)
class MetricsTable:
    """Aggregated Monte Carlo performance of each estimator."""

    config: ScenarioConfig
    truth: tuple
    terms: tuple
    replicates: tuple

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def reps(self) -> int:
        return len(self.replicates)

    def estimates(self, name: str) -> np.ndarray:
        rows = [r.estimates[name] for r in self.replicates if name in r.estimates]
        return np.array(rows).reshape(len(rows), len(self.truth))

    def failures(self, name: str) -> int:
        return sum(name in r.errors for r in self.replicates)

    def estimators(self) -> list[str]:
        seen = []
        for r in self.replicates:
            for k in list(r.estimates) + list(r.errors):
                if k not in seen and k != "fused_oracle_alpha":
                    seen.append(k)
        return [e for e in ESTIMATORS if e in seen] + [e for e in seen if e not in ESTIMATORS]

    def bias(self, name: str) -> np.ndarray:
        return self.estimates(name).mean(axis=0) - np.asarray(self.truth)

    def root_n_bias(self, name: str) -> np.ndarray:
        return np.sqrt(self.n) * np.abs(self.bias(name))

    def n_mse(self, name: str) -> np.ndarray:
        est = self.estimates(name)
        return self.n * np.mean((est - np.asarray(self.truth)) ** 2, axis=0)

    def n_var(self, name: str) -> np.ndarray:
        # population variance so that n*MSE = (sqrt(n) bias)^2 + n*var exactly
        return self.n * self.estimates(name).var(axis=0)

    def selection_proportions(self) -> dict:
        rows = [r.selected for r in self.replicates if r.selected]
        if not rows:
            return {}
        return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}

    def fusion_proportions(self, oracle: bool = False) -> dict:
        """Per fuse pair: (fused share among replicates where both are selected, that count, reps)."""
        out = {}
        rows = [r.fused_oracle if oracle else r.fused for r in self.replicates]
        keys = sorted({k for r in rows for k in r})
        for k in keys:
            vals = [r[k] for r in rows if k in r]
            out[k] = (float(np.mean(vals)), len(vals), len(rows))
        return out

    def rows(self) -> list[dict]:
        out = []
        for name in self.estimators():
            est = self.estimates(name)
            row = {"estimator": name, "reps": int(est.shape[0]), "failures": self.failures(name)}
            if est.shape[0]:
                for t, b, m in zip(self.terms, self.root_n_bias(name), self.n_mse(name)):
                    row[f"rootn_bias[{t}]"] = float(b)
                    row[f"n_mse[{t}]"] = float(m)
            out.append(row)
        return out

    def to_csv(self, path) -> None:
        import csv

        rows = self.rows()
        fields = []
        for r in rows:
            fields += [k for k in r if k not in fields]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})

    def to_markdown(self) -> str:
        head = "| estimator | " + " | ".join(f"mu[{t}]" for t in self.terms) + " | failures |"
        lines = [f"Scenario {self.config.scenario}, n={self.n}, {self.reps} replicates. "
                 "Cells: sqrt(n)|bias| (n MSE).", "", head,
                 "|" + "---|" * (len(self.terms) + 2)]
        for name in self.estimators():
            if not self.estimates(name).shape[0]:
                cells = ["-"] * len(self.terms)
            else:
                cells = [f"{b:.1f} ({m:.0f})" for b, m in zip(self.root_n_bias(name), self.n_mse(name))]
            lines.append(f"| {name} | " + " | ".join(cells) + f" | {self.failures(name)} |")
        sel = self.selection_proportions()
        if sel:
            lines += ["", "| column | selected |", "|---|---|"]
            lines += [f"| {k} | {v:.2f} |" for k, v in sel.items()]
        for oracle in (False, True):
            fus = self.fusion_proportions(oracle)
            if fus:
                title = "fused (oracle alpha)" if oracle else "fused (LOAL)"
                lines += ["", f"| pair | {title} | both selected |", "|---|---|---|"]
                lines += [f"| {a} / {b} | {p:.2f} | {c}/{r} |" for (a, b), (p, c, r) in fus.items()]
        return "\n".join(lines) + "\n"


def _worker(args):
    config, rep, estimators, loal_config = args
    return run_replicate(config, rep, estimators, loal_config)


def run_monte_carlo(config: ScenarioConfig, estimators=ESTIMATORS, reps: int = 100, workers: int = 1,
                    loal_config=None, progress=None) -> MetricsTable:
    """Apply ``estimators`` to ``reps`` independent draws.

    Replicate ``r`` always uses the stream ``make_rng(seed, r)``, so results
    do not depend on ``workers``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    jobs = [(config, r, tuple(estimators), loal_config) for r in range(reps)]
    if workers <= 1:
        results = []
        for job in jobs:
            results.append(_worker(job))
            if progress:
                progress(len(results), reps)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, jobs, chunksize=max(1, reps // (4 * workers))))
    results.sort(key=lambda r: r.rep)
    truth = config.draw(0).truth
    for r in results:
        for name, msg in r.errors.items():
            logger.info("replicate %d: %s failed (%s)", r.rep, name, msg)
    return MetricsTable(config, tuple(truth.mu), tuple(truth.msm_terms), tuple(results))
