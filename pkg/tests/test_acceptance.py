"""Acceptance criteria at their stated scale. Slow: run with ``pytest -m acceptance``.

Each test prints one ``criterion k: PASS|FAIL`` line (also repeated in the
terminal summary).
"""

import time

import numpy as np
import pytest

from msm_loal.bootstrap import NamedEstimator, bootstrap_both
from msm_loal.estimators import MsmSpec, cumulative_treatment_probability, full_fit, g_computation, true_weight_iptw
from msm_loal.glm_core import SeparationError, fit_logistic
from msm_loal.loal import LoalConfig, run_loal_pipeline
from msm_loal.outcome_models import estimate_q_sequence, working_betas
from msm_loal.penalized import adaptive_lasso_logistic, fused_lasso_logistic
from msm_loal.simulation import ScenarioConfig, default_q_spec, generate, make_rng, run_monte_carlo

from oracles import adaptive_lasso_objective, fused_objective, msm_from_g_formula
from test_outcome_models import SATURATED, discrete_dataset
from test_penalized import FROZEN, _kkt_residual

pytestmark = pytest.mark.acceptance

MC_REPS = 300


def _fmt(v):
    return "(" + ", ".join(f"{x:.3f}" for x in np.atleast_1d(v)) + ")"


def test_criterion_1_truth_recovery_with_true_weights(verdict):
    t0 = time.perf_counter()
    parts, ok = [], True
    for scenario in ("1a", "2", "3"):
        sim = generate(scenario, 100_000, seed=0)
        est = true_weight_iptw(sim.data, sim.truth.probs, MsmSpec(sim.truth.msm_terms))
        z = np.abs(est.mu - np.asarray(sim.truth.mu)) / est.se
        ok &= bool(np.all(z <= 3))
        parts.append(f"{scenario}: mu={_fmt(est.mu)} max|z|={z.max():.2f}")
    secs = time.perf_counter() - t0
    ok &= secs < 120
    verdict(1, ok, "; ".join(parts) + f"; {secs:.0f}s")


def test_criterion_2_marginal_coefficients(verdict):
    t0 = time.perf_counter()
    sim = generate("1a", 1_000_000, seed=0)
    (L0, L1), A = sim.data.covariates, sim.data.treatments
    one = np.ones(sim.data.n)
    b0 = fit_logistic(np.column_stack([one, L0[:, 0]]), A[:, 0]).coefficients[1]
    b1 = fit_logistic(np.column_stack([one, L0[:, 0], L1[:, 0], A[:, 0]]), A[:, 1]).coefficients[1]
    secs = time.perf_counter() - t0
    ok = abs(b0 - 1.28) <= 0.05 and abs(b1 - 1.28) <= 0.05 and secs < 60
    verdict(2, ok, f"C0 coefficients {b0:.3f}, {b1:.3f}; {secs:.0f}s")


LIMITS = {"1a": ((1.50, 0.00, 0.50, 0.00, 1.65, 0.00), 0.03),
          "1c": ((5.40, 0.04, 0.61, 0.05, 7.82, 0.09), 0.15)}
BETA_KEYS = [(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 1, 1)]


def test_criterion_3_working_beta_limits(verdict):
    t0 = time.perf_counter()
    parts, ok = [], True
    for scenario, (target, tol) in LIMITS.items():
        ds = generate(scenario, 1_000_000, seed=0).data
        beta = working_betas(estimate_q_sequence(ds, q_spec=default_q_spec(scenario)))
        got = np.abs([beta.get(*k)[0] for k in BETA_KEYS])
        err = np.max(np.abs(got - target))
        ok &= bool(err <= tol)
        parts.append(f"{scenario}: {_fmt(got)} max err {err:.3f}")
    secs = time.perf_counter() - t0
    ok &= secs < 180
    verdict(3, ok, "; ".join(parts) + f"; {secs:.0f}s")


@pytest.fixture(scope="module")
def mc_1a():
    t0 = time.perf_counter()
    table = run_monte_carlo(ScenarioConfig("1a", 1000, seed=0),
                            ("iptw_full", "iptw_oracle_select", "iptw_loal", "iptw_fused_loal", "fused_oracle_alpha"),
                            reps=MC_REPS)
    return table, time.perf_counter() - t0


def _fused_share(table, pair, oracle=False):
    rows = [r.fused_oracle if oracle else r.fused for r in table.replicates]
    return float(np.mean([r.get(pair, 0) for r in rows]))


def test_criterion_4_selection_and_fusion(verdict, mc_1a):
    table, secs = mc_1a
    sel = table.selection_proportions()
    pair = ("A0~C0", "A1~C0")
    fus, fus_oracle = _fused_share(table, pair), _fused_share(table, pair, oracle=True)
    instruments = {k: sel[k] for k in ("A0~I0", "A1~I0", "A1~I1")}
    ok = (sel["A0~C0"] >= 0.98 and sel["A1~C1"] >= 0.97 and max(instruments.values()) <= 0.05
          and fus >= 0.85 and fus_oracle >= 0.95 and secs < 1800)
    inst = ", ".join(f"{k} {v:.2f}" for k, v in instruments.items())
    verdict(4, ok, f"C0@A0 {sel['A0~C0']:.2f}, C1@A1 {sel['A1~C1']:.2f}, {inst}, C0 fusion {fus:.2f}, "
                   f"oracle-alpha fusion {fus_oracle:.2f}; {secs:.0f}s")


def test_criterion_5_estimator_ordering(verdict, mc_1a):
    table, secs_a = mc_1a
    t0 = time.perf_counter()
    table_c = run_monte_carlo(ScenarioConfig("1c", 1000, seed=0), ("gcomp", "iptw_loal"), reps=MC_REPS)
    secs = secs_a + time.perf_counter() - t0
    loal, oracle, full = (table.n_mse(e)[2] for e in ("iptw_loal", "iptw_oracle_select", "iptw_full"))
    bias_g, bias_l = table_c.root_n_bias("gcomp")[0], table_c.root_n_bias("iptw_loal")[0]
    ok = loal <= 1.1 * oracle and loal <= 0.95 * full and bias_g >= 5 * bias_l and secs < 2700
    verdict(5, ok, f"1a n*MSE(mu2) LOAL {loal:.1f}, oracle {oracle:.1f}, full {full:.1f}; "
                   f"1c sqrt(n)|bias(mu0)| gcomp {bias_g:.1f}, LOAL {bias_l:.1f}; {secs:.0f}s")


def test_criterion_6_positivity_sweep(verdict):
    t0 = time.perf_counter()
    full, loal = [], []
    for nuI in (0.0, 1.0, 2.0):
        table = run_monte_carlo(ScenarioConfig("sweep", 500, seed=0, nu0=0.0, nuI=nuI),
                                ("iptw_full", "iptw_loal"), reps=100)
        full.append(table.n_mse("iptw_full")[0])
        loal.append(table.n_mse("iptw_loal")[0])
    secs = time.perf_counter() - t0
    ok = full[0] < full[1] < full[2] and loal[2] < full[2] and secs < 1200
    verdict(6, ok, f"full n*MSE(mu0) {_fmt(full)}, LOAL {_fmt(loal)} over nu_I = 0, 1, 2; {secs:.0f}s")


def test_criterion_8_solver_oracles(verdict):
    t0 = time.perf_counter()
    obj_gap, kkt, mle_gap = 0.0, 0.0, 0.0
    for inst in FROZEN["adaptive"]:
        X, y = np.array(inst["X"]), np.array(inst["y"])
        unpen, w = np.array(inst["unpen"]), np.array(inst["w"])
        fit = adaptive_lasso_logistic((X, y, unpen), w, inst["lam"])
        obj_gap = max(obj_gap, abs(adaptive_lasso_objective(X, y, unpen, w, inst["lam"], fit.coefficients)
                                   - inst["objective"]))
        kkt = max(kkt, _kkt_residual(X, y, unpen, w, inst["lam"], fit.coefficients))
        try:
            mle = fit_logistic(X, y).coefficients
        except SeparationError:
            continue
        mle_gap = max(mle_gap, np.max(np.abs(adaptive_lasso_logistic((X, y, unpen), w, 0.0).coefficients - mle)))
    fused_gap = 0.0
    for inst in FROZEN["fused"]:
        X, y = np.array(inst["X"]), np.array(inst["y"])
        edges = [tuple(e) for e in inst["edges"]]
        unpen = np.zeros(X.shape[1], bool)
        unpen[0] = True
        fit = fused_lasso_logistic(X, y, edges, np.array(inst["w"]), inst["lam1"], unpenalized_mask=unpen)
        fused_gap = max(fused_gap, abs(fused_objective(X, y, edges, inst["w"], inst["lam1"], fit.coefficients)
                                       - inst["objective"]))
    g_gap = 0.0
    terms = ("intercept", "modifier", "cum", "modifier:cum")
    for seed in range(5):
        ds, arrays = discrete_dataset(seed)
        est = g_computation(ds, estimate_q_sequence(ds, q_spec=SATURATED), MsmSpec(terms))
        g_gap = max(g_gap, np.max(np.abs(est.mu - msm_from_g_formula(*arrays, terms))))
    secs = time.perf_counter() - t0
    n_inst = len(FROZEN["adaptive"]), len(FROZEN["fused"])
    ok = (min(n_inst) >= 20 and obj_gap <= 1e-3 and fused_gap <= 1e-3 and kkt <= 1e-6 and mle_gap <= 1e-6
          and g_gap <= 1e-10)
    verdict(8, ok, f"{n_inst[0]} adaptive / {n_inst[1]} fused instances; objective gaps {obj_gap:.1e} / "
                   f"{fused_gap:.1e}; KKT {kkt:.1e}; MLE gap {mle_gap:.1e}; g-formula gap {g_gap:.1e}; {secs:.0f}s")


def test_criterion_9_weight_diagnostics(verdict):
    t0 = time.perf_counter()
    cfg = ScenarioConfig("2", 500, seed=0)
    loal_cfg = LoalConfig(q_spec=default_q_spec("2"), fuse=False)
    low_loal, low_full = np.inf, np.inf
    for r in range(200):
        ds = cfg.draw(r).data
        for fit, which in ((run_loal_pipeline(ds, loal_cfg), "loal"), (full_fit(ds), "full")):
            p = cumulative_treatment_probability(ds, fit.treatment.probabilities()).min()
            if which == "loal":
                low_loal = min(low_loal, p)
            else:
                low_full = min(low_full, p)
    secs = time.perf_counter() - t0
    ok = low_loal >= 0.001 and low_full < 5e-4 and secs < 600
    verdict(9, ok, f"min cumulative probability LOAL {low_loal:.2e}, full {low_full:.2e}; {secs:.0f}s")


def test_criterion_7_bootstrap_coverage(verdict):
    t0 = time.perf_counter()
    cfg = ScenarioConfig("1a", 500, seed=0)
    lc = LoalConfig(q_spec=default_q_spec("1a"))
    cover = {"mn": [], "naive": []}
    for r in range(200):
        sim = cfg.draw(r)
        est = NamedEstimator("iptw_loal", tuple(sim.truth.msm_terms), lc)
        boot_seed = int(make_rng(0, r, 1).integers(2**31))
        mn, naive = bootstrap_both(sim.data, est, B=200, seed=boot_seed)
        cover["mn"].append(mn.covers(sim.truth.mu))
        cover["naive"].append(naive.covers(sim.truth.mu))
    secs = time.perf_counter() - t0
    mn_cov = np.mean(cover["mn"], axis=0)
    naive_cov = np.mean(cover["naive"], axis=0)
    ok = bool(np.all((mn_cov >= 0.80) & (mn_cov <= 0.96)) and np.all(mn_cov >= naive_cov - 0.02)) and secs < 3600
    verdict(7, ok, f"m-out-of-n coverage {_fmt(mn_cov)}, naive {_fmt(naive_cov)}; {secs / 60:.0f} min")
