import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msm_loal.data_model import LongitudinalDataset, ValidationError
from msm_loal.estimators import MsmSpec, g_computation
from msm_loal.outcome_models import estimate_q_sequence, fit_working_structural, term_matrix, working_betas

from oracles import enumerated_g_formula, msm_from_g_formula

SATURATED = {
    0: ["L0", "A0", "L0*A0"],
    1: ["*".join(c) for r in range(1, 5) for c in itertools.combinations(["L0", "A0", "L1", "A1"], r)],
}


def discrete_dataset(seed, n=600):
    rng = np.random.default_rng(seed)
    L0 = (rng.random(n) < 0.45).astype(float)
    A0 = (rng.random(n) < 0.3 + 0.4 * L0).astype(float)
    L1 = (rng.random(n) < 0.25 + 0.3 * A0 + 0.2 * L0).astype(float)
    A1 = (rng.random(n) < 0.2 + 0.3 * L1 + 0.3 * A0).astype(float)
    Y = 1 + L0 - 0.5 * L1 + A0 + 2 * A1 * L1 + rng.normal(size=n)
    ds = LongitudinalDataset((L0, L1), (("L0",), ("L1",)), np.column_stack([A0, A1]), Y, baseline_modifier=0)
    return ds, (L0, A0, L1, A1, Y)


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("terms", [("intercept", "cum"), ("intercept", "modifier", "cum"),
                                   ("intercept", "modifier", "cum", "modifier:cum")])
def test_g_computation_equals_enumerated_g_formula(seed, terms):
    ds, arrays = discrete_dataset(seed)
    q = estimate_q_sequence(ds, q_spec=SATURATED)
    est = g_computation(ds, q, MsmSpec(terms))
    np.testing.assert_allclose(est.mu, msm_from_g_formula(*arrays, terms), atol=1e-10)


def test_stage_zero_predictions_equal_enumerated_means():
    ds, arrays = discrete_dataset(5)
    q = estimate_q_sequence(ds, q_spec=SATURATED)
    L0 = arrays[0]
    for i, a in enumerate(q.patterns.patterns):
        g = enumerated_g_formula(*arrays, tuple(a))
        for l0, m in g.items():
            np.testing.assert_allclose(q.q[0][i, L0 == l0], m, atol=1e-10)


def test_enumerated_means_hand_case():
    # eight subjects, one per (L0, A0, L1) cell with A1 = 1 and Y = 10 L0 + L1
    L0 = np.array([0, 0, 0, 0, 1, 1, 1, 1], float)
    A0 = np.array([0, 0, 1, 1, 0, 0, 1, 1], float)
    L1 = np.array([0, 1, 0, 1, 0, 1, 0, 1], float)
    A1 = np.ones(8)
    Y = 10 * L0 + L1
    g = enumerated_g_formula(L0, A0, L1, A1, Y, (0, 1))
    assert g == {0.0: 0.5, 1.0: 10.5}


def test_term_matrix_substitutes_pattern():
    ds, _ = discrete_dataset(0, n=20)
    M = term_matrix(ds, ["L0*A0", "A1", "L1^2"], 1, treat=(1, 0))
    np.testing.assert_array_equal(M[:, 1], ds.covariates[0][:, 0])
    np.testing.assert_array_equal(M[:, 2], 0)
    with pytest.raises(ValidationError):
        term_matrix(ds, ["L1"], 0)


def test_working_structural_exact_linear_case():
    # Y linear in history and treatments: stacked fit recovers the coefficients
    rng = np.random.default_rng(2)
    n = 300
    L0 = rng.normal(size=n)
    A0 = (rng.random(n) < 0.5).astype(float)
    L1 = 0.5 * L0 + A0 + rng.normal(size=n)
    A1 = (rng.random(n) < 0.5).astype(float)
    Y = 2 * L0 + 3 * L1 + A0 + A1 + rng.normal(size=n)
    ds = LongitudinalDataset((L0, L1), (("L0",), ("L1",)), np.column_stack([A0, A1]), Y)
    q = estimate_q_sequence(ds)
    beta = working_betas(q)
    assert beta.get(1, 0, 0)[0] == pytest.approx(2.0, abs=0.2)
    assert beta.get(1, 1, 0)[0] == pytest.approx(3.0, abs=0.1)
    assert beta.covariate[(0, 0, 0)][0] == pytest.approx(2 + 3 * 0.5, abs=0.3)
    assert all(se > 0 for _, se in beta.covariate.values())


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_q_sequence_is_linear_in_outcome(seed):
    ds, _ = discrete_dataset(seed, n=200)
    q1 = estimate_q_sequence(ds)
    ds2 = LongitudinalDataset(ds.covariates, ds.covariate_names, ds.treatments, 3 * ds.outcome + 1,
                              baseline_modifier=0)
    q2 = estimate_q_sequence(ds2)
    np.testing.assert_allclose(q2.q[0], 3 * q1.q[0] + 1, atol=1e-8)
    b1 = fit_working_structural(q1, 0)
    b2 = fit_working_structural(q2, 0)
    assert b2.get(0, 0, 0)[0] == pytest.approx(3 * b1.get(0, 0, 0)[0], abs=1e-8)
