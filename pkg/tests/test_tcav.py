import csv
import io
import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavlab.cav import Cav
from cavlab.dataset import ConceptSet
from cavlab.errors import ShapeError, SignificanceAbortError
from cavlab.model import LayerSpec, init_model, reference_model
from cavlab.tcav import (TcavReport, bar_chart_rows, directional_derivative, ks_statistic, one_sample_ttest,
                         reports_to_csv, run_seed, score_distribution_compare, score_from_sensitivities,
                         sensitivities, significance_test, tcav_score, test_scores, welch_ttest)
from conftest import identity_model


def unit_cav(v, layer="act"):
    v = np.asarray(v, float)
    return Cav("c", "n", layer, v / np.linalg.norm(v), 1.0, 0)


def gated_model():
    """act = x, then relu, then logit0 = relu(a0) - relu(a1).

    Along v = (1, 1) the class-0 sensitivity is +1/sqrt2 where a0 > 0 > a1
    and -1/sqrt2 where a1 > 0 > a0, so its sign is set by the input.
    """
    model = init_model([LayerSpec.dense("act", 2), LayerSpec.relu("r"), LayerSpec.dense("logits", 2)], (2,), 2)
    return model.with_weights({"act": (np.eye(2), np.zeros(2)),
                               "logits": (np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2))})


def sign_inputs(signs):
    return np.array([[1.0, -1.0] if s > 0 else [-1.0, 1.0] for s in signs])


# -- conceptual sensitivity ------------------------------------------------------------

def test_linear_head_sensitivity_is_weight_norm():
    model = identity_model(4)
    w = model.weights["logits"][0][:, 1]
    x = np.random.default_rng(0).normal(size=4)
    s = directional_derivative(model, "act", unit_cav(w), 1, x)
    assert s == pytest.approx(np.linalg.norm(w), rel=1e-12)


def test_orthogonal_cav_has_zero_sensitivity():
    model = identity_model(3)
    w = model.weights["logits"][0][:, 0]
    v = np.cross(w, [1.0, 0.0, 0.0])
    assert directional_derivative(model, "act", unit_cav(v), 0, np.ones(3)) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("layer", ["relu1", "conv2", "relu2", "fc1", "relu3"])
def test_directional_derivative_matches_difference_quotient(layer):
    model = reference_model(seed=1)
    rng = np.random.default_rng(2)
    eps = 1e-4
    for trial in range(10):
        x = rng.uniform(0, 1, model.input_shape)
        k = int(rng.integers(model.num_classes))
        cav = unit_cav(rng.normal(size=model.width(layer)), layer)
        a = model.activation_at(layer, x)
        quotient = (model.logit_head(layer, a + eps * cav.vector)[k] - model.logit_head(layer, a)[k]) / eps
        s = directional_derivative(model, layer, cav, k, x)
        assert abs(s - quotient) <= 1e-3 * max(abs(quotient), 1e-6), (trial, s, quotient)


def test_shape_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        directional_derivative(identity_model(3), "act", unit_cav(np.ones(4)), 0, np.ones(3))
    with pytest.raises(ShapeError):
        directional_derivative(identity_model(3), "act", unit_cav(np.ones(3), layer="logits"), 0, np.ones(3))


# -- TCAV score ------------------------------------------------------------------------

def test_hand_built_three_of_five():
    x = sign_inputs([+1, +1, +1, -1, -1])
    assert tcav_score(gated_model(), "act", unit_cav([1, 1]), 0, x) == 0.6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=10))
def test_score_equals_sign_count(signs):
    score = tcav_score(gated_model(), "act", unit_cav([1, 1]), 0, sign_inputs(signs))
    assert score == sum(s > 0 for s in signs) / len(signs)


def test_all_positive_and_all_negative():
    model = gated_model()
    assert tcav_score(model, "act", unit_cav([1, 1]), 0, sign_inputs([1] * 7)) == 1.0
    assert tcav_score(model, "act", unit_cav([1, 1]), 0, sign_inputs([-1] * 7)) == 0.0


def test_zero_sensitivity_counts_as_non_positive():
    assert score_from_sensitivities([0.0, 0.0, 1.0, -1.0]) == 0.25
    with pytest.raises(ValueError):
        score_from_sensitivities([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3).filter(lambda s: abs(s) > 1e-100), min_size=1, max_size=50),
       st.floats(1e-3, 1e3))
def test_positive_scaling_invariance(s, c):
    s = np.array(s)
    assert score_from_sensitivities(c * s) == score_from_sensitivities(s)


def test_negated_cav_gives_complement():
    model = reference_model(seed=3)
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (40,) + model.input_shape)
    cav = unit_cav(rng.normal(size=model.width("fc1")), "fc1")
    s = sensitivities(model, "fc1", cav, 1, x)
    assert np.all(s != 0)
    assert tcav_score(model, "fc1", cav.negated(), 1, x) == pytest.approx(1 - tcav_score(model, "fc1", cav, 1, x))


# -- t-test ----------------------------------------------------------------------------

def mp_ttest(x, mu):
    mpmath.mp.dps = 50
    x = [mpmath.mpf(float(v)) for v in x]
    n = len(x)
    mean = mpmath.fsum(x) / n
    sd = mpmath.sqrt(mpmath.fsum((v - mean) ** 2 for v in x) / (n - 1))
    t = (mean - mu) / (sd / mpmath.sqrt(n))
    df = n - 1
    p = mpmath.betainc(df / mpmath.mpf(2), mpmath.mpf(1) / 2, 0, df / (df + t * t), regularized=True)
    return float(t), float(p)


@pytest.mark.parametrize("x", [
    [0.6, 0.7, 0.55, 0.62, 0.58],
    [0.1, 0.9, 0.4, 0.5, 0.45, 0.52, 0.61],
    [0.51, 0.49, 0.5, 0.52],
    list(np.random.default_rng(0).uniform(0, 1, 500)),
])
def test_ttest_matches_direct_formula(x):
    t, p = mp_ttest(x, 0.5)
    res = one_sample_ttest(x, 0.5)
    assert res.statistic == pytest.approx(t, rel=1e-9)
    assert res.p_value == pytest.approx(p, rel=1e-9, abs=1e-300)
    assert res.df == len(x) - 1


def test_ttest_zero_variance():
    assert one_sample_ttest([0.7] * 10).p_value == 0.0
    assert one_sample_ttest([0.5] * 10).p_value == 1.0
    assert test_scores([0.5] * 10).significant is False
    assert test_scores([1.0] * 10).significant is True
    with pytest.raises(ValueError):
        one_sample_ttest([0.5])


def test_welch_matches_direct_formula():
    a = [0.2, 0.4, 0.35, 0.5, 0.3]
    b = [0.6, 0.9, 0.7, 0.8, 0.75, 0.65]
    va, vb = np.var(a, ddof=1) / 5, np.var(b, ddof=1) / 6
    t = (np.mean(a) - np.mean(b)) / np.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / 4 + vb ** 2 / 5)
    mpmath.mp.dps = 50
    p = float(mpmath.betainc(df / 2, 0.5, 0, df / (df + t * t), regularized=True))
    res = welch_ttest(a, b)
    assert res.statistic == pytest.approx(t, rel=1e-9)
    assert res.df == pytest.approx(df, rel=1e-9)
    assert res.p_value == pytest.approx(p, rel=1e-9)


def test_scores_near_half_are_not_significant():
    scores = np.clip(np.random.default_rng(0).normal(0.5, 0.01, 500), 0, 1)
    report = test_scores(scores)
    assert report.threshold == 0.025
    assert not report.significant


# -- reports ------------------------------------------------------------------------------

def make_reports():
    return [test_scores([0.9, 0.95, 0.92], concept="striped", class_index=0, layer="fc1"),
            test_scores([0.4, 0.6, 0.5, 0.5], concept="dotted", class_index=0, layer="fc1"),
            test_scores([0.1, 0.12, 0.11], concept="striped", class_index=1, layer="fc1")]


def test_report_json_roundtrip():
    for r in make_reports():
        back = TcavReport.from_json(r.to_json())
        assert back.to_json() == r.to_json()
        d = json.loads(r.to_json())
        assert set(d) >= {"concept", "class", "layer", "scores", "mean", "p_value", "significant", "alpha", "m",
                          "runs", "master_seed"}
        assert d["runs"] == len(r.scores) and d["alpha"] == 0.05 and d["m"] == 2


def test_csv_and_bar_rows_keep_rejected_reports_marked():
    reports = make_reports()
    rows = list(csv.DictReader(io.StringIO(reports_to_csv(reports))))
    assert len(rows) == 3
    assert [r["significant"] for r in rows] == ["1", "0", "1"]
    bars = list(csv.DictReader(io.StringIO(bar_chart_rows(reports))))
    marks = {(b["class"], b["concept"]): b["mark"] for b in bars}
    assert marks == {("0", "dotted"): "*", ("0", "striped"): "", ("1", "striped"): ""}


def test_report_rejects_out_of_range_scores():
    with pytest.raises(ValueError):
        TcavReport("c", 0, "l", [1.2], 0.5)


# -- distribution comparison ------------------------------------------------------------

def test_identical_report_sets_have_no_shift():
    entries = score_distribution_compare(make_reports(), make_reports())
    assert all(e.mean_delta == 0 and e.ks_statistic == 0 and not e.flagged for e in entries)


def test_disjoint_scores_give_ks_one():
    a = [test_scores([0.9, 0.91, 0.92], concept="c")]
    b = [test_scores([0.1, 0.11, 0.12], concept="c")]
    (entry,) = score_distribution_compare(a, b)
    assert entry.ks_statistic == 1.0 and entry.flagged
    assert ks_statistic([0.9] * 5, [0.1] * 5) == 1.0


def test_mismatched_grids_are_an_error():
    with pytest.raises(ValueError, match="grids"):
        score_distribution_compare(make_reports(), make_reports()[:2])


# -- significance testing ----------------------------------------------------------------

def separable_setup(m=6, n=40, seed=0):
    rng = np.random.default_rng(seed)
    model = identity_model(m)
    w = model.weights["logits"][0][:, 0]
    pos = ConceptSet("planted", rng.normal(size=(n, m)) + 3 * w / np.linalg.norm(w))
    pool = ConceptSet("pool", rng.normal(size=(200, m)))
    return model, pos, pool, rng.normal(size=(30, m))


def test_planted_concept_is_significant():
    model, pos, pool, inputs = separable_setup()
    report = significance_test(model, "act", pos, pool, 0, inputs, runs=30)
    assert report.runs == 30 and report.mean == 1.0 and report.significant


def test_results_do_not_depend_on_schedule():
    model, pos, pool, inputs = separable_setup(seed=1)
    serial = significance_test(model, "act", pos, pool, 0, inputs, runs=12, master_seed=5)
    threaded = significance_test(model, "act", pos, pool, 0, inputs, runs=12, master_seed=5, workers=3)
    assert serial.to_json() == threaded.to_json()


def test_run_seeds_are_distinct_and_stable():
    seeds = [run_seed(7, r) for r in range(500)]
    assert len(set(seeds)) == 500 and seeds == [run_seed(7, r) for r in range(500)]


def test_abort_when_runs_fail():
    model = identity_model(3)
    same = ConceptSet("flat", np.ones((10, 3)))
    with pytest.raises(SignificanceAbortError):
        significance_test(model, "act", same, ConceptSet("pool", np.ones((20, 3))), 0, np.ones((4, 3)), runs=10)


def test_two_sample_mode():
    model, pos, pool, inputs = separable_setup(seed=2)
    report = significance_test(model, "act", pos, pool, 0, inputs, runs=20, mode="two-sample")
    assert report.mode == "two-sample" and len(report.extra["random_scores"]) == 20
    assert report.significant
    with pytest.raises(ValueError):
        significance_test(model, "act", pos, pool, 0, inputs, runs=20, mode="other")
