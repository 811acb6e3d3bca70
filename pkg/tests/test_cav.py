import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavlab.autodiff import read_tnsr
from cavlab.cav import (Cav, ProbeConfig, fit_probe, probe_layers, probeable_layers, resample_negatives,
                        stratified_split, train_cav, train_relative_cav)
from cavlab.dataset import ConceptSet, generate_texture_concepts, random_image_set
from cavlab.errors import InseparableError, ShapeError
from conftest import identity_model


def blobs(rng, n, mu_pos, mu_neg, cov):
    chol = np.linalg.cholesky(cov)
    pos = mu_pos + rng.normal(size=(n, len(mu_pos))) @ chol.T
    neg = mu_neg + rng.normal(size=(n, len(mu_neg))) @ chol.T
    return pos, neg


def cos(a, b):
    return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))


def test_axis_separable_case():
    rng = np.random.default_rng(0)
    m = 8
    e1 = np.eye(m)[0]
    pos = e1 + 0.05 * rng.normal(size=(30, m))
    neg = -e1 + 0.05 * rng.normal(size=(30, m))
    model = identity_model(m)
    cav = train_cav(model, "act", ConceptSet("axis", pos), ConceptSet("neg", neg))
    assert cos(cav.vector, e1) >= 0.99
    assert cav.heldout_accuracy == 1.0
    assert np.linalg.norm(cav.vector) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_lda_direction(seed):
    rng = np.random.default_rng(seed)
    m = 10
    a = rng.normal(size=(m, m))
    cov = a @ a.T / m + np.eye(m)
    mu_pos, mu_neg = rng.normal(size=m), rng.normal(size=m)
    pos, neg = blobs(rng, 300, mu_pos, mu_neg, cov)
    oracle = np.linalg.solve(cov, mu_pos - mu_neg)
    v = fit_probe(pos, neg, ProbeConfig(seed=seed)).vector
    assert cos(v, oracle) >= 0.95


def test_swapping_sides_negates():
    rng = np.random.default_rng(1)
    pos, neg = blobs(rng, 100, np.ones(6), -np.ones(6), np.eye(6))
    a = fit_probe(pos, neg).vector
    b = fit_probe(neg, pos).vector
    assert cos(a, b) <= -0.99


def test_orientation_on_heldout():
    rng = np.random.default_rng(2)
    pos, neg = blobs(rng, 60, 0.5 * np.ones(5), np.zeros(5), np.eye(5))
    res = fit_probe(pos, neg)
    x = np.concatenate([pos, neg])
    y = np.r_[np.ones(60), np.zeros(60)]
    proj = x[res.heldout_index] @ res.vector
    assert proj[y[res.heldout_index] == 1].mean() > proj[y[res.heldout_index] == 0].mean()


def test_dual_and_primal_paths_agree():
    # fewer samples than features takes the Gram-matrix path; duplicating features does not change the geometry
    rng = np.random.default_rng(3)
    pos, neg = blobs(rng, 20, np.r_[1.0, np.zeros(4)], np.zeros(5), np.eye(5))
    v5 = fit_probe(pos, neg).vector
    pad = lambda a: np.concatenate([a, np.zeros((len(a), 60))], axis=1)
    v65 = fit_probe(pad(pos), pad(neg)).vector
    np.testing.assert_allclose(v65[:5], v5, atol=1e-9)
    np.testing.assert_allclose(v65[5:], 0, atol=1e-12)


def test_deterministic_bits():
    rng = np.random.default_rng(4)
    pos, neg = blobs(rng, 50, np.ones(7), np.zeros(7), np.eye(7))
    a = fit_probe(pos, neg, ProbeConfig(seed=9)).vector
    b = fit_probe(pos, neg, ProbeConfig(seed=9)).vector
    assert a.tobytes() == b.tobytes()


def test_error_cases():
    with pytest.raises(ValueError, match="at least 4"):
        fit_probe(np.ones((2, 3)), np.zeros((1, 3)))
    with pytest.raises(InseparableError):
        fit_probe(np.ones((5, 3)), np.ones((5, 3)))
    with pytest.raises(ShapeError):
        fit_probe(np.ones((5, 3)), np.ones((5, 4)))
    with pytest.raises(ValueError):
        ProbeConfig(heldout_fraction=1.0)
    with pytest.raises(ValueError):
        train_relative_cav(identity_model(3), "act", [ConceptSet("a", np.eye(3))])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.floats(0.05, 0.95), st.integers(0, 2**31))
def test_stratified_split_properties(n_pos, n_neg, frac, seed):
    y = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
    tr, ho = stratified_split(y, frac, np.random.default_rng(seed))
    assert sorted(np.r_[tr, ho]) == list(range(len(y)))
    for label in (0, 1):
        assert np.sum(y[tr] == label) >= 1 and np.sum(y[ho] == label) >= 1


def test_default_heldout_is_one_third():
    y = np.r_[np.ones(30, int), np.zeros(30, int)]
    _, ho = stratified_split(y, ProbeConfig().heldout_fraction, np.random.default_rng(0))
    assert len(ho) == 20


def test_relative_pair_is_antiparallel():
    rng = np.random.default_rng(5)
    pos, neg = blobs(rng, 60, np.r_[1.0, 0, 0, 0], np.r_[0, 1.0, 0, 0], 0.3 * np.eye(4))
    a, b = train_relative_cav(identity_model(4), "act", [ConceptSet("c", pos), ConceptSet("d", neg)])
    assert a.relative and b.relative and a.negative_id == "d"
    assert cos(a.vector, b.vector) <= -0.95


def test_texture_relative_cavs_are_accurate_at_last_conv_layer(texture_net):
    cs = generate_texture_concepts(["striped", "dotted", "meshed"], n=30, seed=0)
    cavs = train_relative_cav(texture_net, "relu2", list(cs.values()))
    for cav in cavs:
        assert cav.heldout_accuracy >= 0.8, (cav.concept, cav.heldout_accuracy)


def test_chance_calibration(trained, captioned):
    pool = trained.activation_at("fc1", random_image_set(captioned, 400, seed=7).examples)
    inside = 0
    for trial in range(100):
        idx = np.random.default_rng(trial).permutation(len(pool))
        acc = fit_probe(pool[idx[:100]], pool[idx[100:200]], ProbeConfig(seed=trial)).heldout_accuracy
        inside += 0.35 <= acc <= 0.65
    assert inside >= 95


def test_probe_layers_cover_interior_layers(trained):
    cs = generate_texture_concepts(["solid-red", "striped"], n=30, seed=0)
    acc = probe_layers(trained, cs["solid-red"], cs["striped"])
    assert list(acc) == probeable_layers(trained)
    assert "flatten" not in acc and "logits" not in acc
    assert all(0 <= a <= 1 for a in acc.values())


def test_cav_json_roundtrip_is_lossless(tmp_path):
    v = np.random.default_rng(0).normal(size=9)
    cav = Cav("c", "n", "act", v / np.linalg.norm(v), 0.75, 3, False, {"l2": 0.001}, ("ab", "cd"))
    cav.save(tmp_path / "c.json")
    back = Cav.load(tmp_path / "c.json")
    assert back.vector.tobytes() == cav.vector.tobytes()
    assert back.to_json() == cav.to_json()
    d = json.loads(cav.to_json())
    assert d["m"] == 9 and set(d) >= {"concept", "negative_id", "layer", "vector", "heldout_accuracy",
                                      "train_seed", "probe_config"}
    cav.save_tnsr(tmp_path / "c.tnsr")
    np.testing.assert_allclose(read_tnsr(tmp_path / "c.tnsr"), cav.vector, rtol=1e-7)
    d["m"] = 10
    with pytest.raises(ShapeError):
        Cav.from_dict(d)


def test_resample_negatives():
    pool = ConceptSet("pool", np.arange(200, dtype=float).reshape(100, 2))
    full = resample_negatives(pool, 100, seed=0)
    assert sorted(full.examples[:, 0]) == sorted(pool.examples[:, 0])
    a = resample_negatives(pool, 10, seed=1)
    assert np.array_equal(a.examples, resample_negatives(pool, 10, seed=1).examples)
    assert not np.array_equal(a.examples, resample_negatives(pool, 10, seed=2).examples)
    assert len({tuple(r) for r in a.examples}) == 10
    with pytest.raises(ValueError):
        resample_negatives(pool, 101, seed=0)
