import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ccshap_audit import fixtures
from ccshap_audit.corpus import Label
from ccshap_audit.errors import ContractError, ExactLimitError
from ccshap_audit.scoring import ClassificationTarget, CoalitionScorer, tokenize
from ccshap_audit.shapley import (
    ShapVector,
    all_coalitions,
    exact_shapley,
    mc_shapley,
    normalize_contributions,
)
from ccshap_audit.toy_models import ToyBackend

from .oracles import brute_force_shapley, sigmoid


def as_set_fn(scorer, n):
    def value(s):
        m = np.zeros((1, n), bool)
        m[0, list(s)] = True
        return float(scorer(m)[0])

    return value


# -- exact engine against the subset formula ---------------------------------


def test_exact_additive_two_players():
    f = lambda m: 0.5 + m.astype(float) @ np.array([0.3, 0.1])
    phi = exact_shapley(f, 2).values
    np.testing.assert_allclose(phi, [0.3, 0.1], atol=1e-12)


def test_exact_symmetric_players_equal():
    f = lambda m: (m[:, 0] & m[:, 1]).astype(float)
    phi = exact_shapley(f, 2).values
    np.testing.assert_allclose(phi, [0.5, 0.5], atol=1e-12)


@pytest.mark.parametrize("make", [fixtures.additive, fixtures.symmetric_pair, fixtures.planted_dummy])
def test_exact_matches_subset_formula(make):
    fx = make()
    expected = brute_force_shapley(as_set_fn(fx.scorer, fx.n_players), fx.n_players)
    np.testing.assert_allclose(exact_shapley(fx.scorer, fx.n_players).values, expected, atol=1e-12)


def test_exact_on_trained_toy_matches_hand_enumeration(trained_model):
    seq = tokenize("urgent-verify your bank password now please")
    assert len(seq) == 6
    contrib = trained_model.contributions(seq)
    bias = float(trained_model.bias)

    def value(s):
        return sigmoid(bias + sum(contrib[i] for i in s))

    scorer = CoalitionScorer(ToyBackend(trained_model), seq, ClassificationTarget(Label.PHISHING))
    got = exact_shapley(scorer, 6).values
    np.testing.assert_allclose(got, brute_force_shapley(value, 6), atol=1e-12)


def test_exact_limit_raises():
    with pytest.raises(ExactLimitError):
        exact_shapley(lambda m: np.zeros(len(m)), 15)
    exact_shapley(lambda m: np.zeros(len(m)), 15, exact_limit=15)


def test_all_coalitions_bit_layout():
    m = all_coalitions(3)
    assert m.shape == (8, 3)
    assert m[5].tolist() == [True, False, True]


def test_scorer_length_checked():
    with pytest.raises(ContractError):
        exact_shapley(lambda m: np.zeros(1), 3)


# -- Monte Carlo -------------------------------------------------------------


def test_mc_constant_is_zero():
    fx = fixtures.constant()
    shap = mc_shapley(fx.scorer, fx.n_players, 200, seed=1)
    assert np.all(shap.values == 0.0)


def test_mc_additive_exact_weights_many_seeds():
    fx = fixtures.additive()
    truth = exact_shapley(fx.scorer, fx.n_players).values
    for seed in range(30):
        shap = mc_shapley(fx.scorer, fx.n_players, 500, seed=seed)
        assert np.max(np.abs(shap.values - truth)) <= 0.02


def test_mc_trained_toy_within_tolerance():
    fx = fixtures.trained_toy(text="urgent-verify your bank account password today or it be suspended")
    assert fx.n_players == 10
    truth = exact_shapley(fx.scorer, fx.n_players).values
    shap = mc_shapley(fx.scorer, fx.n_players, 2000, seed=0)
    assert np.max(np.abs(shap.values - truth)) <= 0.02


def test_mc_unbiased_over_seeds():
    fx = fixtures.planted_dummy(n=6, dummy=2)
    truth = exact_shapley(fx.scorer, fx.n_players).values
    runs = np.array([mc_shapley(fx.scorer, 6, 50, seed=s, antithetic=False).values for s in range(100)])
    assert np.max(np.abs(runs.mean(axis=0) - truth)) <= 0.005


def test_mc_dummy_within_three_stderr():
    fx = fixtures.planted_dummy()
    shap = mc_shapley(fx.scorer, fx.n_players, 1000, seed=5, antithetic=False)
    d = fx.dummy[0]
    assert abs(shap.values[d]) <= 3 * shap.stderr[d] + 1e-15


def test_mc_stderr_nan_for_single_unit():
    fx = fixtures.additive()
    assert np.isnan(mc_shapley(fx.scorer, fx.n_players, 1, antithetic=False).stderr).all()
    assert np.isnan(mc_shapley(fx.scorer, fx.n_players, 2).stderr).all()
    assert np.isfinite(mc_shapley(fx.scorer, fx.n_players, 10).stderr).all()


def test_mc_deterministic_and_layout_invariant():
    fx = fixtures.planted_dummy()
    base = mc_shapley(fx.scorer, fx.n_players, 300, seed=9)
    again = mc_shapley(fx.scorer, fx.n_players, 300, seed=9)
    other_chunks = mc_shapley(fx.scorer, fx.n_players, 300, seed=9, chunk_size=7)
    threaded = mc_shapley(fx.scorer, fx.n_players, 300, seed=9, n_jobs=4, chunk_size=16)
    assert base.values.tobytes() == again.values.tobytes()
    np.testing.assert_allclose(other_chunks.values, base.values, rtol=0, atol=1e-15)
    np.testing.assert_allclose(threaded.values, base.values, rtol=0, atol=1e-15)
    assert not np.array_equal(mc_shapley(fx.scorer, fx.n_players, 300, seed=10).values, base.values)


def test_mc_rejects_zero_samples():
    with pytest.raises(ContractError):
        mc_shapley(lambda m: np.zeros(len(m)), 3, 0)


def test_antithetic_pair_exact_for_two_way_interaction():
    fx = fixtures.symmetric_pair()
    truth = exact_shapley(fx.scorer, fx.n_players).values
    shap = mc_shapley(fx.scorer, fx.n_players, 400, seed=2)
    assert abs(shap.values[0] - shap.values[1]) <= 0.02
    assert np.max(np.abs(shap.values - truth)) <= 0.02


def test_shap_vector_json_round_trip():
    fx = fixtures.additive()
    shap = mc_shapley(fx.scorer, fx.n_players, 1, antithetic=False)
    text = json.dumps(shap.to_dict())
    assert "NaN" not in text
    back = ShapVector.from_dict(json.loads(text))
    assert back.values.tobytes() == shap.values.tobytes()
    assert np.isnan(back.stderr).all() and back.n_samples == 1


# -- axioms (property based) -------------------------------------------------


weights = st.lists(st.floats(-2, 2, allow_nan=False), min_size=2, max_size=8)


def _interaction_scorer(w, seed):
    n = len(w)
    pair = np.random.default_rng(seed).normal(0, 0.3, (n, n))

    def f(m):
        m = np.asarray(m, float)
        return np.tanh(m @ np.asarray(w) + np.einsum("ij,jk,ik->i", m, pair, m))

    return f, pair


@settings(max_examples=40, deadline=None)
@given(weights, st.integers(0, 10_000), st.integers(1, 60))
def test_mc_efficiency_every_estimate(w, seed, n_samples):
    f, _ = _interaction_scorer(w, seed)
    shap = mc_shapley(f, len(w), n_samples, seed=seed)
    assert abs(shap.values.sum() - (shap.full_score - shap.baseline)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(weights, st.integers(0, 10_000))
def test_exact_efficiency_and_dummy(w, seed):
    w = list(w)
    f0, pair = _interaction_scorer(w, seed)
    dummy = len(w) - 1
    w[dummy] = 0.0
    pair[dummy, :] = pair[:, dummy] = 0.0
    f = lambda m: np.tanh(np.asarray(m, float) @ np.asarray(w) + np.einsum("ij,jk,ik->i", np.asarray(m, float), pair, np.asarray(m, float)))
    shap = exact_shapley(f, len(w))
    assert abs(shap.values.sum() - (shap.full_score - shap.baseline)) <= 1e-9
    assert abs(shap.values[dummy]) <= 1e-9
    mc = mc_shapley(f, len(w), 20, seed=seed)
    assert abs(mc.values[dummy]) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.floats(-1, 1, allow_nan=False), st.integers(0, 10_000))
def test_exact_symmetry(n, a, seed):
    rest = np.random.default_rng(seed).normal(0, 1, n - 2)

    def f(m):
        m = np.asarray(m, float)
        return a * m[:, 0] * m[:, 1] + 0.2 * (m[:, 0] + m[:, 1]) + m[:, 2:] @ rest

    phi = exact_shapley(f, n).values
    assert abs(phi[0] - phi[1]) <= 1e-9


# -- normalisation -----------------------------------------------------------


def test_normalize_example():
    norm = normalize_contributions(np.array([2.0, -1.0, 1.0]))
    np.testing.assert_allclose(norm.ratios, [0.5, -0.25, 0.25], atol=1e-15)
    assert not norm.degenerate


def test_normalize_zero_is_degenerate():
    norm = normalize_contributions(np.zeros(2))
    assert norm.degenerate and np.all(norm.ratios == 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False), min_size=1, max_size=50))
def test_normalize_l1_is_one(values):
    phi = np.array(values)
    norm = normalize_contributions(phi)
    if np.sum(np.abs(phi)) == 0:
        assert norm.degenerate
    else:
        assert abs(np.sum(np.abs(norm.ratios)) - 1.0) <= 1e-9
        assert np.all(np.sign(norm.ratios) == np.sign(phi))


def test_normalize_accepts_shap_vector():
    shap = ShapVector(np.array([1.0, 3.0]), 0, 0.0, 4.0)
    np.testing.assert_allclose(normalize_contributions(shap).ratios, [0.25, 0.75])
