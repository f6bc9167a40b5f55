import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gast_uda import spst

GAMMAS = [0.01, 0.05, 0.5, math.log(2)]


def random_probs(rng, n, C):
    # mix of flat and peaked rows so both sides of every threshold are exercised
    logits = rng.standard_normal((n, C)) * rng.choice([0.5, 3, 10], (n, 1))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return p / p.sum(axis=1, keepdims=True)


def brute_force_labels(p, gamma):
    """Minimise -(sum_c y_c log p_c + gamma |y|_1) over the zero vector and each one-hot."""
    out = []
    for row in p:
        best, best_val = -1, 0.0  # the zero vector scores 0
        for c in range(len(row)):
            val = -(math.log(row[c]) + gamma) if row[c] > 0 else math.inf
            if val < best_val:
                best, best_val = c, val
        out.append(best)
    return np.array(out)


def test_threshold_examples():
    assert spst.selection_threshold(0.05) == pytest.approx(0.951229, abs=1e-6)
    t = spst.assign_pseudo_labels([[0.7, 0.2, 0.1]], 0.05)
    assert not t.assigned[0] and t.label[0] == -1
    t = spst.assign_pseudo_labels([[0.96, 0.03, 0.01]], 0.05)
    assert t.assigned[0] and t.label[0] == 0
    t = spst.assign_pseudo_labels([[0.6, 0.4]], math.log(2))
    assert t.assigned[0] and t.label[0] == 0
    assert t.confidence[0] == 0.6


def test_threshold_is_strict():
    t = spst.assign_pseudo_labels([[0.5, 0.5]], math.log(2))
    assert not t.assigned[0]


@pytest.mark.parametrize("gamma", GAMMAS)
def test_matches_brute_force(gamma):
    rng = np.random.default_rng(0)
    p = random_probs(rng, 1000, 6)
    table = spst.assign_pseudo_labels(p, gamma)
    np.testing.assert_array_equal(table.label, brute_force_labels(p, gamma))
    assert len(table) == 1000


@given(st.lists(st.floats(0.01, 2.0), min_size=2, max_size=2, unique=True), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_monotone_in_gamma(gammas, seed):
    g1, g2 = sorted(gammas)
    p = random_probs(np.random.default_rng(seed), 200, 5)
    a1 = spst.assign_pseudo_labels(p, g1).assigned
    a2 = spst.assign_pseudo_labels(p, g2).assigned
    assert np.all(a2[a1])


def test_per_sample_decomposability():
    rng = np.random.default_rng(1)
    p = random_probs(rng, 100, 4)
    base = spst.assign_pseudo_labels(p, 0.05)
    extra = np.full((30, 4), 0.25)
    more = spst.assign_pseudo_labels(np.vstack([p, extra]), 0.05)
    np.testing.assert_array_equal(more.label[:100], base.label)
    assert not more.assigned[100:].any()


def test_argmax_tie_goes_to_lowest_class():
    t = spst.assign_pseudo_labels([[0.0, 0.5, 0.5]], 0.8)  # threshold exp(-0.8) ~ 0.449
    assert t.label[0] == 1


@pytest.mark.parametrize("bad", [[[0.5, 0.6]], [[-0.1, 1.1]], [[np.nan, 1.0]], [0.5, 0.5]])
def test_malformed_probabilities(bad):
    with pytest.raises(ValueError):
        spst.assign_pseudo_labels(bad, 0.05)


def test_gamma_must_be_positive():
    with pytest.raises(ValueError):
        spst.assign_pseudo_labels([[1.0, 0.0]], 0.0)


def test_target_loss_examples():
    empty = spst.assign_pseudo_labels([[0.5, 0.5], [0.6, 0.4]], 0.05)
    assert spst.target_self_training_loss([[0.5, 0.5], [0.6, 0.4]], empty, 0.05) == 0.0
    one = spst.assign_pseudo_labels([[1.0, 0.0]], 0.05)
    assert spst.target_self_training_loss([[1.0, 0.0]], one, 0.05) == pytest.approx(-0.05, abs=1e-15)
    # two samples, one assigned at p=0.5 (gamma = ln 2 + margin would not assign; build the table directly)
    table = spst.PseudoLabelTable(np.array([True, False]), np.array([0, -1]), np.array([0.5, 0.5]))
    val = spst.target_self_training_loss([[0.5, 0.5], [0.5, 0.5]], table, 0.05)
    assert val == pytest.approx((math.log(2) - 0.05) / 2, abs=1e-12)
    assert abs(val - 0.321574) <= 1e-6


def test_target_loss_matches_objective_formula():
    rng = np.random.default_rng(2)
    p = random_probs(rng, 300, 5)
    for gamma in GAMMAS:
        t = spst.assign_pseudo_labels(p, gamma)
        y = np.zeros_like(p)
        y[t.assigned, t.label[t.assigned]] = 1
        direct = -(np.sum(y * np.log(np.maximum(p, 1e-300))) + gamma * y.sum()) / len(p)
        assert spst.target_self_training_loss(p, t, gamma) == pytest.approx(direct, abs=1e-12)
        # negative only via the -gamma term of confident samples
        assert spst.target_self_training_loss(p, t, gamma) >= -gamma


def test_table_accuracy():
    t = spst.assign_pseudo_labels([[0.99, 0.01], [0.01, 0.99], [0.5, 0.5]], 0.05)
    assert t.n_assigned == 2
    assert t.accuracy([0, 0, 1]) == 0.5
    assert math.isnan(spst.assign_pseudo_labels([[0.5, 0.5]]).accuracy([0]))


def test_lambda_schedule():
    cfg = spst.SpstConfig(lambda_warmup_epochs=30, lambda_ramp_epochs=30)
    assert spst.lambda_schedule(0, cfg) == 0
    assert spst.lambda_schedule(29, cfg) == 0
    assert spst.lambda_schedule(45, cfg) == 0.5
    assert spst.lambda_schedule(150, cfg) == 1
    assert spst.lambda_schedule(3, spst.SpstConfig(lambda_warmup_epochs=3, lambda_ramp_epochs=0)) == 1
    vals = [spst.lambda_schedule(e, cfg) for e in range(100)]
    assert vals == sorted(vals) and 0 <= min(vals) and max(vals) <= 1


def test_semantic_loss():
    assert spst.semantic_loss(1.7, 3.0, 0.0) == 1.7
    assert spst.semantic_loss(1.7, 0.0, 1.0) == 1.7
    assert spst.semantic_loss(2.0, 1.0, 0.5) == 2.5
    with pytest.raises(ValueError):
        spst.semantic_loss(1.0, 1.0, 1.5)


def test_config_validation():
    with pytest.raises(ValueError):
        spst.SpstConfig(gamma=-1)
