import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metacam.clustering import PseudoLabeling
from metacam.memloss import (FeatureMemory, LossConfig, build_centroids, check_noise_tolerance,
                             l_c, l_dce, l_dsce, label_sums)

from conftest import unit_rows

E = math.e
F_X = np.array([1.0, 0.0])
UNIFORM_C = np.array([[0.0, 1.0], [0.0, 1.0], [0.0, -1.0]])  # every logit is zero


def labeling(labels):
    labels = np.asarray(labels)
    return PseudoLabeling(labels, np.ones(len(labels), bool), int(labels.max()) + 1)


# --- memory ------------------------------------------------------------------


def test_memory_update_example():
    mem = FeatureMemory(np.array([[1.0, 0.0]]), alpha=0.2)
    mem.update(0, [0.0, 1.0])
    ref = np.array([0.2, 0.8]) / math.hypot(0.2, 0.8)
    np.testing.assert_allclose(mem.W[0], ref, rtol=0, atol=1e-15)
    np.testing.assert_allclose(mem.W[0], [0.242536, 0.970143], atol=1e-6)


def test_memory_momentum_extremes():
    keep = FeatureMemory(np.array([[0.6, 0.8]]), alpha=1.0)
    keep.update(0, [1.0, 0.0])
    np.testing.assert_array_equal(keep.W[0], [0.6, 0.8])
    replace = FeatureMemory(np.array([[0.6, 0.8]]), alpha=0.0)
    replace.update(0, [0.0, 1.0])
    np.testing.assert_array_equal(replace.W[0], [0.0, 1.0])


def test_memory_update_touches_one_row(rng):
    mem = FeatureMemory(unit_rows(rng, 10, 4))
    before = mem.snapshot()
    mem.update(3, unit_rows(rng, 1, 4)[0])
    changed = np.any(mem.W != before, axis=1)
    assert changed.tolist() == [i == 3 for i in range(10)]
    np.testing.assert_allclose(np.linalg.norm(mem.W, axis=1), 1.0, atol=1e-9)


def test_memory_index_checked():
    with pytest.raises(IndexError):
        FeatureMemory(np.eye(2)).update(2, [1.0, 0.0])


def test_memory_keeps_unit_rows_bitwise(rng):
    W = unit_rows(rng, 6, 3)
    np.testing.assert_array_equal(FeatureMemory(W).W, W)


# --- centroids ---------------------------------------------------------------


def test_centroid_of_two_axes():
    cs = build_centroids(np.array([[1.0, 0.0], [0.0, 1.0]]), labeling([0, 0]))
    np.testing.assert_allclose(cs.C[0], [math.sqrt(0.5)] * 2, rtol=0, atol=1e-15)


def test_singleton_centroid_is_the_row(rng):
    W = unit_rows(rng, 3, 4)
    np.testing.assert_allclose(build_centroids(W, labeling([0, 1, 1])).C[0], W[0], rtol=0, atol=1e-15)


def test_centroids_match_group_by_mean(rng):
    W = unit_rows(rng, 50, 6)
    labels = np.concatenate([np.arange(5), rng.integers(0, 5, size=45)])
    cs = build_centroids(W, labeling(labels))
    for k in range(5):
        m = W[labels == k].mean(axis=0)
        np.testing.assert_allclose(cs.C[k], m / np.linalg.norm(m), rtol=0, atol=1e-12)
    np.testing.assert_array_equal(cs.counts, np.bincount(labels))


def test_centroids_permutation_equivariant(rng):
    W = unit_rows(rng, 30, 4)
    labels = np.concatenate([np.arange(4), rng.integers(0, 4, size=26)])
    perm = rng.permutation(30)
    a = build_centroids(W, labeling(labels))
    b = build_centroids(W[perm], labeling(labels[perm]))
    np.testing.assert_allclose(a.C, b.C, rtol=0, atol=1e-12)


def test_centroids_member_restriction():
    W = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    cs = build_centroids(W, labeling([0, 0, 1]), members=[True, False, True])
    np.testing.assert_array_equal(cs.C[0], [1.0, 0.0])


# --- losses ------------------------------------------------------------------


def test_dce_uniform_is_log_nc():
    C = np.vstack([UNIFORM_C, [[0.0, 1.0]]])
    assert l_dce(F_X, 2, C, 0.05) == pytest.approx(math.log(4), abs=1e-12)
    assert l_dce(F_X, 2, C, 0.05) == pytest.approx(1.386294, abs=1e-6)


def test_dce_saturates():
    C = np.array([[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    assert 0 <= l_dce(F_X, 0, C, 0.01) < 1e-80


def test_dce_matches_scalar_softmax(rng):
    C = unit_rows(rng, 3, 2)
    f, tau = unit_rows(rng, 1, 2)[0], 0.3
    z = [float(c @ f) / tau for c in C]
    ref = -(z[1] - math.log(sum(math.exp(v) for v in z)))
    assert l_dce(f, 1, C, tau) == pytest.approx(ref, abs=1e-12)


def test_dsce_target_entries():
    # softmax of a one-hot vector over three classes
    on, off = E / (2 + E), 1 / (2 + E)
    assert on == pytest.approx(0.576117, abs=1e-6) and off == pytest.approx(0.211942, abs=1e-6)
    C = np.array([[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    assert l_dsce(F_X, 0, C, 1e-3) == pytest.approx(-math.log(on), abs=1e-12)


def test_dsce_uniform_prediction():
    ref = -1 / 3 - math.log(1 / (2 + E))
    assert l_dsce(F_X, 0, UNIFORM_C, 0.05) == pytest.approx(ref, abs=1e-12)
    assert ref == pytest.approx(1.218111, abs=1e-6)


def test_dsce_concentrated_prediction():
    C = np.array([[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    assert l_dsce(F_X, 0, C, 1e-3) == pytest.approx(0.551444, abs=1e-6)


def test_combined_weights():
    both = l_c(F_X, 0, UNIFORM_C, LossConfig(0.05, 1.0, 1.0))
    assert both == pytest.approx(math.log(3) - 1 / 3 + math.log(2 + E), abs=1e-12)
    assert both == pytest.approx(2.316723, abs=1e-6)


def test_combined_reduces_to_parts(rng):
    C, f = unit_rows(rng, 5, 3), unit_rows(rng, 1, 3)[0]
    assert l_c(f, 2, C, LossConfig(0.1, 1.0, 0.0)) == l_dce(f, 2, C, 0.1)
    assert l_c(f, 2, C, LossConfig(0.1, 0.0, 1.0)) == l_dsce(f, 2, C, 0.1)


def test_noise_tolerance_closed_forms(rng):
    C3, C2 = unit_rows(rng, 3, 4), unit_rows(rng, 2, 4)
    f = unit_rows(rng, 1, 4)[0]
    total, expected = check_noise_tolerance(f, C3, 0.05)
    assert expected == pytest.approx(-1 + 3 * math.log(2 + E), abs=1e-12)
    assert expected == pytest.approx(3.654334, abs=1e-6)
    assert abs(total - expected) <= 1e-9
    total, expected = check_noise_tolerance(f, C2, 0.05)
    assert expected == pytest.approx(1.626523, abs=1e-6)
    assert abs(total - expected) <= 1e-9


def test_dce_sum_is_not_constant(rng):
    C = unit_rows(rng, 4, 3)
    f1, f2 = unit_rows(rng, 2, 3)
    assert abs(label_sums(f1, C, 0.1, "dce") - label_sums(f2, C, 0.1, "dce")) > 1e-3


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_c=st.integers(2, 50), tau=st.floats(0.01, 2.0))
def test_noise_tolerance_property(seed, n_c, tau):
    rng = np.random.default_rng(seed)
    total, expected = check_noise_tolerance(unit_rows(rng, 1, 8)[0], unit_rows(rng, n_c, 8), tau)
    assert abs(total - expected) <= 1e-9 * abs(expected)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_c=st.integers(2, 20), tau=st.floats(0.01, 2.0))
def test_loss_lower_bounds(seed, n_c, tau):
    rng = np.random.default_rng(seed)
    C, f = unit_rows(rng, n_c, 5), unit_rows(rng, 1, 5)[0]
    y = int(rng.integers(n_c))
    assert l_dce(f, y, C, tau) >= 0
    assert l_dsce(f, y, C, tau) >= -math.log(E / (n_c - 1 + E)) - 1e-12


def test_tau_must_be_positive():
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
