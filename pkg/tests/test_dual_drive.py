import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fhgs.dual_drive import (AccumulatorState, LossBundle, SimilarityActivation,
                             accumulate_lcf, accumulate_lgt, lcf_bruteforce,
                             lcf_linear, lgt_value, pixel_fe, polarity)

from conftest import random_fragment_arrays

ACT = SimilarityActivation()  # lam=0.5, k=20


def test_activation_validation():
    with pytest.raises(ValueError):
        SimilarityActivation(k=0.0)
    with pytest.raises(ValueError):
        SimilarityActivation(lam=1.5)


def test_polarity_midpoint_exact():
    assert polarity(0.5, ACT) == 0.5


def test_polarity_matched_feature():
    np.testing.assert_allclose(polarity(1.0, ACT), 1.0 / (1.0 + np.exp(10.0)), rtol=1e-12)
    assert abs(polarity(1.0, ACT) - 4.5398e-5) < 1e-8


def test_polarity_mismatched_feature():
    np.testing.assert_allclose(polarity(0.0, ACT), 1.0 / (1.0 + np.exp(-10.0)), rtol=1e-12)
    assert abs(polarity(0.0, ACT) - 0.9999546) < 1e-7


def test_polarity_strictly_decreasing():
    phi = np.linspace(-1, 1, 201)
    sig = polarity(phi, ACT)
    assert np.all(np.diff(sig) < 0)
    assert np.all((sig > 0) & (sig < 1))


@pytest.mark.parametrize("delta", [0.1, 0.3, 0.5])
def test_polarity_point_symmetry(delta):
    s = polarity(ACT.lam + delta, ACT) + polarity(ACT.lam - delta, ACT)
    assert abs(s - 1.0) < 1e-12


@given(st.floats(0.0, 0.45), st.floats(1.0, 200.0), st.floats(-0.5, 0.5))
def test_polarity_symmetry_property(delta, k, lam):
    act = SimilarityActivation(lam=lam, k=k)
    s = polarity(lam + delta, act) + polarity(lam - delta, act)
    assert abs(s - 1.0) < 1e-12


def test_polarity_clamps_out_of_range():
    assert polarity(1.0 + 1e-7, ACT) == polarity(1.0, ACT)


def test_accumulate_lgt_midpoint():
    state = AccumulatorState(feature_dim=2)
    accumulate_lgt(state, w=0.6, sigma=polarity(ACT.lam, ACT))
    assert abs(state.lgt_partial - 0.3) < 1e-15


def test_accumulate_lgt_matched_is_negligible():
    state = AccumulatorState(feature_dim=2)
    accumulate_lgt(state, w=1.0, sigma=polarity(1.0, ACT))
    assert state.lgt_partial <= 4.54e-5


def test_lgt_empty_pixel():
    assert lgt_value(np.zeros(0), np.zeros(0)) == 0.0


def test_lcf_single_fragment_zero():
    state = AccumulatorState(feature_dim=3)
    accumulate_lcf(state, 0.7, 1.0, np.array([1.0, 0, 0]))
    assert state.lcf_partial == 0.0


def test_lcf_identical_features_zero():
    f = np.array([0.0, 1.0, 0.0])
    w = np.array([0.4, 0.5])
    sigma = np.array([1.0, 1.0])
    assert abs(lcf_linear(w, sigma, np.stack([f, f]))) < 1e-15


def test_lcf_orthogonal_pair_hand_value():
    # two fragments far-to-near, orthogonal unit features, w = 0.5 each,
    # sigma of the nearer forced to 1: contribution 1 * 0.5 * (0.5 - 0)
    w = np.array([0.5, 0.5])
    sigma = np.array([0.3, 1.0])  # first sigma irrelevant (empty inner sum)
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert abs(lcf_linear(w, sigma, f) - 0.25) < 1e-15
    assert abs(lcf_bruteforce(w, sigma, f) - 0.25) < 1e-15


@pytest.mark.parametrize("n,d", [(0, 4), (1, 4), (2, 8), (17, 4), (64, 16), (128, 64)])
def test_rearrangement_identity(n, d):
    rng = np.random.default_rng(n * 131 + d)
    w, sigma, f = random_fragment_arrays(rng, n, d)
    a = lcf_linear(w, sigma, f)
    b = lcf_bruteforce(w, sigma, f)
    assert abs(a - b) <= 1e-10 * max(abs(a), abs(b), 1.0)


def test_rearrangement_identity_order_agnostic():
    rng = np.random.default_rng(5)
    w, sigma, f = random_fragment_arrays(rng, 32, 8)
    perm = rng.permutation(32)
    a = lcf_linear(w[perm], sigma[perm], f[perm])
    b = lcf_bruteforce(w[perm], sigma[perm], f[perm])
    assert abs(a - b) <= 1e-12


def test_lcf_bounds():
    rng = np.random.default_rng(9)
    for _ in range(100):
        n = int(rng.integers(0, 40))
        w, sigma, f = random_fragment_arrays(rng, n, 8)
        wsum = w.sum()
        lgt = lgt_value(w, sigma)
        lcf = lcf_linear(w, sigma, f)
        assert -1e-12 <= lgt <= wsum + 1e-12
        assert -1e-12 <= lcf <= 2.0 * wsum ** 2 + 1e-12


def test_cluster_purity_monotone_sigma_frozen():
    # improving the last fragment's cosine against every farther fragment
    # never increases the clustering loss (sigma held fixed)
    rng = np.random.default_rng(21)
    checked = 0
    while checked < 50:
        n = int(rng.integers(2, 7))
        w, sigma, f = random_fragment_arrays(rng, n, 4)
        cand = rng.normal(size=4)
        cand /= np.linalg.norm(cand)
        old_cos = f[:-1] @ f[-1]
        new_cos = f[:-1] @ cand
        if not np.all(new_cos >= old_cos):
            continue
        f2 = f.copy()
        f2[-1] = cand
        assert lcf_linear(w, sigma, f2) <= lcf_linear(w, sigma, f) + 1e-12
        checked += 1


def test_pixel_fe_empty():
    assert pixel_fe(np.zeros(0), np.zeros((0, 4)), np.zeros(4)) == 0.0


def test_pixel_fe_matched():
    f_gt = np.array([1.0, 0, 0, 0])
    w = np.array([0.3, 0.4])
    feats = np.stack([f_gt, f_gt])
    assert pixel_fe(w, feats, f_gt, ACT) <= 4.54e-5 * w.sum()


def test_pixel_fe_orthogonal():
    f_gt = np.array([1.0, 0, 0, 0])
    feats = np.array([[0, 1.0, 0, 0], [0, 0, 1.0, 0]])
    w = np.array([0.3, 0.4])
    val = pixel_fe(w, feats, f_gt, ACT)
    np.testing.assert_allclose(val, w.sum() * polarity(0.0, ACT), rtol=1e-12)


def test_loss_bundle_mixing_exact():
    b = LossBundle(l_rgb=0.25, l_gt=0.5, l_cf=0.125, lambda1=2.0, lambda2=4.0)
    assert b.total == 0.25 + 2.0 * 0.5 + 4.0 * 0.125
    assert b.finite()
    b2 = LossBundle(l_rgb=0.25, l_gt=0.5, l_cf=0.125, lambda1=4.0, lambda2=4.0)
    assert b2.total - b.total == 2.0 * 0.5  # doubling lambda1 doubles its share
