import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmseg.crf import CrfParams, UnaryField, _BilateralGrid, _bilateral_exact, mean_field, to_unary
from oracles import naive_mean_field

SMALL = dict(gauss_sxy=1.5, gauss_weight=3.0, bilat_sxy=4.0, bilat_srgb=13.0, bilat_weight=10.0, truncate=3.0)


def _random_case(rng, L, H, W):
    u = rng.random((L, H, W)) + 1e-3
    u /= u.sum(axis=0, keepdims=True)
    img = rng.integers(0, 256, (H, W, 3)).astype(float)
    return u, img


def test_to_unary_examples():
    u = to_unary(np.ones((1, 1, 1)), background_score=0.5).probs
    e = math.e
    assert u[1, 0, 0] == pytest.approx(e / (e + math.exp(0.5)), abs=1e-12)
    u = to_unary(np.full((3, 2, 2), 0.5), background_score=0.5).probs
    np.testing.assert_allclose(u, 0.25)
    with pytest.raises(ValueError):
        to_unary(np.full((1, 1, 1), 1.5))
    with pytest.raises(ValueError):
        to_unary(np.full((1, 1, 1), np.nan))
    c = to_unary(np.array([[[0.8]], [[0.3]]]), background_mode="complement").probs
    ex = np.exp([0.2, 0.8, 0.3])
    np.testing.assert_allclose(c[:, 0, 0], ex / ex.sum())


def test_unary_field_invariants():
    with pytest.raises(ValueError):
        UnaryField(np.full((2, 1, 1), 0.4))
    with pytest.raises(ValueError):
        CrfParams(iterations=-1)
    with pytest.raises(ValueError):
        CrfParams(bilat_srgb=0)
    with pytest.raises(ValueError):
        CrfParams(gauss_weight=-1)


def test_zero_weights_and_zero_iterations_give_unary_argmax():
    rng = np.random.default_rng(0)
    u, img = _random_case(rng, 3, 6, 7)
    for params in (CrfParams(iterations=5, gauss_weight=0, bilat_weight=0), CrfParams(iterations=0)):
        Q, lab = mean_field(u, img, params)
        np.testing.assert_array_equal(lab.labels, u.argmax(axis=0))


def test_4x4_two_labels_matches_naive():
    rng = np.random.default_rng(1)
    u, img = _random_case(rng, 2, 4, 4)
    Q, _ = mean_field(u, img, CrfParams(iterations=3, kernel="exact", **SMALL))
    np.testing.assert_allclose(Q, naive_mean_field(u, img, 3, **SMALL), atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 10), st.integers(1, 10), st.integers(0, 2 ** 31),
       st.floats(0.5, 5), st.floats(1, 40), st.floats(1, 10))
def test_matches_naive_property(L, H, W, seed, gsxy, bsxy, trunc):
    rng = np.random.default_rng(seed)
    u, img = _random_case(rng, L, H, W)
    kw = dict(gauss_sxy=gsxy, gauss_weight=2.0, bilat_sxy=bsxy, bilat_srgb=20.0, bilat_weight=5.0, truncate=trunc)
    Q, _, hist = mean_field(u, img, CrfParams(iterations=3, kernel="exact", **kw), return_history=True)
    ref, ref_hist = naive_mean_field(u, img, 3, history=True, **kw)
    np.testing.assert_allclose(Q, ref, atol=1e-5)
    for a, b in zip(hist, ref_hist):
        np.testing.assert_allclose(a, b, atol=1e-5)
        assert (a >= 0).all() and np.allclose(a.sum(axis=0), 1, atol=1e-5)


def test_label_permutation_equivariance():
    rng = np.random.default_rng(2)
    u, img = _random_case(rng, 3, 8, 8)
    perm = [2, 0, 1]
    p = CrfParams(kernel="exact", **SMALL)
    Q, lab = mean_field(u, img, p)
    Qp, labp = mean_field(u[perm], img, p)
    np.testing.assert_allclose(Qp, Q[perm], atol=1e-12)
    np.testing.assert_array_equal(np.asarray(perm)[labp.labels], lab.labels)


@pytest.mark.parametrize("kernel", ["exact", "grid"])
def test_mirror_symmetry(kernel):
    rng = np.random.default_rng(3)
    u, img = _random_case(rng, 2, 6, 5)
    u = np.concatenate([u, u[:, :, ::-1]], axis=2)
    img = np.concatenate([img, img[:, ::-1]], axis=1)
    Q, _ = mean_field(u, img, CrfParams(kernel=kernel, **SMALL))
    np.testing.assert_allclose(Q, Q[:, :, ::-1], atol=1e-5)


def test_deterministic():
    rng = np.random.default_rng(4)
    u, img = _random_case(rng, 3, 12, 12)
    a, _ = mean_field(u, img, CrfParams(kernel="grid"))
    b, _ = mean_field(u, img, CrfParams(kernel="grid"))
    assert a.tobytes() == b.tobytes()


def test_grid_kernel_tracks_exact_kernel():
    # colour-noisy two-region image; the grid filter is an approximation, checked in relative L2
    rng = np.random.default_rng(5)
    H, W = 32, 32
    img = np.where(np.arange(W)[None, :, None] < 16, 60.0, 190.0) + rng.uniform(-12, 12, (H, W, 3))
    Q = rng.random((2, H, W))
    Q /= Q.sum(axis=0, keepdims=True)
    exact = _bilateral_exact(Q, img, 8.0, 13.0, 100)
    approx = _BilateralGrid(img, 8.0, 13.0).filter(Q)
    assert np.linalg.norm(approx - exact) / np.linalg.norm(exact) < 0.2
    p = dict(bilat_sxy=8.0, gauss_sxy=1.0)
    _, le = mean_field(Q, img, CrfParams(kernel="exact", **p))
    _, lg = mean_field(Q, img, CrfParams(kernel="grid", **p))
    assert (le.labels == lg.labels).mean() > 0.9


def test_auto_kernel_choice():
    from llmseg.crf import _choose_kernel

    assert _choose_kernel(CrfParams(), 16, 16) == "exact"
    assert _choose_kernel(CrfParams(), 288, 288) == "grid"
    assert _choose_kernel(CrfParams(kernel="exact"), 288, 288) == "exact"


def test_crf_cleans_noisy_labels():
    rng = np.random.default_rng(6)
    H, W = 20, 20
    truth = (np.arange(W)[None, :] >= 10).repeat(H, 0).astype(int)
    img = np.where(truth[..., None] == 1, 200.0, 50.0).repeat(3, -1)
    p = np.where(truth == 1, 0.7, 0.3) + rng.uniform(-0.25, 0.25, (H, W))
    u = np.stack([1 - p, p])
    _, lab = mean_field(u, img, CrfParams(bilat_sxy=10.0))
    assert (u.argmax(0) == truth).mean() < (lab.labels == truth).mean() == 1.0
