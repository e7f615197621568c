import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from llmseg.ensemble import (
    DegenerateDescriptor,
    DescriptorMatrix,
    EnsembleConfig,
    alt_ensemble,
    attention_map,
    average_over_templates,
    baseline_similarity,
    ensemble_attention,
    fuse_descriptors,
    fuse_with_pool,
    mix_superclass,
    select_image_features,
    select_text_features,
    subclass_map,
)
from llmseg.text_embed import TokenTextFeatures
from oracles import loda_scan, fusion_map_straightline, rel_err

finite = st.floats(-10, 10, allow_nan=False, width=64)


def _dm(rows, names=None):
    rows = np.asarray(rows, dtype=np.float64)
    return DescriptorMatrix(rows, names or [str(i) for i in range(len(rows))])


# baseline (mean-token) similarity

def test_baseline_hand_example():
    np.testing.assert_array_equal(baseline_similarity([[1, 0], [0, 1]], [[2, 0]]), [2, 0])


def test_baseline_duplicate_tokens_and_zero_tokens():
    img = np.random.default_rng(0).normal(size=(5, 3))
    t = np.array([[0.3, -1.0, 2.0]])
    np.testing.assert_allclose(baseline_similarity(img, np.vstack([t, t])), baseline_similarity(img, t))
    np.testing.assert_array_equal(baseline_similarity(img, np.zeros((4, 3))), np.zeros(5))


# token selection

def test_select_hand_example():
    out = select_text_features(np.array([[[1, 5, 2], [4, 0, 3]]]))
    np.testing.assert_array_equal(out.values, [[4, 5, 3]])


def test_select_single_token_is_identity():
    t = np.random.default_rng(1).normal(size=(3, 1, 6))
    np.testing.assert_array_equal(select_text_features(t).values, t[:, 0])


def test_select_ignores_padding_rows():
    tf = TokenTextFeatures.stack([np.full((1, 2), -3.0), np.full((3, 2), -1.0)], ["a", "b"])
    out = select_text_features(tf)
    np.testing.assert_array_equal(out.values, [[-3, -3], [-1, -1]])
    assert out.descriptor_names == ["a", "b"]


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=6), elements=finite))
def test_select_matches_scan_and_dominates(tok):
    out = select_text_features(tok).values
    assert out.tolist() == loda_scan(tok.tolist())
    assert (out[:, None, :] >= tok).all()


@given(hnp.arrays(np.float64, (3, 5, 4), elements=finite), st.permutations(range(5)))
def test_select_token_permutation_invariant(tok, perm):
    np.testing.assert_array_equal(select_text_features(tok).values, select_text_features(tok[:, perm]).values)


# attention maps

def test_attention_identity_and_oracle():
    np.testing.assert_array_equal(attention_map(np.eye(2), [[1, 0]]), [[1, 0]])
    rng = np.random.default_rng(2)
    f, d = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    naive = [[sum(d[i, c] * f[p, c] for c in range(4)) for p in range(3)] for i in range(2)]
    np.testing.assert_allclose(attention_map(f, d), naive, rtol=1e-6)


@given(hnp.arrays(np.float64, (4, 3), elements=finite), hnp.arrays(np.float64, (2, 3), elements=finite),
       st.floats(-5, 5))
def test_attention_linear_in_image(f, d, a):
    np.testing.assert_allclose(attention_map(a * f, d), a * attention_map(f, d), rtol=1e-9, atol=1e-9)


def test_attention_dimension_mismatch():
    with pytest.raises(ValueError):
        attention_map(np.ones((2, 3)), np.ones((1, 4)))


# image-feature selection and fusion

def test_select_image_hand_example():
    np.testing.assert_array_equal(select_image_features([[2], [9], [5]], 2), [[9], [5]])
    with pytest.raises(ValueError):
        select_image_features([[1]], 2)


@given(hnp.arrays(np.float64, (6, 3), elements=finite))
def test_select_image_full_k_is_column_sort(img):
    out = select_image_features(img, 6)
    for c in range(3):
        assert sorted(out[:, c].tolist()) == sorted(img[:, c].tolist())
        assert (np.diff(out[:, c]) <= 0).all()


def test_fuse_hand_example():
    tr = fuse_with_pool(np.array([1.0, 0.0]), [[1, 0], [0, 1]])
    np.testing.assert_array_equal(tr.relation, [[1, 0], [0, 0]])
    np.testing.assert_array_equal(tr.row_max, [1, 0])
    e = math.e
    np.testing.assert_allclose(tr.weights, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    np.testing.assert_allclose(tr.fused, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    assert round(tr.weights[0], 4) == 0.7311


def test_fuse_single_and_identical_rows():
    v = np.array([0.2, -0.4, 0.9])
    tr = fuse_with_pool(np.ones(3), v[None])
    np.testing.assert_array_equal(tr.weights, [1.0])
    np.testing.assert_array_equal(tr.fused, v)
    tr = fuse_with_pool(np.ones(3), np.stack([v] * 4))
    np.testing.assert_allclose(tr.weights, [0.25] * 4)
    np.testing.assert_allclose(tr.fused, v)


def test_fuse_one_hot_limit():
    rng = np.random.default_rng(3)
    img = rng.normal(size=(6, 3))
    desc = np.array([[50.0, 0, 0], [0.0, 0, 0], [0.0, 0, 0]])
    tr = fuse_with_pool(np.array([1.0, 0, 0]), desc)
    assert tr.weights[0] >= 1 - 1e-15
    np.testing.assert_allclose(ensemble_attention(img, tr.fused), attention_map(img, desc)[0], rtol=1e-9)
    np.testing.assert_array_equal(ensemble_attention(img, np.zeros(3)), np.zeros(6))


@given(hnp.arrays(np.float64, (5, 4), elements=finite), hnp.arrays(np.float64, (3, 4), elements=finite),
       st.integers(1, 5))
def test_fuse_invariants(img, desc, k):
    tr = fuse_descriptors(img, desc, k)
    assert (tr.weights >= 0).all() and abs(tr.weights.sum() - 1) < 1e-6
    np.testing.assert_allclose(tr.fused, tr.weights @ desc, atol=1e-6)


@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-3, 3)), st.floats(-5, 5), st.floats(0.1, 10))
def test_weight_shift_and_scale(r_prime, shift, s):
    from llmseg.ensemble import softmax

    w = softmax(r_prime.max(axis=1))
    np.testing.assert_allclose(softmax(r_prime.max(axis=1) + shift), w, rtol=1e-9, atol=1e-12)
    assert np.argmax(softmax(s * r_prime.max(axis=1))) == np.argmax(w)


def test_pool_shift_on_one_hot_descriptors_keeps_weights():
    # one-hot rows with a positive pool give R'[i] = i_pool[i], so a constant added to the pool shifts every R'[i]
    desc = np.eye(3)
    pool = np.array([1.3, 0.8, 1.7])
    np.testing.assert_allclose(fuse_with_pool(pool + 5.0, desc).weights, fuse_with_pool(pool, desc).weights)


@settings(max_examples=40)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 12), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_fusion_map_matches_straightline(n, m_t, m_i, d, seed):
    rng = np.random.default_rng(seed)
    img, tok = rng.normal(size=(m_i, d)), rng.normal(size=(n, m_t, d))
    k = min(5, m_i)
    ours = subclass_map(img, select_text_features(tok), "paper", k)
    assert rel_err(ours, fusion_map_straightline(img.tolist(), tok.tolist(), k)) <= 1e-6


# superclass mixing and templates

def test_mix_examples():
    a, b = np.array([0.2, 0.9]), np.array([0.8, 0.1])
    assert mix_superclass(a, b, 1.0).tobytes() == a.tobytes()
    assert mix_superclass(a, b, 0.0).tobytes() == b.tobytes()
    np.testing.assert_allclose(mix_superclass([0.2], [0.8], 0.2), [0.68])
    with pytest.raises(ValueError):
        mix_superclass(a, b, 1.5)


@given(hnp.arrays(np.float64, 5, elements=st.floats(0, 1)), hnp.arrays(np.float64, 5, elements=st.floats(0, 1)),
       st.floats(0, 1), st.floats(0, 1))
def test_mix_monotone_between_endpoints(a, b, l1, l2):
    lo, hi = sorted((l1, l2))
    m_lo, m_hi = mix_superclass(a, b, lo), mix_superclass(a, b, hi)
    up = a >= b
    assert (m_hi[up] >= m_lo[up] - 1e-12).all() and (m_hi[~up] <= m_lo[~up] + 1e-12).all()
    m = mix_superclass(a, b, l1)
    assert (m >= np.minimum(a, b) - 1e-12).all() and (m <= np.maximum(a, b) + 1e-12).all()


def test_average_templates():
    rng = np.random.default_rng(4)
    rows = rng.normal(size=(2, 5))
    unit = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    np.testing.assert_allclose(average_over_templates([_dm(unit)]).values, unit, atol=1e-12)
    with pytest.raises(DegenerateDescriptor):
        average_over_templates([_dm([[1.0, 0.0]]), _dm([[-1.0, 0.0]])])
    sets = [rng.normal(size=(2, 5)) for _ in range(3)]
    sets = [s / np.linalg.norm(s, axis=1, keepdims=True) for s in sets]
    ref = []
    for i in range(2):
        m = [sum(s[i, c] for s in sets) / 3 for c in range(5)]
        norm = math.sqrt(sum(x * x for x in m))
        ref.append([x / norm for x in m])
    out = average_over_templates([_dm(s) for s in sets])
    np.testing.assert_allclose(out.values, ref, atol=1e-6)
    assert out.normalized
    with pytest.raises(ValueError):
        average_over_templates([_dm(sets[0], ["a", "b"]), _dm(sets[1], ["b", "a"])])


# alternative ensembles

def test_alternatives_examples():
    maps = np.array([[0.0, 1.0], [1.0, 0.0]])
    img, desc = np.eye(2), np.eye(2)
    np.testing.assert_array_equal(alt_ensemble("average", img, desc, maps), [0.5, 0.5])
    np.testing.assert_array_equal(alt_ensemble("max_similarity", img, desc, maps), [1, 1])
    ca = alt_ensemble("cross_attention", img, desc, maps)
    np.testing.assert_allclose(ca, [0.5, 0.5])
    with pytest.raises(ValueError):
        alt_ensemble("median", img, desc, maps)


@pytest.mark.parametrize("method", ["paper", "average", "cross_attention", "max_similarity"])
def test_single_descriptor_all_methods_agree(method):
    rng = np.random.default_rng(5)
    img, desc = rng.normal(size=(7, 4)), rng.normal(size=(1, 4))
    np.testing.assert_allclose(subclass_map(img, desc, method), attention_map(img, desc)[0], rtol=1e-12)


def test_config_validation():
    EnsembleConfig()
    with pytest.raises(ValueError):
        EnsembleConfig(lambda_super=1.2)
    with pytest.raises(ValueError):
        EnsembleConfig(method="sum")
    with pytest.raises(ValueError):
        DescriptorMatrix(np.array([[np.nan]]), ["a"])
