"""Scoring head: fusion, grouped bilinear equivalence, threshold loss."""

import numpy as np
import pytest

from docrelex import autodiff as ad
from docrelex.relation_head import (
    HeadParams,
    atl_loss,
    atl_loss_batch,
    fuse,
    predict,
    score,
)

RNG = np.random.default_rng(77)


def make_params(dim=8, n_rel=5, groups=2, seed=1):
    return HeadParams(dim, [f"R{i:02d}" for i in range(n_rel)], groups, seed=seed)


def set_weights(params, **arrays):
    for key, value in arrays.items():
        params.params[key] = ad.parameter(np.asarray(value, dtype=np.float64))


# ----------------------------------------------------------------------
# fusion
def test_fuse_zero_everything():
    p = make_params()
    zero = ad.constant(np.zeros(8))
    set_weights(p, **{k: np.zeros_like(v.data) for k, v in p.params.items()})
    h, t = fuse(zero, zero, zero, p)
    np.testing.assert_array_equal(h.data, np.zeros(8))
    np.testing.assert_array_equal(t.data, np.zeros(8))


def test_fuse_matches_tanh_oracle():
    p = make_params()
    eye = np.eye(8)
    set_weights(p, **{"head.wh": eye, "head.wt": eye, "head.wc1": eye, "head.wc2": eye})
    e_h = ad.constant(RNG.normal(size=8) * 0.1)
    e_t = ad.constant(RNG.normal(size=8) * 0.1)
    c = ad.constant(RNG.normal(size=8) * 0.1)
    h, t = fuse(e_h, c, e_t, p)
    np.testing.assert_allclose(h.data, np.tanh(e_h.data + c.data), rtol=1e-12)
    np.testing.assert_allclose(t.data, np.tanh(e_t.data + c.data), rtol=1e-12)


def test_fuse_output_strictly_inside_unit_interval():
    p = make_params()
    big = ad.constant(RNG.normal(size=8) * 100)
    h, t = fuse(big, big, big, p)
    assert np.all(np.abs(h.data) < 1.0)
    assert np.all(np.abs(t.data) < 1.0)


def test_fuse_batched_matches_per_row():
    p = make_params()
    eh = RNG.normal(size=(3, 8))
    c = RNG.normal(size=(3, 8))
    et = RNG.normal(size=(3, 8))
    hb, tb = fuse(ad.constant(eh), ad.constant(c), ad.constant(et), p)
    for i in range(3):
        hi, ti = fuse(ad.constant(eh[i]), ad.constant(c[i]), ad.constant(et[i]), p)
        np.testing.assert_allclose(hb.data[i], hi.data, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(tb.data[i], ti.data, rtol=1e-12, atol=1e-14)


# ----------------------------------------------------------------------
# grouped bilinear
def test_identity_blocks_reduce_to_dot_product():
    p = make_params(dim=8, n_rel=3, groups=2)
    identity_blocks = np.tile(np.eye(4).reshape(-1), (p.num_classes, 2))
    set_weights(p, **{"head.bilinear": identity_blocks})
    h = ad.constant(RNG.normal(size=8))
    t = ad.constant(RNG.normal(size=8))
    s = score(h, t, p)
    np.testing.assert_allclose(s.data, np.full(4, h.data @ t.data), rtol=1e-12)


def test_zero_vector_scores_zero():
    p = make_params()
    s = score(ad.constant(np.zeros(8)), ad.constant(RNG.normal(size=8)), p)
    np.testing.assert_array_equal(s.data, np.zeros(p.num_classes))


def test_grouped_bilinear_matches_block_diagonal_dense_oracle():
    d, k = 8, 2
    p = make_params(dim=d, n_rel=5, groups=k, seed=9)
    h = RNG.normal(size=d)
    t = RNG.normal(size=d)
    s = score(ad.constant(h), ad.constant(t), p)
    gd = d // k
    for c in range(p.num_classes):
        blocks = p.params["head.bilinear"].data[c].reshape(k, gd, gd)
        dense = np.zeros((d, d))
        for g in range(k):
            dense[g * gd:(g + 1) * gd, g * gd:(g + 1) * gd] = blocks[g]
        np.testing.assert_allclose(s.data[c], h @ dense @ t, rtol=1e-10, atol=1e-12)


def test_score_dimension_mismatch():
    p = make_params(dim=8)
    with pytest.raises(ValueError):
        score(ad.constant(np.zeros(6)), ad.constant(np.zeros(6)), p)


# ----------------------------------------------------------------------
# adaptive-threshold loss
def atl_oracle(values, positive_idx, th_index, n_rel):
    pos = list(positive_idx)
    neg = [i for i in range(n_rel) if i not in pos]
    loss = 0.0
    for r in pos:
        denom = sum(np.exp(values[i]) for i in pos + [th_index])
        loss -= np.log(np.exp(values[r]) / denom)
    denom = sum(np.exp(values[i]) for i in neg + [th_index])
    loss -= np.log(np.exp(values[th_index]) / denom)
    return loss


def test_single_relation_all_zero_scores():
    p = make_params(n_rel=1, dim=8, groups=2)
    loss = atl_loss(ad.constant(np.zeros(2)), {"R00"}, p)
    np.testing.assert_allclose(loss.item(), np.log(2.0), rtol=1e-12)


def test_empty_positives_uniform_scores():
    p = make_params(n_rel=96, dim=8, groups=2)
    loss = atl_loss(ad.constant(np.zeros(97)), frozenset(), p)
    np.testing.assert_allclose(loss.item(), np.log(97.0), rtol=1e-12)


def test_atl_matches_formula_oracle():
    p = make_params(n_rel=5)
    rng = np.random.default_rng(3)
    for _ in range(100):
        values = rng.normal(size=6) * 3
        pos = sorted(rng.choice(5, size=2, replace=False))
        loss = atl_loss(ad.constant(values), {f"R{i:02d}" for i in pos}, p)
        expected = atl_oracle(values, pos, 5, 5)
        np.testing.assert_allclose(loss.item(), expected, rtol=1e-10, atol=1e-10)


def test_atl_shift_invariance():
    p = make_params(n_rel=7, dim=8, groups=2)
    values = RNG.normal(size=8)
    positives = {"R01", "R04"}
    a = atl_loss(ad.constant(values), positives, p).item()
    b = atl_loss(ad.constant(values + 123.456), positives, p).item()
    np.testing.assert_allclose(a, b, rtol=1e-10)
    assert predict(values, p) == predict(values + 123.456, p)


def test_atl_nonnegative_and_approaches_zero():
    p = make_params(n_rel=3, dim=8, groups=2)
    rng = np.random.default_rng(8)
    for _ in range(50):
        values = rng.normal(size=4) * 5
        pos = {f"R{i:02d}" for i in rng.choice(3, rng.integers(0, 3), replace=False)}
        assert atl_loss(ad.constant(values), pos, p).item() >= 0.0
    # positives far above TH, TH far above negatives
    strong = np.array([50.0, -50.0, -50.0, 0.0])
    assert atl_loss(ad.constant(strong), {"R00"}, p).item() < 1e-12


def test_atl_gradient_matches_finite_differences():
    p = make_params(n_rel=5)
    values = ad.parameter(RNG.normal(size=6))
    positives = {"R00", "R03"}

    def loss():
        return atl_loss(values, positives, p)

    out = loss()
    values.zero_grad()
    out.backward()
    numeric = ad.numeric_gradient(loss, values, step=1e-5)
    np.testing.assert_allclose(values.grad, numeric, rtol=1e-4, atol=1e-10)


def test_atl_batch_equals_sum_of_singles():
    p = make_params(n_rel=4, dim=8, groups=2)
    rows = RNG.normal(size=(3, 5))
    sets = [frozenset({"R00"}), frozenset(), frozenset({"R01", "R03"})]
    total, n = atl_loss_batch(ad.constant(rows), sets, p)
    assert n == 3
    singles = sum(atl_loss(ad.constant(rows[i]), sets[i], p).item() for i in range(3))
    np.testing.assert_allclose(total.item(), singles, rtol=1e-12)


# ----------------------------------------------------------------------
# decoding
def test_predict_threshold_dominant_gives_empty():
    p = make_params(n_rel=3, dim=8, groups=2)
    assert predict(np.array([0.1, 0.2, 0.3, 5.0]), p) == set()


def test_predict_threshold_minimal_gives_all():
    p = make_params(n_rel=3, dim=8, groups=2)
    assert predict(np.array([0.1, 0.2, 0.3, -5.0]), p) == {"R00", "R01", "R02"}


def test_predict_by_definition_and_tie_excluded():
    p = HeadParams(8, ["r1", "r2"], 2)
    assert predict(np.array([2.0, 0.5, 1.0]), p) == {"r1"}
    assert predict(np.array([1.0, 0.5, 1.0]), p) == set()


def test_predict_permutation_equivariant():
    rng = np.random.default_rng(4)
    names = ["a", "b", "c", "d"]
    values = rng.normal(size=5)
    base = predict(values, HeadParams(8, names, 2))
    perm = [2, 0, 3, 1]
    permuted_names = [names[i] for i in perm]
    permuted_values = np.concatenate([values[perm], values[-1:]])
    permuted = predict(permuted_values, HeadParams(8, permuted_names, 2))
    assert permuted == base
