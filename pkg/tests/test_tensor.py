import numpy as np
import pytest

import patchlm.tensor as T
from patchlm.tensor import Tape, Tensor, backward

from oracles import (cross_entropy_ref, matmul_ref, rmsnorm_ref, rope_ref,
                     shared_head_loss_ref, softmax_ref, swiglu_ref)


def t64(data, grad=False):
    return Tensor(np.asarray(data, np.float64), requires_grad=grad)


# --- matmul ---------------------------------------------------------------


def test_matmul_identity():
    b = np.arange(6, dtype=np.float64).reshape(3, 2)
    out = T.matmul(t64(np.eye(3)), t64(b))
    assert np.array_equal(out.data, b)


def test_matmul_1x1():
    out = T.matmul(t64([[2.0]]), t64([[3.0]]))
    assert out.data[0, 0] == 6.0


def test_matmul_against_triple_loop(rng):
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    out = T.matmul(t64(a), t64(b))
    assert np.allclose(out.data, matmul_ref(a, b), atol=1e-6)


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))
    with pytest.raises(ValueError):
        T.matmul(t64(np.ones((2, 2, 3))), t64(np.ones((3, 3, 2))))


def test_matmul_batched_matches_slicewise(rng):
    a = rng.standard_normal((2, 3, 4, 5))
    b = rng.standard_normal((2, 3, 5, 6))
    out = T.matmul(t64(a), t64(b))
    for i in range(2):
        for j in range(3):
            assert np.allclose(out.data[i, j], matmul_ref(a[i, j], b[i, j]), atol=1e-6)


# --- cross entropy ---------------------------------------------------------


def test_cross_entropy_uniform_logits():
    logits = t64(np.zeros((5, 32)))
    loss = T.cross_entropy(logits, np.arange(5) % 32)
    assert loss.item() == pytest.approx(np.log(32), abs=1e-9)


def test_cross_entropy_near_one_hot():
    logits = np.zeros((1, 8))
    logits[0, 3] = 1e4
    loss = T.cross_entropy(t64(logits), np.array([3]))
    assert loss.item() < 1e-6


def test_cross_entropy_random_case(rng):
    logits = rng.standard_normal((3, 5))
    targets = rng.integers(0, 5, 3)
    loss = T.cross_entropy(t64(logits), targets)
    assert loss.item() == pytest.approx(cross_entropy_ref(logits, targets), abs=1e-6)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(t64(np.zeros((2, 4))), np.array([0, 4]))


def test_cross_entropy_nonnegative(rng):
    for seed in range(5):
        r = np.random.default_rng(seed)
        logits = r.standard_normal((6, 9)) * 5
        loss = T.cross_entropy(t64(logits), r.integers(0, 9, 6))
        assert loss.item() >= 0.0


def test_cross_entropy_multi_matches_reference(rng):
    logits = rng.standard_normal((4, 7))
    targets = rng.integers(0, 7, (4, 3))
    loss = T.cross_entropy_multi(t64(logits), targets)
    assert loss.item() == pytest.approx(shared_head_loss_ref(logits, targets), abs=1e-6)


# --- rmsnorm ----------------------------------------------------------------


def test_rmsnorm_constant_vector():
    x = t64(np.full((1, 6), 5.0))
    out = T.rmsnorm(x, t64(np.ones(6)), eps=1e-12)
    assert np.allclose(out.data, 1.0, atol=1e-9)


def test_rmsnorm_zero_vector():
    out = T.rmsnorm(t64(np.zeros((2, 4))), t64(np.ones(4)), eps=1e-5)
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_rmsnorm_random_case(rng):
    x = rng.standard_normal((3, 8))
    w = rng.standard_normal(8)
    out = T.rmsnorm(t64(x), t64(w), eps=1e-5)
    assert np.allclose(out.data, rmsnorm_ref(x, w, 1e-5), atol=1e-6)


def test_rmsnorm_eps_validation():
    with pytest.raises(ValueError):
        T.rmsnorm(t64(np.ones((1, 2))), t64(np.ones(2)), eps=0.0)


# --- swiglu ------------------------------------------------------------------


def test_swiglu_zero_input():
    w = t64(np.ones((1, 1)))
    out = T.swiglu_ffn(t64(np.zeros((2, 1))), w, w, w)
    assert np.array_equal(out.data, np.zeros((2, 1)))


def test_swiglu_scalar_case():
    w = t64(np.ones((1, 1)))
    out = T.swiglu_ffn(t64([[10.0]]), w, w, w)
    # silu(10) * 10 = 100 * sigmoid(10)
    expected = 100.0 / (1.0 + np.exp(-10.0))
    assert out.item() == pytest.approx(expected, abs=1e-9)
    assert out.item() == pytest.approx(99.9954602, abs=1e-4)


def test_swiglu_random_case(rng):
    x = rng.standard_normal((4, 6))
    w1 = rng.standard_normal((6, 10))
    w3 = rng.standard_normal((6, 10))
    w2 = rng.standard_normal((10, 6))
    out = T.swiglu_ffn(t64(x), t64(w1), t64(w3), t64(w2))
    assert np.allclose(out.data, swiglu_ref(x, w1, w3, w2), atol=1e-6)


# --- softmax ------------------------------------------------------------------


def test_softmax_rows_sum_to_one(rng):
    x = rng.standard_normal((5, 9)) * 10
    p = T.softmax(t64(x))
    assert np.allclose(p.data.sum(-1), 1.0, atol=1e-6)


def test_softmax_masked_entries_are_exact_zero():
    mask = np.array([[0.0, -np.inf], [0.0, 0.0]])
    p = T.softmax(t64(np.ones((2, 2))), mask=mask)
    assert p.data[0, 1] == 0.0
    assert p.data[0, 0] == 1.0


# --- rope ----------------------------------------------------------------------


def test_rope_position_zero_is_identity(rng):
    x = rng.standard_normal((4, 2, 8))
    out = T.rope_apply(t64(x), np.zeros(4, dtype=int))
    assert np.array_equal(out.data, x)


def test_rope_single_rotation():
    x = np.zeros((1, 1, 2))
    x[0, 0] = [1.0, 0.0]
    out = T.rope_apply(t64(x), np.array([1]), base=10000.0)
    assert out.data[0, 0, 0] == pytest.approx(np.cos(1.0), abs=1e-12)
    assert out.data[0, 0, 1] == pytest.approx(np.sin(1.0), abs=1e-12)


def test_rope_matches_loop_reference(rng):
    x = rng.standard_normal((5, 3, 8))
    pos = np.array([0, 2, 3, 7, 11])
    out = T.rope_apply(t64(x), pos)
    assert np.allclose(out.data, rope_ref(x, pos, 10000.0), atol=1e-9)


def test_rope_relative_position_property(rng):
    # dot(rope(q, p1), rope(k, p2)) depends only on p1 - p2
    q = rng.standard_normal((1, 1, 16))
    k = rng.standard_normal((1, 1, 16))
    def dot_at(p1, p2):
        rq = T.rope_apply(t64(q), np.array([p1]))
        rk = T.rope_apply(t64(k), np.array([p2]))
        return float(np.dot(rq.data.ravel(), rk.data.ravel()))
    for shift in (2, 5, 17):
        base_val = dot_at(shift, 0)
        for offset in (1, 4, 9):
            assert dot_at(shift + offset, offset) == pytest.approx(base_val, abs=1e-5)


def test_rope_preserves_norm(rng):
    x = rng.standard_normal((6, 2, 12))
    out = T.rope_apply(t64(x), np.arange(6) * 3)
    assert np.allclose(np.linalg.norm(out.data, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-6)


def test_rope_odd_head_dim_rejected():
    with pytest.raises(ValueError):
        T.rope_apply(t64(np.ones((1, 1, 3))), np.array([0]))


# --- causal attention -------------------------------------------------------


def test_causal_attention_matches_unfused(rng):
    b, h, s, dh = 2, 3, 17, 8  # odd s exercises the partial block
    q = rng.standard_normal((b, h, s, dh))
    k = rng.standard_normal((b, h, s, dh))
    v = rng.standard_normal((b, h, s, dh))
    fused = T.causal_attention(Tensor(q), Tensor(k), Tensor(v), block=8)
    mask = np.triu(np.full((s, s), -np.inf), k=1)
    scores = T.matmul(Tensor(q / np.sqrt(dh)), T.swapaxes(Tensor(k), 2, 3))
    probs = T.softmax(scores, mask=mask)
    ref = T.matmul(probs, Tensor(v))
    assert np.allclose(fused.data, ref.data, atol=1e-10)


def test_causal_attention_ignores_future(rng):
    b, h, s, dh = 1, 2, 9, 4
    q = rng.standard_normal((b, h, s, dh))
    k = rng.standard_normal((b, h, s, dh))
    v = rng.standard_normal((b, h, s, dh))
    out1 = T.causal_attention(Tensor(q), Tensor(k), Tensor(v), block=4)
    k2, v2 = k.copy(), v.copy()
    k2[:, :, 5:] += 100.0
    v2[:, :, 5:] -= 50.0
    out2 = T.causal_attention(Tensor(q), Tensor(k2), Tensor(v2), block=4)
    assert np.array_equal(out1.data[:, :, :5], out2.data[:, :, :5])


# --- backward / tape ----------------------------------------------------------


def test_backward_sum_of_squares():
    x = t64([1.0, 2.0, 3.0], grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
    backward(loss, tape)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(RuntimeError):
        backward(y, tape)


def test_tape_consumed_once():
    x = t64([1.0], grad=True)
    with Tape() as tape:
        loss = T.sum_all(T.mul(x, x))
    backward(loss, tape)
    with pytest.raises(RuntimeError):
        backward(loss, tape)


def test_gradients_accumulate_across_tapes():
    x = t64([1.0, -2.0], grad=True)
    with Tape() as t1:
        l1 = T.sum_all(T.mul(x, x))
    with Tape() as t2:
        l2 = T.sum_all(T.scale(x, 3.0))
    backward(l1, t1)
    g1 = np.array(x.grad)
    backward(l2, t2)
    assert np.allclose(x.grad, g1 + 3.0)


def test_no_recording_without_tape():
    x = t64([1.0, 2.0], grad=True)
    y = T.mul(x, x)
    assert not y.requires_grad


def test_backward_full_kernel_composition(rng):
    # finite differences through matmul + rmsnorm + swiglu + rope + softmax + CE
    from oracles import gradcheck

    d, dff, v = 6, 8, 7
    w = {
        "w": Tensor(rng.standard_normal((d, d)), requires_grad=True),
        "norm": Tensor(np.ones(d), requires_grad=True),
        "w1": Tensor(rng.standard_normal((d, dff)), requires_grad=True),
        "w3": Tensor(rng.standard_normal((d, dff)), requires_grad=True),
        "w2": Tensor(rng.standard_normal((dff, d)), requires_grad=True),
        "head": Tensor(rng.standard_normal((d, v)), requires_grad=True),
    }
    x = rng.standard_normal((5, d))
    targets = rng.integers(0, v, 5)

    def loss_fn():
        with Tape() as tape:
            h = T.rmsnorm(T.matmul(Tensor(x), w["w"]), w["norm"], 1e-5)
            h = T.add(h, T.swiglu_ffn(h, w["w1"], w["w3"], w["w2"]))
            loss = T.cross_entropy(T.matmul(h, w["head"]), targets)
        return loss, tape

    failures = gradcheck(loss_fn, list(w.items()))
    assert failures == []


def test_backward_through_causal_attention(rng):
    from oracles import gradcheck

    b, h, s, dh = 1, 2, 6, 4
    q = Tensor(rng.standard_normal((b, h, s, dh)), requires_grad=True)
    k = Tensor(rng.standard_normal((b, h, s, dh)), requires_grad=True)
    v = Tensor(rng.standard_normal((b, h, s, dh)), requires_grad=True)
    coef = rng.standard_normal((b, h, s, dh))

    def loss_fn():
        with Tape() as tape:
            out = T.causal_attention(q, k, v, block=4)
            loss = T.sum_all(T.mul(out, Tensor(coef)))
        return loss, tape

    failures = gradcheck(loss_fn, [("q", q), ("k", k), ("v", v)])
    assert failures == []


def test_embedding_gather_and_scatter(rng):
    table = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    tokens = np.array([[1, 1, 4]])
    with Tape() as tape:
        out = T.embedding(table, tokens)
        loss = T.sum_all(out)
    assert np.array_equal(out.data[0, 0], table.data[1])
    assert np.array_equal(out.data[0, 0], out.data[0, 1])
    backward(loss, tape)
    expected = np.zeros((5, 3))
    expected[1] = 2.0  # token 1 used twice: contributions add
    expected[4] = 1.0
    assert np.array_equal(table.grad, expected)


def test_embedding_out_of_range():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        T.embedding(table, np.array([4]))


def test_nan_guard():
    T.set_nan_guard(True)
    try:
        with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
            T.scale(Tensor(np.array([1e308])), 1e308)
    finally:
        T.set_nan_guard(False)


def test_finite_outputs_on_training_scale_values(rng):
    T.set_nan_guard(True)
    try:
        x = Tensor(rng.standard_normal((3, 4, 8)).astype(np.float32) * 3)
        w = Tensor(np.ones(8, np.float32))
        out = T.rmsnorm(x, w, 1e-5)
        p = T.softmax(out)
        assert np.all(np.isfinite(p.data))
    finally:
        T.set_nan_guard(False)


def test_determinism_same_inputs_same_bits(rng):
    x = rng.standard_normal((4, 6)).astype(np.float32)
    w = rng.standard_normal((6, 6)).astype(np.float32)
    a = T.matmul(Tensor(x), Tensor(w)).data
    b = T.matmul(Tensor(x), Tensor(w)).data
    assert np.array_equal(a, b)
