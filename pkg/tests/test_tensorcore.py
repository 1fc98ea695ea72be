import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgelab import tensorcore as tc
from forgelab.tensorcore import AdamState, ParamStore, ParamTag, Tensor

from oracles import ce_scalar, graph_gradient_error, kl_scalar, softmax_rows

F64 = np.float64


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=F64), requires_grad=grad)


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    out = tc.matmul(T(np.eye(2)), T([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_row_times_column():
    assert tc.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tc.DimensionError, match=r"\(1, 2\).*\(1, 2\)"):
        tc.matmul(T([[1, 2]]), T([[3, 4]]))


# ------------------------------------------------------------------ cross entropy

@pytest.mark.parametrize("V", [2, 6, 9, 16])
def test_cross_entropy_uniform_is_log_v(V):
    loss = tc.cross_entropy_logits(T(np.zeros((5, V))), np.arange(5) % V)
    assert abs(loss.item() - math.log(V)) < 1e-6


def test_cross_entropy_uniform_nine_value():
    loss = tc.cross_entropy_logits(T(np.full((3, 9), 0.4)), [0, 4, 8])
    assert abs(loss.item() - 2.1972246) < 1e-6


def test_cross_entropy_confident_correct():
    logits = np.zeros((1, 9))
    logits[0, 3] = 30.0
    assert tc.cross_entropy_logits(T(logits), [3]).item() < 1e-9


def test_cross_entropy_two_class_scalar_oracle():
    got = tc.cross_entropy_logits(T([[1.0, 0.0]]), [0]).item()
    assert abs(got - ce_scalar([[1.0, 0.0]], [0])) < 1e-12
    assert abs(got - 0.3132617) < 1e-7


def test_cross_entropy_ignore_and_errors():
    logits = T(np.random.default_rng(0).standard_normal((4, 5)))
    got = tc.cross_entropy_logits(logits, [1, 8, 2, 8], ignore_id=8).item()
    assert abs(got - ce_scalar(logits.data[[0, 2]], [1, 2])) < 1e-12
    with pytest.raises(ValueError, match="empty loss support"):
        tc.cross_entropy_logits(logits, [8, 8, 8, 8], ignore_id=8)
    with pytest.raises(IndexError):
        tc.cross_entropy_logits(logits, [0, 1, 2, 5])


# ------------------------------------------------------------------ KL

def test_kl_self_is_zero():
    x = T(np.random.default_rng(1).standard_normal((3, 4)))
    assert abs(tc.kl_divergence(x, x).item()) < 1e-9


def test_kl_two_category_hand_value():
    got = tc.kl_divergence(T([[0.0, 0.0]]), T([[math.log(3), 0.0]])).item()
    expected = 0.5 * math.log(2 / 3) + 0.5 * math.log(2)
    assert abs(got - expected) < 1e-12
    assert abs(got - 0.1438410) < 1e-7
    assert abs(got - kl_scalar([[0.0, 0.0]], [[math.log(3), 0.0]])) < 1e-12


def test_kl_shift_invariance():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 6))
    shifted = x + rng.standard_normal((4, 1)) * 5
    assert abs(tc.kl_divergence(T(x), T(shifted)).item()) < 1e-9


def test_kl_shape_mismatch():
    with pytest.raises(tc.DimensionError):
        tc.kl_divergence(T(np.zeros((2, 3))), T(np.zeros((2, 4))))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.standard_normal((2, 3, 7)) * rng.uniform(0.1, 6)
    assert tc.kl_divergence(T(p), T(q)).item() >= -1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).standard_normal((4, 9)).astype(np.float32) * 20
    out = tc.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out, softmax_rows(x.astype(F64)), atol=1e-6)


# ------------------------------------------------------------------ backward

def test_backward_product_rule():
    x, y = T(2.0, True), T(3.0, True)
    tc.backward(tc.mul(x, y))
    assert x.grad == 3.0 and y.grad == 2.0


def test_backward_without_trainable_leaves_is_noop():
    x = T([1.0, 2.0])
    loss = tc.tsum(tc.mul(x, x))
    tc.backward(loss)
    assert x.grad is None


def test_backward_rejects_nonscalar_and_second_call():
    x = T([1.0, 2.0], True)
    with pytest.raises(tc.DimensionError):
        tc.backward(tc.mul(x, x))
    loss = tc.tsum(tc.mul(x, x))
    tc.backward(loss)
    with pytest.raises(tc.TapeError):
        tc.backward(loss)


def test_backward_retain_graph_allows_second_pass():
    x = T([1.0, -2.0], True)
    loss = tc.tsum(tc.mul(x, x))
    tc.backward(loss, retain_graph=True)
    first = x.grad.copy()
    x.grad = None
    tc.backward(loss)
    np.testing.assert_array_equal(first, x.grad)


def test_tape_order_is_topological():
    x = T([1.0, 2.0], True)
    h = tc.tanh(x)
    loss = tc.tsum(tc.mul(h, h))
    tape = tc.Tape.from_loss(loss)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)


def test_nonfinite_is_an_error():
    with pytest.raises(tc.NonFiniteError):
        tc.log(T([0.0, 1.0]))


def test_two_layer_net_matches_finite_difference():
    assert graph_gradient_error(12345) < 1e-5


@pytest.mark.parametrize("seed", range(0, 40))
def test_random_graphs_finite_difference(seed):
    assert graph_gradient_error(1000 + seed) < 1e-5


def test_structural_ops_gradients():
    """take, concat, embedding, transpose, reshape and broadcasting add against central differences."""
    rng = np.random.default_rng(3)
    a, b, table = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 2, 4)), rng.standard_normal((5, 4))
    bias = rng.standard_normal(4)
    ids = np.array([[0, 3, 3], [4, 1, 0]])
    w = rng.standard_normal((2, 4, 5))

    def build(ta, tb, tt, tbias):
        x = tc.concat([ta, tb, tc.embedding(tt, ids)], axis=1) + tbias
        x = x.transpose(0, 2, 1).reshape(2, 4, 8)[:, 1:, ::2]
        return tc.tsum(tc.mul(tc.tanh(x), tc.tanh(x))) + tc.mean(x)

    leaves = [T(v.copy(), True) for v in (a, b, table, bias)]
    tc.backward(build(*leaves))
    from oracles import central_difference, rel_err

    arrays = [a, b, table, bias]
    numeric = central_difference(lambda: float(build(*[T(v) for v in arrays]).data), arrays)
    for leaf, num in zip(leaves, numeric):
        assert rel_err(leaf.grad, num) < 1e-5
    del w


# ------------------------------------------------------------------ params / adam

def _store(seed=0):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    s.add("b.w", rng.standard_normal((3,)), ParamTag("L", 0, "b"))
    s.add("a.w", rng.standard_normal((2, 1)), ParamTag("V", 0, "a"))
    s.add("c.w", rng.standard_normal((2, 2)), ParamTag("P", 0, "c"))
    return s


def test_paramstore_lexicographic_and_partition():
    s = _store()
    assert s.paths() == ["a.w", "b.w", "c.w"]
    parts = [s.paths(c) for c in "VPL"]
    assert sum(len(p) for p in parts) == len(s)
    assert set().union(*map(set, parts)) == set(s.paths())
    with pytest.raises(KeyError):
        s.add("a.w", np.zeros(1), ParamTag("V", 0))


def test_adam_zero_grad_leaves_param():
    s = _store()
    before = s["a.w"].data.copy()
    s["a.w"].grad = np.zeros_like(before)
    tc.adam_step(s, AdamState(), 0.1, ["a.w"])
    np.testing.assert_array_equal(before, s["a.w"].data)


def test_adam_first_step_is_signed_lr():
    s = _store()
    before = s["b.w"].data.copy()
    g = np.array([0.3, -2.0, 1e-3])
    s["b.w"].grad = g
    st_ = AdamState()
    tc.adam_step(s, st_, 0.01, ["b.w"])
    np.testing.assert_allclose(s["b.w"].data - before, -0.01 * np.sign(g), rtol=1e-4)
    assert st_.t == 1


def test_adam_freezes_inactive_paths():
    s = _store()
    before = s["c.w"].data.copy()
    for p in s.paths():
        s[p].grad = np.ones_like(s[p].data)
    tc.adam_step(s, AdamState(), 0.5, ["a.w"])
    assert s["c.w"].data.tobytes() == before.tobytes()


def test_adam_missing_grad_names_path():
    s = _store()
    with pytest.raises(ValueError, match="a.w"):
        tc.adam_step(s, AdamState(), 0.1, ["a.w"])


def test_adam_bit_deterministic():
    results = []
    for _ in range(2):
        s, st_ = _store(7), AdamState()
        rng = np.random.default_rng(9)
        for _ in range(5):
            for p in s.paths():
                s[p].grad = rng.standard_normal(s[p].shape)
            tc.adam_step(s, st_, 1e-2, s.paths())
        results.append(b"".join(s[p].data.tobytes() for p in s.paths()))
    assert results[0] == results[1]


# ------------------------------------------------------------------ flatten / scatter

def test_flatten_scatter_roundtrip():
    s = _store(4)
    rng = np.random.default_rng(5)
    for p in s.paths():
        s[p].grad = rng.standard_normal(s[p].shape)
    paths = ["c.w", "a.w", "b.w"]
    flat = tc.flatten_grads(s, paths)
    assert flat.shape == (4 + 2 + 3,)
    back = tc.scatter_flat(flat, s, paths)
    for p in paths:
        assert back[p].tobytes() == s[p].grad.tobytes()


def test_flatten_size_additivity_and_scatter_error():
    s = ParamStore()
    s.add("x", np.zeros(3), ParamTag("V", 0))
    s.add("y", np.zeros(2), ParamTag("V", 0))
    for p in s.paths():
        s[p].grad = np.ones(s[p].shape)
    assert tc.flatten_grads(s, ["x", "y"]).shape == (5,)
    with pytest.raises(tc.DimensionError):
        tc.scatter_flat(np.zeros(4), s, ["x", "y"])
