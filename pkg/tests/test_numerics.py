import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cife.numerics import ShapeError, Tape, Tensor, grad_check, ops, set_debug


def naive_conv(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, c, y * stride + u, z * stride + v] * w[o, c, u, v]
                    out[i, o, y, z] = acc + (b[o] if b is not None else 0.0)
    return out


def naive_attention(q, k, v):
    out = np.zeros_like(q)
    for b in range(q.shape[0]):
        for i in range(q.shape[1]):
            s = np.array([q[b, i] @ k[b, j] for j in range(k.shape[1])]) / np.sqrt(q.shape[2])
            w = np.exp(s - s.max())
            w /= w.sum()
            out[b, i] = sum(w[j] * v[b, j] for j in range(k.shape[1]))
    return out


# -- conv2d --------------------------------------------------------------------

def test_conv_sum_of_ones():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 2, 2))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 10.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 5)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv_matches_naive_loops(stride, pad):
    g = np.random.default_rng(1)
    x = g.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = g.standard_normal((4, 3, 3, 3)).astype(np.float32)
    b = g.standard_normal(4).astype(np.float32)
    if (8 + 2 * pad - 3) % stride:
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        return
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, pad), atol=1e-5)


def test_conv_unbiased_random_to_1e6():
    g = np.random.default_rng(2)
    x = g.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = g.standard_normal((4, 3, 3, 3)).astype(np.float32) * 0.1
    out = ops.conv2d(Tensor(x), Tensor(w))
    assert np.max(np.abs(out.data - naive_conv(x, w, None, 1, 0))) <= 1e-6


def test_conv_rejections():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ShapeError, match="channels"):
        ops.conv2d(x, Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ShapeError, match="not exact"):
        ops.conv2d(x, Tensor(np.zeros((2, 3, 2, 2))), stride=3)
    with pytest.raises(ShapeError, match="larger"):
        ops.conv2d(x, Tensor(np.zeros((2, 3, 5, 5))))


# -- attention -----------------------------------------------------------------

def test_attention_single_key_returns_value():
    g = np.random.default_rng(3)
    q = Tensor(g.standard_normal((1, 5, 4)))
    k = Tensor(g.standard_normal((1, 1, 4)))
    v = Tensor(g.standard_normal((1, 1, 4)))
    out = ops.scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(out.data, np.repeat(v.data, 5, axis=1), atol=1e-12)


def test_attention_orthogonal_query_averages_values():
    k = np.array([[[0, 1.0, 0, 0], [0, 0, 1.0, 0], [0, 0, 0, 1.0]]])
    q = np.array([[[3.0, 0, 0, 0]]])
    v = np.random.default_rng(4).standard_normal((1, 3, 4))
    out = ops.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
    np.testing.assert_allclose(out.data[0, 0], v[0].mean(axis=0), atol=1e-12)


def test_attention_matches_reference():
    g = np.random.default_rng(5)
    q = g.standard_normal((1, 2, 4)).astype(np.float32)
    k = g.standard_normal((1, 3, 4)).astype(np.float32)
    v = g.standard_normal((1, 3, 4)).astype(np.float32)
    out = ops.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
    assert np.max(np.abs(out.data - naive_attention(q.astype(np.float64), k, v))) <= 1e-6


def test_attention_rejects_empty_keys():
    with pytest.raises(ShapeError):
        ops.scaled_dot_attention(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 0, 4))), Tensor(np.zeros((1, 0, 4))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 8), st.floats(0.1, 30.0), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(rows, batch, width, scale, seed):
    x = np.random.default_rng(seed).standard_normal((batch, rows, width)) * scale
    out = ops.softmax(Tensor(x.astype(np.float32)), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


# -- group norm ----------------------------------------------------------------

def test_group_norm_constant_input_is_zero():
    x = Tensor(np.full((2, 4, 3, 3), 7.5))
    out = ops.group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_group_norm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(6).standard_normal((2, 4, 3, 3)))
    beta = np.array([1.0, -2.0, 0.5, 3.0])
    out = ops.group_norm(x, 2, Tensor(np.zeros(4)), Tensor(beta))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))


def test_group_norm_statistics():
    x = np.random.default_rng(7).standard_normal((2, 4, 2, 2)) * 3 + 1
    out = ops.group_norm(Tensor(x), 2, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    grouped = out.reshape(2, 2, -1)
    assert np.max(np.abs(grouped.mean(-1))) <= 1e-6
    assert np.max(np.abs(grouped.var(-1) - 1.0)) <= 1e-4


def test_group_norm_indivisible():
    with pytest.raises(ShapeError):
        ops.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


# -- linear --------------------------------------------------------------------

def test_linear_identity_and_bias():
    x = np.random.default_rng(8).standard_normal((3, 5))
    out = ops.linear(Tensor(x), Tensor(np.eye(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(out.data, x)
    b = np.arange(2.0)
    out = ops.linear(Tensor(np.zeros((3, 5))), Tensor(np.ones((2, 5))), Tensor(b))
    np.testing.assert_array_equal(out.data, np.broadcast_to(b, (3, 2)))


def test_linear_matches_dot_loops():
    g = np.random.default_rng(9)
    x = g.standard_normal((3, 5)).astype(np.float32)
    w = g.standard_normal((2, 5)).astype(np.float32)
    b = g.standard_normal(2).astype(np.float32)
    ref = np.array([[sum(float(x[i, k]) * float(w[j, k]) for k in range(5)) + b[j] for j in range(2)]
                    for i in range(3)])
    out = ops.linear(Tensor(x), Tensor(w), Tensor(b))
    assert np.max(np.abs(out.data - ref)) <= 1e-6


def test_linear_dimension_mismatch():
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 5))), Tensor(np.zeros(2)))


# -- grad_check ----------------------------------------------------------------

def test_grad_check_sum_is_exact():
    p = Tensor(np.random.default_rng(10).standard_normal((3, 4)))
    rep = grad_check(lambda ps: ops.sum(ps[0]), [p])
    assert rep.max_rel_error <= 1e-8
    np.testing.assert_allclose(p.grad, 1.0)


def test_grad_check_constant_function():
    p = Tensor(np.ones(3))
    rep = grad_check(lambda ps: Tensor(np.array(2.0)), [p])
    assert rep.max_abs_error == 0.0
    np.testing.assert_array_equal(p.grad, 0.0)


def test_grad_check_conv_linear_net():
    g = np.random.default_rng(11)
    x = Tensor(g.standard_normal((2, 2, 6, 6)))
    target = g.standard_normal((2, 3))
    k = Tensor(g.standard_normal((3, 2, 3, 3)) * 0.3)
    w = Tensor(g.standard_normal((3, 3 * 4 * 4)) * 0.2)
    b = Tensor(g.standard_normal(3) * 0.1)

    def f(ps):
        h = ops.silu(ops.conv2d(x, ps[0]))
        return ops.mse(ops.linear(ops.reshape(h, (2, -1)), ps[1], ps[2]), target)

    rep = grad_check(f, [k, w, b], h=1e-5)
    assert rep.max_rel_error <= 1e-4, rep


def test_grad_check_rejects_f32_and_nonfinite():
    with pytest.raises(TypeError):
        grad_check(lambda ps: ops.sum(ps[0]), [Tensor(np.ones(2, dtype=np.float32))])
    with pytest.raises(FloatingPointError):
        grad_check(lambda ps: ops.mul(ops.sum(ps[0]), np.inf), [Tensor(np.ones(2))])


# -- per-op randomized gradient checks ----------------------------------------

def _weighted(out, seed):
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return ops.sum(ops.mul(out, Tensor(r)))


OP_CASES = {
    "add_bias": (lambda a, b: ops.add(a, b), lambda s: [s, s[-1:]]),
    "sub": (lambda a, b: ops.sub(a, b), lambda s: [s, s]),
    "mul": (lambda a, b: ops.mul(a, b), lambda s: [s, s]),
    "exp": (lambda a: ops.exp(a), lambda s: [s]),
    "silu": (lambda a: ops.silu(a), lambda s: [s]),
    "sigmoid": (lambda a: ops.sigmoid(a), lambda s: [s]),
    "tanh": (lambda a: ops.tanh(a), lambda s: [s]),
    "square": (lambda a: ops.square(a), lambda s: [s]),
    "softmax": (lambda a: ops.softmax(a, -1), lambda s: [s]),
    "mean_axis": (lambda a: ops.mean(a, axis=-1), lambda s: [s]),
    "transpose": (lambda a: ops.transpose(a, tuple(reversed(range(len(a.shape))))), lambda s: [s]),
    "slice": (lambda a: a[..., :1], lambda s: [s]),
    "concat": (lambda a, b: ops.concat([a, b], axis=0), lambda s: [s, s]),
    "layer_norm": (lambda a, g, b: ops.layer_norm(a, g, b), lambda s: [s, s[-1:], s[-1:]]),
}
SHAPES = [(2, 3), (3, 4, 5), (1, 2, 6)]


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("shape", SHAPES)
def test_elementwise_op_gradients(name, shape):
    fn, shapes = OP_CASES[name]
    g = np.random.default_rng(zlib.crc32(f"{name}{shape}".encode()))
    params = [Tensor(g.standard_normal(s)) for s in shapes(shape)]
    rep = grad_check(lambda ps: _weighted(fn(*ps), 1), params)
    assert rep.max_rel_error <= 1e-4, (name, shape, rep)


@pytest.mark.parametrize("shape", [((1, 2, 5, 5), (3, 2, 3, 3), 1, 1), ((2, 3, 4, 4), (2, 3, 3, 3), 1, 0),
                                   ((1, 2, 6, 6), (2, 2, 4, 4), 2, 1)])
def test_conv_gradients(shape):
    xs, ks, stride, pad = shape
    g = np.random.default_rng(12)
    params = [Tensor(g.standard_normal(xs)), Tensor(g.standard_normal(ks)), Tensor(g.standard_normal(ks[0]))]
    rep = grad_check(lambda ps: _weighted(ops.conv2d(ps[0], ps[1], ps[2], stride, pad), 2), params)
    assert rep.max_rel_error <= 1e-4, rep


@pytest.mark.parametrize("lq,lk,d", [(2, 3, 4), (4, 1, 2), (3, 5, 8)])
def test_attention_gradients(lq, lk, d):
    g = np.random.default_rng(13)
    params = [Tensor(g.standard_normal((2, lq, d))), Tensor(g.standard_normal((2, lk, d))),
              Tensor(g.standard_normal((2, lk, d)))]
    rep = grad_check(lambda ps: _weighted(ops.scaled_dot_attention(*ps), 3), params)
    assert rep.max_rel_error <= 1e-4, rep


@pytest.mark.parametrize("shape,groups", [((2, 4, 2, 2), 2), ((1, 6, 3, 3), 3), ((2, 8, 2, 3), 8)])
def test_group_norm_gradients(shape, groups):
    g = np.random.default_rng(14)
    c = shape[1]
    params = [Tensor(g.standard_normal(shape)), Tensor(g.standard_normal(c)), Tensor(g.standard_normal(c))]
    rep = grad_check(lambda ps: _weighted(ops.group_norm(ps[0], groups, ps[1], ps[2]), 4), params)
    assert rep.max_rel_error <= 1e-4, rep


@pytest.mark.parametrize("xs,dout", [((3, 5), 2), ((2, 3, 4), 6), ((1, 7), 1)])
def test_linear_and_matmul_gradients(xs, dout):
    g = np.random.default_rng(15)
    params = [Tensor(g.standard_normal(xs)), Tensor(g.standard_normal((dout, xs[-1]))), Tensor(g.standard_normal(dout))]
    rep = grad_check(lambda ps: _weighted(ops.linear(*ps), 5), params)
    assert rep.max_rel_error <= 1e-4, rep
    a = Tensor(g.standard_normal((2,) + xs[-2:] if len(xs) > 1 else (2, 1, xs[0])))
    b = Tensor(g.standard_normal((2, a.shape[-1], 3)))
    rep = grad_check(lambda ps: _weighted(ops.matmul(*ps), 6), [a, b])
    assert rep.max_rel_error <= 1e-4, rep


@pytest.mark.parametrize("shape", [(1, 2, 4, 4), (2, 1, 2, 6), (1, 3, 6, 2)])
def test_resampling_gradients(shape):
    g = np.random.default_rng(16)
    rep = grad_check(lambda ps: _weighted(ops.avg_pool2(ps[0]), 7), [Tensor(g.standard_normal(shape))])
    assert rep.max_rel_error <= 1e-4
    rep = grad_check(lambda ps: _weighted(ops.upsample2(ps[0]), 8), [Tensor(g.standard_normal(shape))])
    assert rep.max_rel_error <= 1e-4


@pytest.mark.parametrize("vocab,width", [(5, 3), (9, 4), (3, 2)])
def test_embedding_gradients(vocab, width):
    ids = np.array([[0, 2, 2], [1, vocab - 1, 0]])
    table = Tensor(np.random.default_rng(17).standard_normal((vocab, width)))
    rep = grad_check(lambda ps: _weighted(ops.embedding(ids, ps[0]), 9), [table])
    assert rep.max_rel_error <= 1e-4
    with pytest.raises(IndexError):
        ops.embedding(np.array([vocab]), table)


# -- tape and determinism ------------------------------------------------------

def test_tape_replays_in_reverse_order():
    x = Tensor(np.ones(3), requires_grad=True)
    visited = []
    with Tape() as tape:
        a = ops.mul(x, 2.0)
        b = ops.exp(a)
        c = ops.sum(b)
    for i, node in enumerate(tape.nodes):
        inner = node.backward
        node.backward = (lambda f, i: lambda g: (visited.append(i), f(g))[1])(inner, i)
    tape.backward(c)
    assert visited == [2, 1, 0]
    np.testing.assert_allclose(x.grad, 2 * np.exp(2.0))


def test_every_trainable_leaf_gets_a_gradient():
    used = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.add(ops.mul(used, 3.0), ops.mul(unused, 0.0)))
    tape.backward(loss)
    np.testing.assert_array_equal(used.grad, 3.0)
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    assert not ops.mul(x, 2.0).requires_grad


def test_forward_ops_bitwise_deterministic():
    g = np.random.default_rng(18)
    x = Tensor(g.standard_normal((2, 3, 8, 8)).astype(np.float32))
    w = Tensor(g.standard_normal((4, 3, 3, 3)).astype(np.float32))
    q = Tensor(g.standard_normal((2, 5, 8)).astype(np.float32))
    runs = [(ops.conv2d(x, w, padding=1).data, ops.scaled_dot_attention(q, q, q).data) for _ in range(2)]
    assert runs[0][0].tobytes() == runs[1][0].tobytes()
    assert runs[0][1].tobytes() == runs[1][1].tobytes()


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_debug_mode_flags_non_finite():
    set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            ops.exp(Tensor(np.array([1000.0], dtype=np.float32)))
    finally:
        set_debug(False)


def test_broadcast_only_on_second_operand():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros(3)), Tensor(np.zeros((2, 3))))
