import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prefixmm.autodiff import (
    GraphConsumedError,
    NonFiniteError,
    Tensor,
    build_tape,
    finite_diff_check,
    no_grad,
    ops,
    read_tensor,
    write_tensor,
)

F64 = np.float64


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad)


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 4))
    out = ops.matmul(t64(a), t64(np.eye(4)))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_hand_value():
    out = ops.matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ops.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_matmul_gradient_fd():
    rng = np.random.default_rng(1)
    a, b = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(4, 2)))
    assert finite_diff_check(lambda: ops.matmul(a, b).sum(), [a, b]) < 1e-6


def test_matmul_batched_broadcast_gradient():
    rng = np.random.default_rng(2)
    a, b = t64(rng.normal(size=(2, 3, 4))), t64(rng.normal(size=(4, 5)))
    assert finite_diff_check(lambda: (ops.matmul(a, b) ** 2).sum(), [a, b]) < 1e-6


# -- layer norm -------------------------------------------------------------

def test_layer_norm_constant_input_is_zero():
    x = t64(np.full((1, 5), 3.7))
    out = ops.layer_norm(x, t64(np.ones(5)), t64(np.zeros(5)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_hand_value():
    out = ops.layer_norm(t64([[1.0, 2.0, 3.0]]), t64(np.ones(3)), t64(np.zeros(3)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.224744871, 0.0, 1.224744871]], atol=1e-8)


def test_layer_norm_gradients_fd():
    rng = np.random.default_rng(3)
    x, g, b = t64(rng.normal(size=(4, 6))), t64(rng.normal(size=6)), t64(rng.normal(size=6))
    w = rng.normal(size=(4, 6))
    assert finite_diff_check(lambda: (ops.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-4


def test_layer_norm_check_stable_across_step_sizes():
    rng = np.random.default_rng(4)
    x, g, b = t64(rng.normal(size=(3, 5))), t64(np.ones(5)), t64(np.zeros(5))
    w = rng.normal(size=(3, 5))
    f = lambda: (ops.layer_norm(x, g, b) * w).sum()  # noqa: E731
    assert finite_diff_check(f, x, h=1e-5) < 1e-4
    assert finite_diff_check(f, x, h=1e-4) < 1e-4


# -- cross entropy ----------------------------------------------------------

def test_cross_entropy_two_zero_logits():
    loss = ops.softmax_cross_entropy(t64([[0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_cross_entropy_dominant_logit_goes_to_zero():
    loss = ops.softmax_cross_entropy(t64([[500.0, 0.0, -3.0]]), [0])
    assert loss.item() < 1e-12


def test_cross_entropy_grad_is_softmax_minus_onehot():
    rng = np.random.default_rng(5)
    logits = t64(rng.normal(size=(4, 7)))
    targets = np.array([0, 3, 6, 3])
    ops.softmax_cross_entropy(logits, targets).backward()
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    expected = (p - np.eye(7)[targets]) / 4
    np.testing.assert_allclose(logits.grad, expected, atol=1e-14)
    logits.grad = None
    assert finite_diff_check(lambda: ops.softmax_cross_entropy(logits, targets), logits) < 1e-4


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ops.softmax_cross_entropy(t64(np.zeros((2, 3))), [0, 3])


# -- conv2d -----------------------------------------------------------------

def test_conv_identity_kernel():
    rng = np.random.default_rng(6)
    x = t64(rng.normal(size=(2, 3, 5, 5)))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c] = 1.0
    out = ops.conv2d(x, t64(w))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_output_shape_stride_two():
    out = ops.conv2d(t64(np.ones((1, 1, 4, 4))), t64(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, 4.0)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(t64(x), t64(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_gradient_fd():
    rng = np.random.default_rng(8)
    x = t64(rng.normal(size=(1, 2, 6, 6)))
    w = t64(rng.normal(size=(3, 2, 3, 3)))
    b = t64(rng.normal(size=3))
    r = rng.normal(size=(1, 3, 3, 3))
    assert finite_diff_check(lambda: (ops.conv2d(x, w, b, stride=2, padding=1) * r).sum(), [x, w, b]) < 1e-4


def test_conv_incompatible_shapes():
    with pytest.raises(ValueError):
        ops.conv2d(t64(np.ones((1, 2, 4, 4))), t64(np.ones((1, 3, 2, 2))))
    with pytest.raises(ValueError):
        ops.conv2d(t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 1, 3, 3))))


# -- embedding --------------------------------------------------------------

def test_embedding_lookup_returns_row():
    table = t64(np.arange(15.0).reshape(5, 3))
    out = ops.embedding(table, [4, 1])
    np.testing.assert_array_equal(out.data, table.data[[4, 1]])


def test_embedding_repeated_id_accumulates():
    table = t64(np.zeros((5, 3)))
    ops.embedding(table, [2, 2]).sum().backward()
    np.testing.assert_array_equal(table.grad[2], [2.0, 2.0, 2.0])
    assert table.grad[[0, 1, 3, 4]].sum() == 0.0


def test_embedding_gradient_fd():
    rng = np.random.default_rng(9)
    table = t64(rng.normal(size=(5, 3)))
    ids = [0, 3, 3, 4]
    w = rng.normal(size=(4, 3))
    assert finite_diff_check(lambda: (ops.embedding(table, ids) * w).sum(), table) < 1e-6


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ops.embedding(t64(np.zeros((5, 3))), [5])


# -- backward semantics -----------------------------------------------------

def test_sum_gives_ones():
    x = t64(np.random.default_rng(0).normal(size=(3, 2)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_disconnected_leaf_zero_grad():
    x, y = t64(np.ones(3)), t64(np.ones(3))
    loss = (x * 2.0).sum()
    loss.backward()
    assert y.grad is None or not y.grad.any()
    check = finite_diff_check(lambda: (x * 2.0).sum(), [x, y])
    assert check < 1e-10


def test_backward_rejects_non_scalar():
    x = t64(np.ones(3))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_consumes_graph():
    x = t64(np.ones(3))
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(GraphConsumedError):
        loss.backward()


def test_two_layer_mlp_fd():
    rng = np.random.default_rng(10)
    x = t64(rng.normal(size=(5, 4)), grad=False)
    w1, b1 = t64(rng.normal(size=(4, 8))), t64(rng.normal(size=8))
    w2, b2 = t64(rng.normal(size=(8, 3))), t64(rng.normal(size=3))
    targets = [0, 1, 2, 1, 0]

    def f():
        hid = ops.gelu(ops.linear(x, w1, b1))
        return ops.softmax_cross_entropy(ops.linear(hid, w2, b2), targets)

    assert finite_diff_check(f, [w1, b1, w2, b2]) < 1e-4


def test_tape_is_topological():
    x = t64(np.ones(2))
    y = x * 3.0
    z = ops.exp(y) + y
    loss = z.sum()
    tape = build_tape(loss)
    pos = {id(n): i for i, n in enumerate(tape)}
    for node in tape:
        for p in node._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(node)]
    assert tape[-1] is loss


def test_quadratic_error_is_second_order():
    x = t64(np.random.default_rng(11).normal(size=10))
    f = lambda: (x * x).sum() * 0.5  # noqa: E731
    assert finite_diff_check(f, x, h=1e-3) < 1e-8


def test_nonfinite_surfaces():
    with pytest.raises(NonFiniteError):
        ops.log(t64([0.0, 1.0]))


def test_no_grad_records_nothing():
    x = t64(np.ones(2))
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_softmax_mask_exact_zero_and_empty_rows():
    x = t64([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    mask = np.array([[True, True, False], [False, False, False]])
    p = ops.softmax(x, mask=mask)
    assert p.data[0, 2] == 0.0
    np.testing.assert_array_equal(p.data[1], 0.0)
    w = np.random.default_rng(0).normal(size=(2, 3))
    assert finite_diff_check(lambda: (ops.softmax(x, mask=mask) * w).sum(), x) < 1e-6


def test_space_depth_roundtrip():
    x = t64(np.random.default_rng(0).normal(size=(2, 3, 8, 8)))
    y = ops.depth_to_space(ops.space_to_depth(x, 4), 4)
    np.testing.assert_array_equal(x.data, y.data)


# -- properties over random seeds ------------------------------------------

def _primitive_cases(rng):
    x = t64(rng.normal(size=(3, 4)))
    y = t64(rng.normal(size=(3, 4)))
    pos = t64(rng.uniform(0.5, 2.0, size=(3, 4)))
    w = rng.normal(size=(3, 4))
    g, b = t64(rng.normal(size=4)), t64(rng.normal(size=4))
    table = t64(rng.normal(size=(5, 4)))
    img = t64(rng.normal(size=(1, 2, 6, 6)))
    kern = t64(rng.normal(size=(2, 2, 3, 3)))
    targets = rng.integers(0, 4, size=3)
    return {
        "add": (lambda: ((x + y) * w).sum(), [x, y]),
        "mul": (lambda: ((x * y) * w).sum(), [x, y]),
        "div": (lambda: ((x / pos) * w).sum(), [x, pos]),
        "exp": (lambda: (ops.exp(x) * w).sum(), [x]),
        "log": (lambda: (ops.log(pos) * w).sum(), [pos]),
        "tanh": (lambda: (ops.tanh(x) * w).sum(), [x]),
        "gelu": (lambda: (ops.gelu(x) * w).sum(), [x]),
        "matmul": (lambda: (ops.matmul(x, y.transpose()) ** 2).sum(), [x, y]),
        "layer_norm": (lambda: (ops.layer_norm(x, g, b) * w).sum(), [x, g, b]),
        "softmax": (lambda: (ops.softmax(x) * w).sum(), [x]),
        "cross_entropy": (lambda: ops.softmax_cross_entropy(x, targets), [x]),
        "embedding": (lambda: (ops.embedding(table, [0, 4, 4]) * w).sum(), [table]),
        "conv2d": (lambda: ops.conv2d(img, kern, stride=1, padding=1).sum() ** 2, [img, kern]),
        "getitem": (lambda: (x[1:, ::2] ** 2).sum(), [x]),
        "concat": (lambda: (ops.concat([x, y], axis=1) ** 2).sum(), [x, y]),
        "mean": (lambda: (x.mean(axis=0) ** 2).sum(), [x]),
    }


@settings(max_examples=20, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_every_primitive_passes_fd(seed):
    rng = np.random.default_rng(seed)
    for name, (f, xs) in _primitive_cases(rng).items():
        err = finite_diff_check(f, xs)
        assert err < 1e-4, (name, err)


@settings(max_examples=20, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2 ** 31 - 1))
def test_forward_deterministic(seed):
    def run():
        rng = np.random.default_rng(seed)
        x = t64(rng.normal(size=(2, 3, 5)))
        w = t64(rng.normal(size=(5, 5)))
        return ops.softmax(ops.matmul(x, w)).data
    np.testing.assert_array_equal(run(), run())


def test_gradient_accumulation_additive():
    rng = np.random.default_rng(12)
    x = t64(rng.normal(size=(3, 3)))
    f1 = lambda: (ops.tanh(x) ** 2).sum()  # noqa: E731
    f2 = lambda: ops.exp(x).mean()  # noqa: E731
    (f1() + f2()).backward()
    joint = x.grad.copy()
    x.grad = None
    f1().backward()
    f2().backward()
    np.testing.assert_allclose(x.grad, joint, rtol=1e-13, atol=1e-15)


def test_tensor_serialization_roundtrip():
    arr = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(np.float32)
    buf = io.BytesIO()
    write_tensor(buf, arr)
    blob = buf.getvalue()
    assert blob[:4] == b"PMM1"
    assert int.from_bytes(blob[4:8], "little") == 3
    back = read_tensor(io.BytesIO(blob))
    np.testing.assert_array_equal(back, arr)
