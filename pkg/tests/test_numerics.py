from __future__ import annotations

import contextvars
import math

import numpy as np
import pytest

from sketchseg.core import functional as F
from sketchseg.core.errors import ContractError, DimensionError, NumericError
from sketchseg.core.gradcheck import analytic_gradient, finite_diff_check
from sketchseg.core.tensor import Tensor, backward, no_grad, precision


def test_matmul_identity_and_zero():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(F.matmul(a, b).numpy(), b.numpy())
    np.testing.assert_array_equal(F.matmul(a, np.zeros((2, 1))).numpy(), np.zeros((2, 1)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    expected = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(F.matmul(a, b).numpy(), expected, rtol=1e-6)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as e:
        F.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    assert "(2, 3) vs (2, 3)" in str(e.value)


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax_rows(np.array([[0.0, 0.0]])).numpy(), [[0.5, 0.5]])
    np.testing.assert_allclose(F.softmax_rows(np.array([[math.log(2.0), 0.0]])).numpy(), [[2 / 3, 1 / 3]], rtol=1e-6)
    row = np.array([[0.3, -1.2, 2.0]])
    np.testing.assert_allclose(F.softmax_rows(row + 17.0).numpy(), F.softmax_rows(row).numpy(), atol=1e-7)


def test_softmax_rows_sum_to_one(rng):
    for _ in range(200):
        x = rng.standard_normal((int(rng.integers(1, 6)), int(rng.integers(1, 8)))) * 20
        out = F.softmax_rows(x).numpy()
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_layer_norm_examples(rng):
    np.testing.assert_allclose(F.layer_norm(np.ones(3), np.ones(3), np.zeros(3)).numpy(), np.zeros(3))
    np.testing.assert_allclose(
        F.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), eps=1e-12).numpy(), [1.0, -1.0], atol=1e-6
    )
    x = rng.standard_normal(5)
    np.testing.assert_allclose(F.layer_norm(x, np.zeros(5), np.full(5, 2.5)).numpy(), np.full(5, 2.5))
    out = F.layer_norm(rng.standard_normal((4, 16)) * 3 + 1, np.ones(16), np.zeros(16)).numpy()
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)


def test_bicubic_preserves_constants():
    out = F.bicubic_resize(np.full((4, 4), 7.0), 8, 8).numpy()
    np.testing.assert_allclose(out, 7.0, atol=1e-6)


def test_bicubic_identity_resize(rng):
    src = rng.standard_normal((5, 6))
    np.testing.assert_allclose(F.bicubic_resize(src, 5, 6).numpy(), src, atol=1e-6)


def test_bicubic_linear_ramp_at_interior_centers():
    ramp = np.tile(np.arange(4, dtype=np.float64), (4, 1))  # f(x, y) = x
    out = F.bicubic_resize(ramp, 8, 8).numpy()
    # Output columns 3 and 4 sample x = 1.25 and 1.75 with all four taps inside the source.
    for j in (3, 4):
        src_x = (j + 0.5) * 0.5 - 0.5
        np.testing.assert_allclose(out[:, j], src_x, atol=1e-5)


def test_bicubic_overshoot_bound(rng):
    for _ in range(50):
        src = rng.uniform(-1, 1, (4, 4))
        out = F.bicubic_resize(src, 16, 16).numpy()
        lo, hi = src.min(), src.max()
        spread = hi - lo
        # Tensor-product kernel: negative lobes sum to 2 * 1.125 * 0.125 in 2-D.
        assert out.min() >= lo - 0.28125 * spread - 1e-9
        assert out.max() <= hi + 0.28125 * spread + 1e-9


def test_bicubic_one_dimensional_overshoot_within_quarter_range(rng):
    for _ in range(50):
        row = rng.uniform(0, 1, 6)
        out = F.bicubic_resize(np.tile(row, (3, 1)), 3, 24).numpy()
        spread = row.max() - row.min()
        assert out.min() >= row.min() - 0.25 * spread - 1e-9
        assert out.max() <= row.max() + 0.25 * spread + 1e-9


def test_bicubic_weight_rows_sum_to_one():
    for n_in, n_out in [(2, 5), (4, 8), (8, 3), (7, 7)]:
        np.testing.assert_allclose(F.bicubic_weights(n_in, n_out).sum(axis=1), 1.0, atol=1e-12)


def test_backward_square():
    x = Tensor(np.array(3.0), name="x")
    grads = backward(x * x, {"x": x})
    assert grads["x"] == pytest.approx(6.0)


def test_backward_constant_gives_zero_gradient():
    x = Tensor(np.array([1.0, 2.0]), name="x")
    grads = backward(Tensor(np.array(5.0)) + Tensor(np.array(0.0)), {"x": x})
    np.testing.assert_array_equal(grads["x"], [0.0, 0.0])


def test_backward_keys_are_exactly_the_trainable_set():
    a = Tensor(np.array([1.0, 2.0]), name="a")
    b = Tensor(np.array([3.0, 4.0]), name="b")
    grads = backward((a * b).sum(), {"a": a})
    assert set(grads) == {"a"}
    np.testing.assert_array_equal(grads["a"], [3.0, 4.0])


def test_backward_rejects_non_scalar_loss():
    a = Tensor(np.ones(2), name="a")
    with pytest.raises(ContractError):
        backward(a * 2.0, {"a": a})


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), name="a")
    with no_grad():
        out = (a * 2.0).sum()
    grads = backward(out, {"a": a})
    np.testing.assert_array_equal(grads["a"], [0.0, 0.0])


def test_non_finite_output_names_the_op():
    with pytest.raises(NumericError) as e:
        F.sqrt(np.array([-1.0, 1.0]))
    assert e.value.term == "Sqrt"


def test_pairwise_distances_are_exact():
    a = np.array([[0.0, 0.0], [0.3, 0.0]])
    d = F.pairwise_distances(Tensor(a), Tensor(a)).numpy()
    np.testing.assert_array_equal(np.diag(d), [0.0, 0.0])
    assert d[0, 1] == np.sqrt(0.09)


def test_pairwise_distance_gradient_is_zero_at_coincident_rows():
    a = Tensor(np.array([[1.0, 2.0]]), name="a")
    grads = backward(F.pairwise_distances(a, Tensor(np.array([[1.0, 2.0]]))).sum(), {"a": a})
    np.testing.assert_array_equal(grads["a"], [[0.0, 0.0]])


def test_precision_and_no_grad_do_not_leak_across_contexts():
    seen = {}

    def other_context():
        seen["dtype"] = Tensor([1.0]).dtype
        a = Tensor(np.ones(2), name="a")
        seen["grad"] = backward((a * 2.0).sum(), {"a": a})["a"]

    with precision(np.float64), no_grad():
        contextvars.Context().run(other_context)
        assert Tensor([1.0]).dtype == np.float64
    assert seen["dtype"] == np.float32
    np.testing.assert_array_equal(seen["grad"], [2.0, 2.0])


def test_multi_head_attention_matches_per_head_loop(rng):
    q, k, v = rng.standard_normal((3, 6)), rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    out = F.multi_head_attention(q, k, v, n_heads=3, scale=0.5).numpy()
    for h in range(3):
        cols = slice(2 * h, 2 * h + 2)
        logits = q[:, cols] @ k[:, cols].T * 0.5
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out[:, cols], weights @ v[:, cols], atol=1e-12)
    with pytest.raises(DimensionError):
        F.multi_head_attention(q, k, v, n_heads=4, scale=0.5)


def test_finite_diff_square():
    with precision(np.float64):
        report = finite_diff_check(lambda p: p["x"] * p["x"], {"x": np.array(3.0)})
        grads = analytic_gradient(lambda p: p["x"] * p["x"], {"x": np.array(3.0)})
    assert grads["x"] == pytest.approx(6.0, abs=1e-6)
    assert report["x"] < 1e-6


def test_finite_diff_linear_is_exact(rng):
    w = rng.standard_normal(6)
    with precision(np.float64):
        report = finite_diff_check(lambda p: (p["x"] * w).sum(), {"x": rng.standard_normal(6)})
    assert report["x"] < 1e-8


OP_CASES = {
    "add_broadcast": (lambda p: (p["a"] + p["b"]).sum(), {"a": (3, 4), "b": (4,)}),
    "mul": (lambda p: (p["a"] * p["a"] * p["b"]).sum(), {"a": (3, 4), "b": (1, 4)}),
    "pow_div": (lambda p: (1.0 / (p["pos"] + 2.0) + p["pos"] ** 3.0).sum(), {"pos": (5,)}),
    "matmul": (lambda p: (F.matmul(p["a"], p["b"]) ** 2.0).sum(), {"a": (3, 4), "b": (4, 2)}),
    "sum_axis": (lambda p: (p["a"].sum(axis=0) ** 2.0).sum(), {"a": (3, 4)}),
    "reshape_transpose": (lambda p: (p["a"].reshape(2, 6).T * np.arange(12.0).reshape(6, 2)).sum(), {"a": (3, 4)}),
    "getitem_repeat": (lambda p: (p["a"][np.array([0, 0, 2]), 1:3] ** 2.0).sum(), {"a": (3, 4)}),
    "concat": (lambda p: (F.concat([p["a"], p["b"].reshape(1, 4)], axis=0) ** 2.0).sum(), {"a": (3, 4), "b": (4,)}),
    "sqrt": (lambda p: F.sqrt(p["pos"] + 1.0).sum(), {"pos": (5,)}),
    "sigmoid": (lambda p: (F.sigmoid(p["a"]) ** 2.0).sum(), {"a": (6,)}),
    "relu_clip": (lambda p: (F.relu(p["off"]) + F.clip(p["off"] * 0.1, -0.5, 0.5) * 3.0).sum(), {"off": (6,)}),
    "softmax_matmul": (lambda p: (F.softmax_rows(F.matmul(p["a"], p["b"])) * np.arange(8.0).reshape(4, 2)).sum(),
                       {"a": (4, 3), "b": (3, 2)}),
    "multi_head_attention": (
        lambda p: (F.multi_head_attention(p["q"], p["k"], p["v"], 2, 0.7) * np.arange(12.0).reshape(3, 4)).sum(),
        {"q": (3, 4), "k": (5, 4), "v": (5, 4)},
    ),
    "self_attention_shared_input": (
        lambda p: (F.multi_head_attention(p["a"], p["a"], p["a"], 2, 0.5) ** 2.0).sum(),
        {"a": (4, 4)},
    ),
    "layer_norm": (lambda p: (F.layer_norm(p["a"], p["g"], p["b"]) * np.arange(12.0).reshape(3, 4)).sum(),
                   {"a": (3, 4), "g": (4,), "b": (4,)}),
    "l2_pairwise": (lambda p: F.pairwise_distances(F.l2_normalize(p["a"]), p["b"]).sum(), {"a": (3, 4), "b": (2, 4)}),
    "bicubic": (lambda p: (F.bicubic_resize(p["a"], 6, 5) ** 2.0).sum(), {"a": (3, 4)}),
}


def _draw(name: str, shape, rng) -> np.ndarray:
    if name == "pos":
        return rng.uniform(0.5, 2.0, shape)
    if name == "off":
        # Away from the relu and clip kinks.
        return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.5, 3.0, shape)
    return rng.standard_normal(shape)


@pytest.mark.parametrize("case", sorted(OP_CASES))
def test_every_op_matches_finite_differences(case, rng):
    fn, shapes = OP_CASES[case]
    params = {name: _draw(name, shape, rng) for name, shape in shapes.items()}
    with precision(np.float64):
        report = finite_diff_check(fn, params)
    assert max(report.values()) < 1e-4, report
