from __future__ import annotations

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from streampoint.errors import FormatError, NumericFault, ShapeError
from streampoint.substrate import (
    Parameter,
    Tensor,
    attention,
    checked,
    gradient_check,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    rope_apply,
    softmax,
    transpose,
    tsum,
)
from streampoint.substrate import ptm
from streampoint.substrate.checks import primitive_gradient_errors


@pytest.fixture(scope="module")
def primitive_errors():
    return primitive_gradient_errors(seed=0)


@pytest.mark.parametrize(
    "name",
    [
        "matmul", "add", "sub", "mul", "div", "scale", "concat", "split", "transpose", "reshape",
        "softmax", "layer_norm", "modulated_layer_norm", "gelu", "exp", "log", "sqrt", "sigmoid",
        "sum", "mean", "l2norm", "gather", "linear", "rope",
    ],
)
def test_primitive_gradients(primitive_errors, name):
    errs = primitive_errors[name]
    assert len(errs) >= 3
    assert max(errs) < 1e-6


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3), atol=1e-15)


def test_layer_norm_of_constant_is_zero():
    out = layer_norm(Tensor(np.full(6, 3.5)), Tensor(np.ones(6)), Tensor(np.zeros(6)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_sum_of_squares_gradient_matches_central_difference():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tsum(x * x).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)
    h = 1e-5
    fd = []
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        f = lambda v: float(np.sum(v * v))  # noqa: E731
        fd.append((f(x.data + e) - f(x.data - e)) / (2 * h))
    np.testing.assert_allclose(x.grad, fd, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    out = softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out > 0) or np.ptp(x) > 30  # extreme spreads may underflow to 0


def test_reshape_transpose_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 4)).astype(np.float32))
    back = transpose(transpose(x, (2, 0, 1)), (1, 2, 0))
    assert back.data.tobytes() == x.data.tobytes()
    again = reshape(reshape(x, (6, 4)), (2, 3, 4))
    assert again.data.tobytes() == x.data.tobytes()


def test_forward_is_deterministic():
    rng = np.random.default_rng(1)
    q, k, v = (Tensor(rng.normal(size=(5, 8)).astype(np.float32)) for _ in range(3))
    a = attention(q, k, v, 2, np.arange(5), np.arange(5)).data
    b = attention(q, k, v, 2, np.arange(5), np.arange(5)).data
    assert a.tobytes() == b.tobytes()


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_checked_mode_detects_non_finite():
    x = Tensor(np.array([1.0, np.inf]))
    with checked():
        with pytest.raises(NumericFault):
            softmax(x)
    softmax(Tensor(np.array([1.0, 2.0])))


def test_no_grad_builds_no_graph():
    p = Parameter(np.ones(3), dtype=np.float64)
    with no_grad():
        out = tsum(p * p)
    assert not out.requires_grad


def test_gradient_accumulates_over_shared_use():
    p = Parameter(np.array([3.0]), dtype=np.float64)
    tsum(p * p + p).backward()
    np.testing.assert_allclose(p.grad, [7.0])


# -- rope ---------------------------------------------------------------------

def test_rope_position_zero_is_identity():
    x = np.random.default_rng(2).normal(size=(3, 8))
    out = rope_apply(Tensor(x), [0, 0, 0]).data
    np.testing.assert_array_equal(out, x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rope_preserves_norm(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 16))
    out = rope_apply(Tensor(x), rng.integers(0, 500, size=4)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), atol=1e-9)


def test_rope_two_dims_scalar_trig():
    out = rope_apply(Tensor(np.array([[1.0, 0.0]])), [1]).data
    np.testing.assert_allclose(out[0], [math.cos(1), math.sin(1)], atol=1e-15)


def test_rope_odd_dim_rejected():
    with pytest.raises(ShapeError):
        rope_apply(Tensor(np.ones((2, 3))), [0, 1])


# -- attention ------------------------------------------------------------------

def _brute_attention(q, k, v, heads, q_pos=None, k_pos=None):
    """Loop-based reference: per head, per query, explicit softmax."""
    nq, d = q.shape
    dh = d // heads
    out = np.zeros((nq, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, sl].copy(), k[:, sl].copy(), v[:, sl]
        for pos, mat in ((q_pos, qh), (k_pos, kh)):
            if pos is None:
                continue
            for t, p in enumerate(pos):
                for i in range(dh // 2):
                    ang = max(p, 0) * 10000.0 ** (-2 * i / dh)
                    a, b = mat[t, 2 * i], mat[t, 2 * i + 1]
                    mat[t, 2 * i] = a * math.cos(ang) - b * math.sin(ang)
                    mat[t, 2 * i + 1] = a * math.sin(ang) + b * math.cos(ang)
        for i in range(nq):
            s = np.array([qh[i] @ kh[j] / math.sqrt(dh) for j in range(k.shape[0])])
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * vh[j] for j in range(k.shape[0]))
    return out


def test_attention_single_key_broadcasts_value():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(1, 4))
    out = attention(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v), heads=2).data
    np.testing.assert_allclose(out, np.repeat(v, 5, axis=0), atol=1e-15)


def test_attention_matches_brute_force_oracle():
    rng = np.random.default_rng(4)
    q = np.linalg.qr(rng.normal(size=(3, 3)))[0] * 3
    q = np.hstack([q, q[:, :1]])  # 3 tokens x 4 features
    k = q.copy()
    v = rng.normal(size=(3, 4))
    out = attention(Tensor(q), Tensor(k), Tensor(v), heads=1).data
    np.testing.assert_allclose(out, _brute_attention(q, k, v, 1), atol=1e-9)
    out = attention(Tensor(q), Tensor(k), Tensor(v), heads=2, q_pos=[0, 1, 2], k_pos=[2, -1, 0]).data
    np.testing.assert_allclose(out, _brute_attention(q, k, v, 2, [0, 1, 2], [2, -1, 0]), atol=1e-9)


def test_attention_gradient_wrt_query():
    rng = np.random.default_rng(5)
    q = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    k = Tensor(rng.normal(size=(6, 8)))
    v = Tensor(rng.normal(size=(6, 8)))
    err = gradient_check(lambda: tsum(attention(q, k, v, 2, np.arange(4), np.arange(6))), [q])
    assert err < 1e-4


def test_attention_head_divisibility():
    with pytest.raises(ShapeError):
        attention(Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))), heads=4)


# -- gradient_check ----------------------------------------------------------------

def test_gradient_check_quadratic_form():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(4, 4))
    A = Tensor(A @ A.T)
    x = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    assert gradient_check(lambda: tsum(matmul(matmul(x, A), transpose(x))), [x]) < 1e-9


def test_gradient_check_constant_function():
    x = Tensor(np.ones(3), requires_grad=True)
    assert gradient_check(lambda: tsum(Tensor(np.ones(3))), [x]) == pytest.approx(0.0, abs=1e-7)


def test_gradient_check_non_finite_raises():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(NumericFault):
        gradient_check(lambda: tsum(x * np.inf), [x])


# -- PTM1 container ------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_ptm_roundtrip_bit_exact(tmp_path, dtype):
    arr = np.random.default_rng(7).normal(size=(3, 4, 2)).astype(dtype)
    ptm.save(tmp_path / "a.ptm", arr)
    back = ptm.load(tmp_path / "a.ptm")
    assert back.dtype == dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_ptm_header_layout():
    blob = ptm.dumps(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert blob[:4] == b"PTM1"
    assert blob[4:6] == bytes([1, 2])
    assert struct.unpack("<2I", blob[6:14]) == (2, 3)
    assert np.frombuffer(blob[14:], dtype="<f8").tolist() == [0, 1, 2, 3, 4, 5]


def test_ptm_truncated_names_file(tmp_path):
    path = tmp_path / "bad.ptm"
    path.write_bytes(ptm.dumps(np.ones((4,), np.float32))[:-2])
    with pytest.raises(FormatError, match="bad.ptm"):
        ptm.load(path)
