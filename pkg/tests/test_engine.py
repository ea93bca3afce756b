import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from poolleak import _kernels as K
from poolleak.engine import (
    Conv2d,
    Dense,
    Flatten,
    MaxPool,
    ModelSpec,
    PoolVariant,
    Softmax,
    avgpool_forward,
    build_custom_cnn,
    conv2d_forward,
    dense_forward,
    infer_shapes,
    load_model,
    maxpool_forward,
    model_forward,
    relu_forward,
    save_model,
    softmax,
    update_counts,
)
from poolleak.errors import ShapeError, ShapeMismatch
from poolleak.tensor import Tensor, tensor_new

from conftest import tiny_model

NAIVE, CT = PoolVariant.NAIVE, PoolVariant.CONSTANT_TIME


# ---------------------------------------------------------------- oracles


def pool_oracle(x, k, s, p):
    """Per-window max with first-occurrence argmax over the zero-padded plane."""
    c_dim, h, w = x.shape
    xp = np.zeros((c_dim, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, p : p + h, p : p + w] = x
    oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    out = np.zeros((c_dim, oh, ow), dtype=x.dtype)
    idx = np.zeros((c_dim, oh, ow), dtype=np.int64)
    for c in range(c_dim):
        for i in range(oh):
            for j in range(ow):
                best, where = None, None
                for r in range(i * s, i * s + k):
                    for q in range(j * s, j * s + k):
                        if best is None or xp[c, r, q] > best:
                            best, where = xp[c, r, q], r * xp.shape[2] + q
                out[c, i, j], idx[c, i, j] = best, where
    return out, idx


def conv_oracle(x, w, b, s, p):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.zeros((c_in, h + 2 * p, wd + 2 * p))
    xp[:, p : p + h, p : p + wd] = x
    oh, ow = (h + 2 * p - kh) // s + 1, (wd + 2 * p - kw) // s + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[o, c, u, v] * xp[c, i * s + u, j * s + v]
                out[o, i, j] = acc
    return out


def ramp():
    return tensor_new([1, 4, 4], range(16))


# ------------------------------------------------------------------- conv


def conv(w, b, stride=1, pad=0):
    return Conv2d(Tensor.from_array(np.asarray(w, np.float32)), Tensor.from_array(np.asarray(b, np.float32)), stride, pad)


def test_conv_examples():
    ones = tensor_new([1, 3, 3], [1] * 9)
    assert np.all(conv2d_forward(ones, conv(np.full((1, 1, 1, 1), 2), [0])).array == 2)
    x = Tensor.from_array(np.random.default_rng(0).standard_normal((2, 5, 5)).astype(np.float32))
    assert np.all(conv2d_forward(x, conv(np.zeros((3, 2, 3, 3)), [4, 4, 4])).array == 4)

    w = np.array([1, 0, 0, -1], np.float32).reshape(1, 1, 2, 2)
    want = [[-5, -5], [-5, -5]]
    assert np.array_equal(conv_oracle(ramp().array, w, [0], 2, 0)[0], want)
    assert np.array_equal(conv2d_forward(ramp(), conv(w, [0], 2)).array[0], want)


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        conv2d_forward(tensor_new([2, 3, 3], [0] * 18), conv(np.zeros((1, 1, 1, 1)), [0]))
    with pytest.raises(ShapeMismatch):
        conv2d_forward(tensor_new([1, 2, 2], [0] * 4), conv(np.zeros((1, 1, 3, 3)), [0]))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 2), st.integers(0, 10_000))
def test_conv_matches_loop_oracle(c_in, c_out, hw, k, s, p, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c_in, hw, hw)).astype(np.float32)
    w = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
    b = rng.standard_normal(c_out).astype(np.float32)
    got = conv2d_forward(Tensor.from_array(x), conv(w, b, s, p)).array
    np.testing.assert_allclose(got, conv_oracle(x, w, b, s, p), rtol=1e-4, atol=1e-4)


# ---------------------------------------------------------- relu, dense, softmax


def test_relu():
    assert list(relu_forward(tensor_new([3], [-1, 0, 2])).data) == [0, 0, 2]
    assert np.all(relu_forward(tensor_new([4], [-1, -2, -3, -4])).data == 0)
    pos = tensor_new([3], [1, 2, 3])
    assert relu_forward(pos) == pos


def dense(w, b):
    return Dense(Tensor.from_array(np.asarray(w, np.float32)), Tensor.from_array(np.asarray(b, np.float32)))


def test_dense():
    x = tensor_new([3], [1, 2, 3])
    assert dense_forward(x, dense(np.eye(3), np.zeros(3))) == x
    assert list(dense_forward(tensor_new([2], [5, 6]), dense(np.zeros((1, 2)), [7])).data) == [7]
    # hand dot products: 1*5 + 2*6 + 0 = 17, 3*5 + 4*6 + 1 = 40
    assert list(dense_forward(tensor_new([2], [5, 6]), dense([[1, 2], [3, 4]], [0, 1])).data) == [17, 40]
    with pytest.raises(ShapeMismatch):
        dense_forward(tensor_new([3], [1, 2, 3]), dense([[1, 2]], [0]))


def test_softmax():
    np.testing.assert_allclose(softmax(tensor_new([2], [0, 0])).data, [0.5, 0.5])
    np.testing.assert_allclose(softmax(tensor_new([2], [1000, 1000])).data, [0.5, 0.5])
    # closed form: e^0 / (e^0 + 3) = 1/4
    np.testing.assert_allclose(softmax(tensor_new([2], [0, math.log(3)])).data, [0.25, 0.75], rtol=1e-6)


@given(hnp.arrays(np.float32, st.integers(1, 12), elements=st.floats(-40, 40, width=32)))
def test_softmax_is_distribution(v):
    out = softmax(Tensor.from_array(v)).data
    assert np.all(out > 0) and abs(float(out.astype(np.float64).sum()) - 1) < 1e-6


# ------------------------------------------------------------------ pooling


def test_maxpool_count_examples():
    x = tensor_new([1, 2, 2], [1, 2, 3, 4])
    out, idx, n = maxpool_forward(x, 2, 2, 0, NAIVE)
    assert out.data.tolist() == [4] and idx.ravel().tolist() == [3] and n == 4
    out, idx, n = maxpool_forward(tensor_new([1, 2, 2], [4, 3, 2, 1]), 2, 2, 0, NAIVE)
    assert out.data.tolist() == [4] and idx.ravel().tolist() == [0] and n == 1


def test_maxpool_4x4_example():
    x = Tensor.from_array(np.array([[1, 3, 2, 1], [4, 6, 5, 7], [3, 1, 9, 2], [0, 2, 4, 3]], np.float32)[None])
    # frozen from the window oracle; bottom-left window is [3, 1, 0, 2]
    want = [[6, 7], [3, 9]]
    assert pool_oracle(x.array, 2, 2, 0)[0][0].tolist() == want
    a, ia, _ = maxpool_forward(x, 2, 2, 0, NAIVE)
    b, ib, nb = maxpool_forward(x, 2, 2, 0, CT)
    assert a.array[0].tolist() == want and a == b and np.array_equal(ia, ib)
    assert nb == 16


def test_padding_cells_can_win():
    x = tensor_new([1, 1, 1], [-3])
    out, idx, _ = maxpool_forward(x, 2, 1, 1, NAIVE)
    # every window holds a zero pad cell; the first one in scan order wins
    assert out.array.ravel().tolist() == [0, 0, 0, 0]
    # last window starts on the -3 (flat 4), so the pad zero at flat 5 replaces it
    assert idx.ravel().tolist() == [0, 1, 3, 5]


def test_nan_divergence_documented():
    # branchy: a NaN wins and persists, later finite compares are false
    x = tensor_new([1, 1, 2], [float("nan"), 5])
    a, ia, na = maxpool_forward(x, (1, 2), 1, 0, NAIVE)
    b, ib, nb = maxpool_forward(x, (1, 2), 1, 0, CT)
    assert np.isnan(a.data[0]) and ia.ravel().tolist() == [0] and na == 1
    # single selector: val <= NaN is false, so the finite value replaces it
    assert b.data.tolist() == [5] and ib.ravel().tolist() == [1] and nb == 2

    # every NaN updates on the branchy path, so the last one is kept
    y = tensor_new([1, 1, 4], [1, float("nan"), 5, float("nan")])
    a, ia, na = maxpool_forward(y, (1, 4), 1, 0, NAIVE)
    assert np.isnan(a.data[0]) and ia.ravel().tolist() == [3] and na == 3


pool_cfg = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(0, 1))


@given(st.integers(1, 3), st.integers(3, 9), pool_cfg, st.integers(0, 10_000), st.booleans())
def test_maxpool_matches_oracle_and_variants_agree(c, hw, cfg, seed, coarse):
    k, s, p = cfg
    if p * 2 >= k + 1:
        p = 0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, hw, hw)).astype(np.float32)
    if coarse:
        x = np.round(x)  # plenty of ties
    ref_out, ref_idx = pool_oracle(x, k, s, p)
    for v in (NAIVE, CT):
        out, idx, n = maxpool_forward(Tensor.from_array(x), k, s, p, v)
        assert np.array_equal(out.array, ref_out) and np.array_equal(idx, ref_idx)
        windows = ref_out.size
        if v is CT:
            assert n == windows * k * k
        else:
            assert windows <= n <= windows * k * k


def test_variant_equivalence_many_windows():
    rng = np.random.default_rng(1)
    x = np.round(rng.standard_normal((8, 80, 80)) * 3).astype(np.float32)
    a, ia, _ = maxpool_forward(Tensor.from_array(x), 3, 2, 1, NAIVE)
    b, ib, _ = maxpool_forward(Tensor.from_array(x), 3, 2, 1, CT)
    assert a.size >= 10_000
    assert a == b and np.array_equal(ia, ib)


def test_naive_count_extremes():
    asc = Tensor.from_array(np.arange(16, dtype=np.float32).reshape(1, 4, 4))
    desc = Tensor.from_array(np.arange(16, 0, -1, dtype=np.float32).reshape(1, 4, 4))
    # row-major ascending windows update on every element; descending only once
    assert maxpool_forward(asc, 2, 2, 0, NAIVE)[2] == 4 * 4
    assert maxpool_forward(desc, 2, 2, 0, NAIVE)[2] == 4


@pytest.mark.parametrize("fn", ["naive", "ct"])
def test_backends_agree(fn):
    rng = np.random.default_rng(3)
    xp = np.round(rng.standard_normal((4, 11, 11)) * 2).astype(np.float32)
    a = getattr(K, f"maxpool_{fn}_numba")(xp, 3, 3, 2)
    b = getattr(K, f"maxpool_{fn}_numpy")(xp, 3, 3, 2)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]


def test_backends_agree_on_nan():
    xp = np.array([[[1, np.nan, 5], [np.nan, 2, 3], [0, 7, 1]]], np.float32)
    for fn in ("naive", "ct"):
        a = getattr(K, f"maxpool_{fn}_numba")(xp, 3, 3, 1)
        b = getattr(K, f"maxpool_{fn}_numpy")(xp, 3, 3, 1)
        assert np.array_equal(a[1], b[1]) and a[2] == b[2]


def test_avgpool_examples():
    assert avgpool_forward(tensor_new([1, 2, 2], [1, 2, 3, 4]), 2, 2).data.tolist() == [2.5]
    const = Tensor.from_array(np.full((2, 4, 4), 1.75, np.float32))
    assert np.all(avgpool_forward(const, 2, 2).array == 1.75)
    # window-mean oracle on the ramp
    want = [[np.mean(ramp().array[0, i : i + 2, j : j + 2]) for j in (0, 2)] for i in (0, 2)]
    assert want == [[2.5, 4.5], [10.5, 12.5]]
    assert avgpool_forward(ramp(), 2, 2).array[0].tolist() == want
    # padding zeros stay in the divisor
    assert avgpool_forward(tensor_new([1, 1, 1], [4]), 2, 1, 1).data.tolist() == [1, 1, 1, 1]


def test_pool_shape_errors():
    with pytest.raises(ShapeMismatch):
        maxpool_forward(tensor_new([1, 2, 2], [1, 2, 3, 4]), 3, 1)
    with pytest.raises(ShapeMismatch):
        maxpool_forward(tensor_new([4], [1, 2, 3, 4]), 2, 2)
    with pytest.raises(ShapeMismatch):
        avgpool_forward(tensor_new([1, 2, 2], [1, 2, 3, 4]), 3, 1)


# ------------------------------------------------------------------- models


def test_flatten_identity_model():
    m = ModelSpec((Flatten(), dense(np.eye(2), np.zeros(2))), (2, 1, 1), 2)
    out = model_forward(m, tensor_new([2, 1, 1], [3, 1]))
    assert out.logits.tolist() == [3, 1] and out.predicted_label == 0


def test_uninstrumented_has_no_times_but_counts(tiny):
    x = np.random.default_rng(0).standard_normal((1, 6, 6)).astype(np.float32)
    out = model_forward(tiny, x, instrument=False)
    assert out.layer_times_ns == [] and len(out.branch_not_taken) == 1
    assert update_counts(tiny, x) == out.branch_not_taken


def test_predicted_label_lowest_index_on_tie():
    m = ModelSpec((Flatten(), dense(np.zeros((3, 1)), [1, 1, 1])), (1, 1, 1), 3)
    assert model_forward(m, tensor_new([1, 1, 1], [0])).predicted_label == 0


def test_custom_cnn_table_geometry():
    m = build_custom_cnn((3, 32, 32), 10, 0)
    kinds = [l.kind for l in m.layers]
    assert kinds == ["Conv2d", "ReLU", "Conv2d", "ReLU", "MaxPool",
                     "Conv2d", "ReLU", "Conv2d", "ReLU", "MaxPool",
                     "Conv2d", "ReLU", "Conv2d", "ReLU", "Flatten",
                     "Dense", "ReLU", "Dense", "ReLU", "Dense", "Softmax"]
    convs = [l.out_channels for l in m.layers if isinstance(l, Conv2d)]
    assert convs == [16, 32, 32, 32, 64, 128]
    pools = [l for l in m.layers if isinstance(l, MaxPool)]
    assert all(p.kernel == (3, 3) and p.stride == 2 for p in pools)
    assert [l.weight.shape[0] for l in m.layers if isinstance(l, Dense)] == [128, 64, 10]
    assert infer_shapes(m.layers, m.input_shape)[-1] == (10,)
    out = model_forward(m, np.zeros((3, 32, 32), np.float32), instrument=True)
    assert len(out.layer_times_ns) == len(m.layers) == 21


def test_custom_cnn_determinism_and_underflow():
    a, b = build_custom_cnn((3, 16, 16), 10, 5), build_custom_cnn((3, 16, 16), 10, 5)
    assert all(np.array_equal(p, q) for p, q in zip(a.params(), b.params()))
    assert not np.array_equal(a.params()[0], build_custom_cnn((3, 16, 16), 10, 6).params()[0])
    with pytest.raises(ShapeError):
        build_custom_cnn((3, 4, 4), 10, 0)


def test_instrumentation_does_not_perturb_and_invariants():
    m = build_custom_cnn((3, 16, 16), 10, 1)
    x = np.random.default_rng(2).standard_normal((3, 16, 16)).astype(np.float32)
    a = model_forward(m, x, instrument=False)
    b = model_forward(m, x, instrument=True)
    assert np.array_equal(a.logits, b.logits)
    assert b.total_time_ns >= max(b.layer_times_ns) and min(b.layer_times_ns) >= 0
    shapes = infer_shapes(m.layers, m.input_shape)
    windows = [int(np.prod(shapes[k])) for k, l in enumerate(m.layers) if isinstance(l, MaxPool)]
    assert all(n >= w for n, w in zip(b.branch_not_taken, windows))
    ct = m.with_pool_variant("ct")
    assert update_counts(ct, x) == [w * 9 for w in windows]
    assert np.array_equal(model_forward(ct, x).logits, a.logits)


def test_model_file_roundtrip(tmp_path):
    m = build_custom_cnn((3, 16, 16), 10, 3, "ct")
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back == m
    assert '"format_version": 1' in (tmp_path / "m.json").read_text()


def test_model_spec_rejects_bad_shapes():
    with pytest.raises(ShapeMismatch):
        ModelSpec((Flatten(), dense(np.eye(3), np.zeros(3))), (2, 1, 1), 3)
    with pytest.raises(ShapeMismatch):
        ModelSpec((Flatten(), dense(np.eye(2), np.zeros(2))), (2, 1, 1), 3)


def test_tiny_model_variants_identical_logits():
    x = np.random.default_rng(9).standard_normal((1, 6, 6)).astype(np.float32)
    assert np.array_equal(model_forward(tiny_model(variant="naive"), x).logits,
                          model_forward(tiny_model(variant="ct"), x).logits)
