import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trunet import ops
from trunet.dropout import DropoutSpec
from trunet.errors import ConfigError, ContractError, ShapeError
from trunet.gradcheck import finite_diff_check
from trunet.layers import (FTCA, ConvGRUCell, ConvGRUFTCALayer, ConvGRULayer, DSConvGRULayer,
                           OutputHead, convgru_layer, ftca_aggregate, orthogonal_kernel, zero_state)
from trunet.tensor import Tensor

F64 = np.float64


def rng(seed=0):
    return np.random.default_rng(seed)


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def conv_loop(x, k):
    """Zero-padded 'same' convolution, top/left pad (k-1)//2, for any kernel size."""
    h, w, cin = x.shape
    cout, kh, kw, _ = k.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                s = 0.0
                for u in range(kh):
                    for v in range(kw):
                        ii, jj = i + u - pt, j + v - pl
                        if 0 <= ii < h and 0 <= jj < w:
                            for c in range(cin):
                                s += x[ii, jj, c] * k[o, u, v, c]
                out[i, j, o] = s
    return out


def randomize(module, seed=1, scale=0.5):
    g = rng(seed)
    for p in module.parameters():
        p.data[...] = g.standard_normal(p.shape) * scale


# ---------------------------------------------------------------- ConvGRU cell

def test_cell_zero_fixed_point():
    cell = ConvGRUCell(2, 3, rng=rng(), dtype=F64)
    prev = zero_state(1, (3, 3), 3, F64)
    g = cell.gates(prev, cell.input_projection(Tensor(np.zeros((1, 3, 3, 2)))))
    np.testing.assert_array_equal(g["z"].data, 0.5)
    np.testing.assert_array_equal(g["cand"].data, 0.0)
    np.testing.assert_array_equal(g["A"].data, 0.0)


def test_cell_update_gate_identity():
    cell = ConvGRUCell(2, 3, rng=rng(), dtype=F64)
    prev = Tensor(rng(1).standard_normal((1, 4, 4, 3)))
    x = Tensor(rng(2).standard_normal((1, 4, 4, 2)))
    out = cell.step(prev, cell.input_projection(x), z_override=Tensor(np.ones(prev.shape)))
    np.testing.assert_array_equal(out.data, prev.data)


def test_cell_scalar_oracle():
    cell = ConvGRUCell(1, 1, kernel=(1, 1), rng=rng(), dtype=F64)
    randomize(cell, seed=3, scale=0.8)
    prev = rng(4).standard_normal((2, 2))
    x = rng(5).standard_normal((2, 2))
    out = cell(Tensor(prev[None, :, :, None]), Tensor(x[None, :, :, None])).data[0, :, :, 0]

    w = {k: float(getattr(cell, k).data.reshape(-1)[0]) for k in
         ("W_z", "W_r", "W_a", "U_z", "U_r", "U_a", "b_z", "b_r", "b_a")}
    for i in range(2):
        for j in range(2):
            a, b = prev[i, j], x[i, j]
            z = sig(b * w["W_z"] + a * w["U_z"] + w["b_z"])
            r = sig(b * w["W_r"] + a * w["U_r"] + w["b_r"])
            c = math.tanh(b * w["W_a"] + (r * a) * w["U_a"] + w["b_a"])
            assert out[i, j] == pytest.approx(z * a + (1 - z) * c, rel=1e-12, abs=1e-14)


def test_cell_shape_errors():
    cell = ConvGRUCell(2, 3, rng=rng(), dtype=F64)
    with pytest.raises(ShapeError):
        cell.input_projection(Tensor(np.zeros((1, 3, 3, 4))))
    with pytest.raises(ShapeError):
        cell.step(zero_state(1, (3, 3), 2, F64), Tensor(np.zeros((1, 3, 3, 9))))
    with pytest.raises(ShapeError):
        cell.step(zero_state(1, (4, 4), 3, F64), Tensor(np.zeros((1, 3, 3, 9))))


def test_gates_strictly_inside_unit_interval_and_convex():
    g = rng(7)
    violations = 0
    for seed in range(200):
        cell = ConvGRUCell(2, 2, rng=rng(seed), dtype=F64)
        randomize(cell, seed=seed + 1000, scale=1.0)
        prev = Tensor(g.uniform(-1, 1, (1, 3, 3, 2)))
        out = cell.gates(prev, cell.input_projection(Tensor(g.standard_normal((1, 3, 3, 2)) * 2)))
        for k in ("z", "r"):
            assert (out[k].data > 0).all() and (out[k].data < 1).all()
        lo = np.minimum(prev.data, out["cand"].data)
        hi = np.maximum(prev.data, out["cand"].data)
        violations += int(((out["A"].data < lo) | (out["A"].data > hi)).sum())
    assert violations == 0


def test_orthogonal_kernel_rows():
    k = orthogonal_kernel(rng(), 4, 3, 3).reshape(4, -1)
    np.testing.assert_allclose(k @ k.T, np.eye(4), atol=1e-12)


# ---------------------------------------------------------------- ConvGRU layer

def test_layer_length_one_matches_single_cell():
    layer = ConvGRULayer(2, 3, bidirectional=True, rng=rng(), dtype=F64)
    x = Tensor(rng(1).standard_normal((1, 1, 4, 4, 2)))
    out = layer(x)
    assert out.shape == (1, 1, 4, 4, 6)
    z = zero_state(1, (4, 4), 3, F64)
    np.testing.assert_array_equal(out.data[:, 0, ..., :3], layer.fw(z, x[:, 0]).data)
    np.testing.assert_array_equal(out.data[:, 0, ..., 3:], layer.bw(z, x[:, 0]).data)


def test_layer_matches_unrolled_chain():
    layer = ConvGRULayer(2, 3, bidirectional=True, rng=rng(), dtype=F64)
    x = Tensor(rng(1).standard_normal((2, 4, 4, 4, 2)))
    out = layer(x).data
    a = zero_state(2, (4, 4), 3, F64)
    for t in range(4):
        a = layer.fw(a, x[:, t])
        np.testing.assert_allclose(out[:, t, ..., :3], a.data, rtol=1e-12, atol=1e-14)
    a = zero_state(2, (4, 4), 3, F64)
    for t in reversed(range(4)):
        a = layer.bw(a, x[:, t])
        np.testing.assert_allclose(out[:, t, ..., 3:], a.data, rtol=1e-12, atol=1e-14)


def test_bidirectional_palindrome_symmetry():
    layer = ConvGRULayer(2, 3, bidirectional=True, rng=rng(), dtype=F64)
    for name in ("W_z", "W_r", "W_a", "U_z", "U_r", "U_a", "b_z", "b_r", "b_a"):
        getattr(layer.bw, name).data[...] = getattr(layer.fw, name).data
    half = rng(2).standard_normal((1, 3, 4, 4, 2))
    x = Tensor(np.concatenate([half, half[:, ::-1]], axis=1))
    out = layer(x).data
    np.testing.assert_array_equal(out[:, :, ..., :3], out[:, ::-1, ..., 3:])


def test_unidirectional_channels_and_empty_errors():
    layer = ConvGRULayer(2, 5, rng=rng(), dtype=F64)
    assert layer.out_channels == 5
    assert layer(Tensor(np.zeros((1, 3, 4, 4, 2)))).shape == (1, 3, 4, 4, 5)
    with pytest.raises(ShapeError):
        layer(Tensor(np.zeros((3, 4, 4, 2))))
    with pytest.raises(ContractError):
        convgru_layer(Tensor(np.zeros((3, 4, 4, 2))), layer)


def test_recurrent_mask_fixed_per_sequence():
    spec = DropoutSpec(p_recurrent=0.5, seed=3, mode="train")
    layer = ConvGRULayer(2, 3, rng=rng(), dtype=F64)
    x = Tensor(rng(1).standard_normal((1, 4, 4, 4, 2)))
    out = layer(x, spec.sampler(0)).data
    # replay with the mask drawn up front
    mask = spec.sampler(0).mask("recurrent", (1, 4, 4, 3), F64)
    a = zero_state(1, (4, 4), 3, F64)
    xp = layer.fw.input_projection(x)
    for t in range(4):
        a = layer.fw.step(a, xp[:, t], mask)
        np.testing.assert_array_equal(out[:, t], a.data)


# ---------------------------------------------------------------- FTCA

def ftca_oracle(f: FTCA, prev, window):
    """Explicit-loop evaluation of one FTCA aggregation for a single sample."""
    t_b, h, w, c_b = window.shape
    m = f.pool

    def pool_flat(a):
        hh, ww, cc = a.shape
        out = []
        for i in range(hh // m):
            for j in range(ww // m):
                for c in range(cc):
                    s = 0.0
                    for u in range(m):
                        for v in range(m):
                            s += a[i * m + u, j * m + v, c]
                    out.append(s / (m * m))
        return np.array(out)

    heads = []
    weights = []
    for hd in range(f.heads):
        wq, wk = f.W_Q[hd].data, f.W_K[hd].data
        pq = pool_flat(prev)
        q = [sum(pq[a] * wq[a, o] for a in range(len(pq))) for o in range(f.key_dim)]
        scores = []
        for b in range(t_b):
            pk = pool_flat(window[b])
            k = [sum(pk[a] * wk[a, o] for a in range(len(pk))) + f.a_K.data[b, o] for o in range(f.key_dim)]
            scores.append(sum(q[o] * k[o] for o in range(f.key_dim)) / math.sqrt(f.key_dim))
        mx = max(scores)
        e = [math.exp(s - mx) for s in scores]
        s = [v / sum(e) for v in e]
        weights.append(s)
        acc = np.zeros((h, w, f.value_filters))
        for b in range(t_b):
            vb = conv_loop(window[b], f.W_V1[hd].data)
            acc += s[b] * (vb + f.a_V.data[b])
        heads.append(acc)
    fused = np.concatenate(heads, axis=-1)
    return conv_loop(fused, f.W_V2.data), weights


@pytest.mark.parametrize("heads", [1, 2])
def test_ftca_matches_loop_oracle(heads):
    f = FTCA(3, 2, (2, 2), window=2, heads=heads, pool=2, key_dim=2, value_filters=2,
             out_channels=3, rng=rng(), dtype=F64)
    randomize(f, seed=5, scale=0.7)
    prev = rng(6).standard_normal((1, 2, 2, 3))
    window = rng(7).standard_normal((1, 2, 2, 2, 2))
    out, weights = f.attend(Tensor(prev), f.keys(Tensor(window)), f.values(Tensor(window)))
    ref, ref_w = ftca_oracle(f, prev[0], window[0])
    np.testing.assert_allclose(out.data[0], ref, rtol=1e-10, atol=1e-12)
    for got, exp in zip(weights, ref_w):
        np.testing.assert_allclose(got.data[0, 0], exp, rtol=1e-12)


def test_ftca_larger_oracle():
    f = FTCA(2, 3, (4, 4), window=3, heads=2, pool=2, key_dim=3, value_filters=2,
             rng=rng(), dtype=F64)
    randomize(f, seed=8, scale=0.5)
    prev = rng(9).standard_normal((2, 4, 4, 2))
    window = rng(10).standard_normal((2, 3, 4, 4, 3))
    out = ftca_aggregate(Tensor(prev), Tensor(window), f).data
    for n in range(2):
        ref, _ = ftca_oracle(f, prev[n], window[n])
        np.testing.assert_allclose(out[n], ref, rtol=1e-10, atol=1e-12)


def test_ftca_uniform_attention_with_zero_keys():
    f = FTCA(2, 2, (4, 4), window=4, heads=1, pool=2, key_dim=3, value_filters=2,
             rng=rng(), dtype=F64)
    f.W_K[0].data[...] = 0.0
    f.a_V.data[...] = rng(3).standard_normal(f.a_V.shape)
    prev = Tensor(rng(1).standard_normal((1, 4, 4, 2)))
    window = rng(2).standard_normal((1, 4, 4, 4, 2))
    out, weights = f.attend(prev, f.keys(Tensor(window)), f.values(Tensor(window)))
    np.testing.assert_allclose(weights[0].data, 0.25, rtol=0, atol=1e-15)
    v = np.stack([conv_loop(window[0, b], f.W_V1[0].data) + f.a_V.data[b] for b in range(4)])
    ref = conv_loop(v.mean(axis=0), f.W_V2.data)
    np.testing.assert_allclose(out.data[0], ref, rtol=1e-10, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_ftca_singleton_window_has_unit_weight(seed):
    f = FTCA(2, 2, (2, 2), window=1, heads=2, pool=2, key_dim=2, value_filters=2,
             rng=rng(seed), dtype=F64)
    randomize(f, seed=seed, scale=3.0)
    g = rng(seed + 1)
    prev = Tensor(g.standard_normal((1, 2, 2, 2)) * 5)
    window = g.standard_normal((1, 1, 2, 2, 2))
    out, weights = f.attend(prev, f.keys(Tensor(window)), f.values(Tensor(window)))
    for s in weights:
        assert s.data.reshape(-1)[0] == 1.0
    heads = [conv_loop(window[0, 0], f.W_V1[h].data) + f.a_V.data[0] for h in range(2)]
    ref = conv_loop(np.concatenate(heads, axis=-1), f.W_V2.data)
    np.testing.assert_allclose(out.data[0], ref, rtol=1e-10, atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_ftca_weights_sum_to_one(seed):
    f = FTCA(2, 3, (4, 4), window=5, heads=2, pool=2, key_dim=4, value_filters=2,
             rng=rng(seed), dtype=F64)
    randomize(f, seed=seed, scale=2.0)
    g = rng(seed + 1)
    window = Tensor(g.standard_normal((2, 5, 4, 4, 3)))
    _, weights = f.attend(Tensor(g.standard_normal((2, 4, 4, 2))), f.keys(window), f.values(window))
    for s in weights:
        assert (s.data >= 0).all()
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)


def test_ftca_permutation_equivariance():
    f = FTCA(2, 2, (4, 4), window=4, heads=1, pool=2, key_dim=3, value_filters=2,
             rng=rng(), dtype=F64)
    randomize(f, seed=2, scale=0.7)
    f.a_K.data[...] = 0.0
    f.a_V.data[...] = 0.0
    prev = Tensor(rng(1).standard_normal((1, 4, 4, 2)))
    window = rng(3).standard_normal((1, 4, 4, 4, 2))
    perm = np.array([2, 0, 3, 1])
    _, w1 = f.attend(prev, f.keys(Tensor(window)), f.values(Tensor(window)))
    _, w2 = f.attend(prev, f.keys(Tensor(window[:, perm])), f.values(Tensor(window[:, perm])))
    np.testing.assert_array_equal(w2[0].data[0, 0], w1[0].data[0, 0][perm])


def test_ftca_errors():
    with pytest.raises(ConfigError):
        FTCA(2, 2, (3, 4), window=2, pool=2, rng=rng())
    f = FTCA(2, 2, (4, 4), window=3, pool=2, rng=rng(), dtype=F64)
    with pytest.raises(ContractError):
        ftca_aggregate(zero_state(1, (4, 4), 2, F64), Tensor(np.zeros((1, 2, 4, 4, 2))), f)


def test_ftca_zero_query_on_first_unit():
    layer = ConvGRUFTCALayer(2, 3, 4, (4, 4), key_dim=2, rng=rng(), dtype=F64)
    x = Tensor(rng(1).standard_normal((1, 4, 4, 4, 2)))
    layer(x, keep_weights=True)
    # zero query gives identical scores for every key, hence uniform weights
    np.testing.assert_allclose(layer.last_weights[0][0].data, 0.25, atol=1e-15)


# ---------------------------------------------------------------- ConvGRU + FTCA layer

def test_ftca_layer_contracts_length():
    layer = ConvGRUFTCALayer(2, 3, 4, (4, 4), key_dim=2, bidirectional=True, rng=rng(), dtype=F64)
    out = layer(Tensor(rng(1).standard_normal((1, 8, 4, 4, 2))))
    assert out.shape == (1, 2, 4, 4, 6)
    with pytest.raises(ContractError):
        layer(Tensor(np.zeros((1, 6, 4, 4, 2))))


def test_ftca_layer_matches_manual_composition():
    layer = ConvGRUFTCALayer(2, 3, 4, (4, 4), key_dim=2, value_filters=2, bidirectional=True,
                             rng=rng(), dtype=F64)
    randomize(layer, seed=4, scale=0.5)
    x = Tensor(rng(1).standard_normal((2, 8, 4, 4, 2)))
    out = layer(x).data
    a = zero_state(2, (4, 4), 3, F64)
    for i in range(2):
        bhat = ftca_aggregate(a, x[:, 4 * i:4 * i + 4], layer.fw_ftca)
        a = layer.fw(a, bhat)
        np.testing.assert_allclose(out[:, i, ..., :3], a.data, rtol=1e-12, atol=1e-14)
    a = zero_state(2, (4, 4), 3, F64)
    for i in reversed(range(2)):
        bhat = ftca_aggregate(a, x[:, 4 * i:4 * i + 4], layer.bw_ftca)
        a = layer.bw(a, bhat)
        np.testing.assert_allclose(out[:, i, ..., 3:], a.data, rtol=1e-12, atol=1e-14)


# ---------------------------------------------------------------- dual-state ConvGRU

def _tie_branches(ds: DSConvGRULayer):
    for name in ("W_z", "W_r", "W_a", "U_z", "U_r", "U_a", "b_z", "b_r", "b_a"):
        getattr(ds.branch2, name).data[...] = getattr(ds.branch1, name).data


def test_dsconvgru_duplicate_input_equals_plain_layer():
    ds = DSConvGRULayer(2, 2, 3, rng=rng(), dtype=F64)
    _tie_branches(ds)
    plain = ConvGRULayer(2, 3, rng=rng(), dtype=F64)
    for name in ("W_z", "W_r", "W_a", "U_z", "U_r", "U_a", "b_z", "b_r", "b_a"):
        getattr(plain.fw, name).data[...] = getattr(ds.branch1, name).data
    x = Tensor(rng(1).standard_normal((1, 5, 4, 4, 2)))
    np.testing.assert_array_equal(ds(x, x).data, plain(x).data)


def test_dsconvgru_zero_inputs_give_zero_states():
    ds = DSConvGRULayer(2, 3, 4, rng=rng(), dtype=F64)
    out = ds(Tensor(np.zeros((1, 28, 4, 4, 2))), Tensor(np.zeros((1, 28, 4, 4, 3))))
    assert out.shape == (1, 28, 4, 4, 4)
    np.testing.assert_array_equal(out.data, 0.0)


def test_dsconvgru_two_branch_oracle():
    ds = DSConvGRULayer(2, 3, 2, rng=rng(), dtype=F64)
    randomize(ds, seed=2, scale=0.6)
    x1 = Tensor(rng(3).standard_normal((1, 4, 4, 4, 2)))
    x2 = Tensor(rng(4).standard_normal((1, 4, 4, 4, 3)))
    out = ds(x1, x2).data
    a = zero_state(1, (4, 4), 2, F64)
    for t in range(4):
        a = Tensor((ds.branch1(a, x1[:, t]).data + ds.branch2(a, x2[:, t]).data) / 2)
        np.testing.assert_allclose(out[:, t], a.data, rtol=1e-12, atol=1e-14)


def test_dsconvgru_length_mismatch():
    ds = DSConvGRULayer(2, 2, 2, rng=rng(), dtype=F64)
    with pytest.raises(ContractError):
        ds(Tensor(np.zeros((1, 4, 4, 4, 2))), Tensor(np.zeros((1, 3, 4, 4, 2))))


# ---------------------------------------------------------------- output head

@given(st.integers(0, 10_000), st.floats(0.1, 20.0))
@settings(max_examples=20, deadline=None)
def test_head_ranges(seed, scale):
    x = Tensor(rng(seed).standard_normal((2, 4, 4, 3)) * scale)
    p = OutputHead(3, hidden=4, activation="logistic", rng=rng(seed), dtype=F64)(x)
    y = OutputHead(3, hidden=4, activation="nonneg", rng=rng(seed + 1), dtype=F64)(x)
    assert p.shape == (2, 4, 4)
    assert (p.data > 0).all() and (p.data < 1).all()
    assert (y.data >= 0).all()


def test_head_zero_weights():
    x = Tensor(rng().standard_normal((1, 4, 4, 3)))
    for act, expected in (("logistic", 0.5), ("nonneg", math.log(2.0))):
        head = OutputHead(3, activation=act, rng=rng(), dtype=F64)
        for p in head.parameters():
            p.data[...] = 0.0
        np.testing.assert_allclose(head(x).data, expected, rtol=1e-15)
    with pytest.raises(ConfigError):
        OutputHead(3, activation="linear", rng=rng())
    with pytest.raises(ShapeError):
        OutputHead(3, rng=rng())(Tensor(np.zeros((1, 4, 4, 2))))


def test_parameter_names_unique():
    layer = ConvGRUFTCALayer(2, 3, 2, (4, 4), heads=2, key_dim=2, bidirectional=True, rng=rng())
    names = layer.named_parameters()
    assert "convgru_ftca.fw.ftca.W_Q1" in names and "convgru_ftca.bw.U_a" in names


# ---------------------------------------------------------------- gradients

# Reset-gate entries of composite layers can be ~1e-5 while central-difference
# roundoff is ~1e-10, so entries below this floor are compared absolutely.
FLOOR = 1e-4

def _weighted(out, seed=0):
    wts = Tensor(rng(seed).standard_normal(out.shape))
    return ops.sum(ops.mul(out, wts))


def test_fd_convgru_layer():
    layer = ConvGRULayer(2, 2, bidirectional=True, rng=rng(), dtype=F64)
    x = Tensor(rng(1).standard_normal((1, 3, 3, 3, 2)))
    wts = Tensor(rng(2).standard_normal((1, 3, 3, 3, 4)))
    report = finite_diff_check(lambda: ops.sum(ops.mul(layer(x), wts)), layer.parameters())
    assert report.passed, report.format()


def test_fd_ftca_layer():
    layer = ConvGRUFTCALayer(2, 2, 2, (4, 4), heads=2, key_dim=2, value_filters=2,
                             bidirectional=True, rng=rng(), dtype=F64)
    randomize(layer, seed=3, scale=0.5)
    x = Tensor(rng(1).standard_normal((1, 4, 4, 4, 2)))
    wts = Tensor(rng(2).standard_normal((1, 2, 4, 4, 4)))
    report = finite_diff_check(lambda: ops.sum(ops.mul(layer(x), wts)), layer.parameters(), floor=FLOOR)
    assert report.passed, report.format()


def test_fd_dsconvgru_and_heads():
    ds = DSConvGRULayer(2, 3, 2, rng=rng(), dtype=F64)
    head_p = OutputHead(2, hidden=3, activation="logistic", rng=rng(1), dtype=F64)
    head_y = OutputHead(2, hidden=3, activation="nonneg", rng=rng(2), dtype=F64)
    x1 = Tensor(rng(3).standard_normal((1, 3, 3, 3, 2)))
    x2 = Tensor(rng(4).standard_normal((1, 3, 3, 3, 3)))

    def loss():
        z = ds(x1, x2)
        return ops.add(_weighted(head_p(z), 5), _weighted(head_y(z), 6))

    params = ds.parameters() + head_p.parameters() + head_y.parameters()
    report = finite_diff_check(loss, params, floor=FLOOR)
    assert report.passed, report.format()


def test_fd_input_gradient_through_ftca():
    f = FTCA(2, 2, (4, 4), window=3, heads=1, pool=2, key_dim=2, value_filters=2, rng=rng(), dtype=F64)
    randomize(f, seed=2, scale=0.5)
    from trunet.tensor import Parameter
    prev = Parameter(rng(3).standard_normal((1, 4, 4, 2)), name="prev")
    window = Parameter(rng(4).standard_normal((1, 3, 4, 4, 2)), name="window")
    report = finite_diff_check(lambda: _weighted(f(prev, window), 7), [prev, window])
    assert report.passed, report.format()
