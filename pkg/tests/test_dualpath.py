import numpy as np
import pytest

from lafurca.dualpath import BiLSTM, BlockVariant, DualPathBlock, SubBlock, bilstm, group_norm
from lafurca.gradcheck import PRIMITIVE_TOL, check_gradients
from lafurca.tensor import Tensor


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def lstm_oracle(x, w_ih, w_hh, b):
    """Scalar-loop unidirectional LSTM over a (T, I) sequence; gate order i, f, g, o."""
    steps = x.shape[0]
    hidden = w_hh.shape[0]
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    out = np.zeros((steps, hidden))
    for t in range(steps):
        z = np.zeros(4 * hidden)
        for j in range(4 * hidden):
            z[j] = b[j] + sum(x[t, i] * w_ih[i, j] for i in range(x.shape[1])) \
                + sum(h[k] * w_hh[k, j] for k in range(hidden))
        i_g, f_g = sigmoid(z[:hidden]), sigmoid(z[hidden : 2 * hidden])
        g_g, o_g = np.tanh(z[2 * hidden : 3 * hidden]), sigmoid(z[3 * hidden :])
        c = f_g * c + i_g * g_g
        h = o_g * np.tanh(c)
        out[t] = h
    return out


def bilstm_oracle(seq, w_ih, w_hh, b):
    fwd = lstm_oracle(seq, w_ih[0], w_hh[0], b[0])
    bwd = lstm_oracle(seq[::-1], w_ih[1], w_hh[1], b[1])[::-1]
    return np.concatenate([fwd, bwd], axis=1)


def test_bilstm_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    steps, batch, n_in, hidden = 6, 3, 4, 5
    x = rng.normal(size=(steps, batch, n_in))
    w_ih = rng.uniform(-0.5, 0.5, (2, n_in, 4 * hidden))
    w_hh = rng.uniform(-0.5, 0.5, (2, hidden, 4 * hidden))
    b = rng.uniform(-0.5, 0.5, (2, 4 * hidden))
    out = bilstm(Tensor(x), Tensor(w_ih), Tensor(w_hh), Tensor(b)).data
    assert out.shape == (steps, batch, 2 * hidden)
    for j in range(batch):
        np.testing.assert_allclose(out[:, j], bilstm_oracle(x[:, j], w_ih, w_hh, b), atol=1e-12)


def test_bilstm_init():
    m = BiLSTM(3, 4, np.random.default_rng(0), np.float64)
    np.testing.assert_array_equal(m.b.data[:, 4:8], 1.0)
    np.testing.assert_array_equal(m.b.data[:, :4], 0.0)
    assert np.max(np.abs(m.w_hh.data)) <= 0.5
    assert m(np.zeros((7, 3))).shape == (7, 8)


def test_bilstm_single_step():
    rng = np.random.default_rng(1)
    m = BiLSTM(2, 3, rng, np.float64)
    x = rng.normal(size=(1, 2))
    out = m(x).data
    expected = bilstm_oracle(x, m.w_ih.data, m.w_hh.data, m.b.data)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_group_norm_single_group():
    x = np.random.default_rng(2).normal(3.0, 2.0, size=(4, 5, 6))
    out = group_norm(Tensor(x), np.ones((4, 1, 1)), np.zeros((4, 1, 1))).data
    assert abs(out.mean()) < 1e-12
    assert out.var() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        group_norm(Tensor(x), 1.0, 0.0, eps=0.0)


def subblock_oracle(block, x):
    """Flattened per-sequence loops for one sub-block."""
    n, k, c = x.shape
    total = np.zeros_like(x)
    for br in block.branches:
        y = np.zeros_like(x)
        lstm = br.lstm
        if block.axis == "intra":
            for ci in range(c):
                h = bilstm_oracle(x[:, :, ci].T, lstm.w_ih.data, lstm.w_hh.data, lstm.b.data)
                y[:, :, ci] = (h @ br.fc_w.data + br.fc_b.data).T
        else:
            for ki in range(k):
                h = bilstm_oracle(x[:, ki, :].T, lstm.w_ih.data, lstm.w_hh.data, lstm.b.data)
                y[:, ki, :] = (h @ br.fc_w.data + br.fc_b.data).T
        y = (y - y.mean()) / np.sqrt(y.var() + block.eps)
        total += y * br.gn_gain.data + br.gn_bias.data
    return x + total / len(block.branches)


@pytest.mark.parametrize("axis", ["intra", "inter"])
@pytest.mark.parametrize("branches", [1, 3])
def test_subblock_matches_loop_oracle(axis, branches):
    rng = np.random.default_rng(3)
    block = SubBlock(4, 3, axis, rng, branches, np.float64)
    for br in block.branches:
        br.gn_gain.data[:] = rng.uniform(0.5, 1.5, br.gn_gain.shape)
        br.gn_bias.data[:] = rng.uniform(-0.5, 0.5, br.gn_bias.shape)
    x = rng.normal(size=(4, 5, 3))
    np.testing.assert_allclose(block(Tensor(x)).data, subblock_oracle(block, x), atol=1e-10)


@pytest.mark.parametrize("variant", list(BlockVariant))
def test_zero_norm_gain_is_identity(variant):
    rng = np.random.default_rng(4)
    block = DualPathBlock(4, 3, variant, rng, 3, np.float64)
    for sub in (block.intra, block.inter):
        for br in sub.branches:
            br.gn_gain.data[:] = 0.0
    x = rng.normal(size=(4, 6, 3))
    np.testing.assert_allclose(block(Tensor(x)).data, x, atol=1e-12)


def _tie(parallel, serial):
    for name in ("intra", "inter"):
        src = getattr(serial, name).branches[0]
        for br in getattr(parallel, name).branches:
            br.load_state_dict(src.state_dict())


@pytest.mark.parametrize("cross", [False, True])
def test_tied_branches_equal_single_branch(cross):
    rng = np.random.default_rng(5)
    single = DualPathBlock(6, 4, BlockVariant.from_flags(False, cross), rng, 3, np.float64)
    multi = DualPathBlock(6, 4, BlockVariant.from_flags(True, cross), rng, 3, np.float64)
    assert len(multi.intra.branches) == 3 and len(single.intra.branches) == 1
    _tie(multi, single)
    x = rng.normal(size=(6, 5, 4))
    np.testing.assert_allclose(multi(Tensor(x)).data, single(Tensor(x)).data, rtol=0, atol=1e-12)


def test_cross_is_average_of_paths():
    rng = np.random.default_rng(6)
    block = DualPathBlock(4, 3, BlockVariant.CROSS, rng, 1, np.float64)
    x = rng.normal(size=(4, 5, 3))
    expected = 0.5 * (block.intra(Tensor(x)).data + block.inter(Tensor(x)).data)
    np.testing.assert_allclose(block(Tensor(x)).data, expected, atol=1e-12)


def test_serial_is_composition():
    rng = np.random.default_rng(7)
    block = DualPathBlock(4, 3, BlockVariant.SERIAL, rng, 1, np.float64)
    x = rng.normal(size=(4, 5, 3))
    expected = block.inter(block.intra(Tensor(x))).data
    np.testing.assert_allclose(block(Tensor(x)).data, expected, atol=1e-12)


def test_variant_flags():
    assert BlockVariant.from_flags(True, True) is BlockVariant.PARALLEL_CROSS
    assert BlockVariant.PARALLEL_SERIAL.parallel and not BlockVariant.PARALLEL_SERIAL.cross


def test_subblock_rejects_bad_input():
    block = SubBlock(4, 3, "intra", np.random.default_rng(0))
    with pytest.raises(ValueError):
        block(np.zeros((4, 5)))
    with pytest.raises(ValueError):
        SubBlock(4, 3, "diagonal", np.random.default_rng(0))


@pytest.mark.parametrize("variant", list(BlockVariant))
def test_block_gradients(variant):
    rng = np.random.default_rng(8)
    block = DualPathBlock(3, 2, variant, rng, 2, np.float64)
    x = Tensor(rng.normal(size=(3, 4, 3)), requires_grad=True)
    w = rng.normal(size=(3, 4, 3))
    params = {**block.parameters(), "x": x}
    report = check_gradients(lambda: (block(x) * w).sum(), params, n_samples=80, rng=rng)
    assert report.max_rel_err < PRIMITIVE_TOL
    assert not report.zero_grad_params
