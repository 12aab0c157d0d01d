import numpy as np
import pytest
from hypothesis import given, strategies as st

from turntake import numcore as nc
from turntake.encoders import (BiLstmSpec, ConvSpec, SequenceBatch, bilstm_encode, bilstm_final,
                               positional_embedding, sinusoid_table, temporal_conv)
from turntake.numcore import DimensionError, Tensor


def _lstm_params(rng, in_dim, hidden, prefix="l"):
    P = {}
    for d in ("fwd", "bwd"):
        P[f"{prefix}.{d}.w_ih"] = Tensor(rng.normal(0, 0.3, (in_dim, 4 * hidden)))
        P[f"{prefix}.{d}.w_hh"] = Tensor(rng.normal(0, 0.3, (hidden, 4 * hidden)))
        P[f"{prefix}.{d}.b"] = Tensor(rng.normal(0, 0.1, (4 * hidden,)))
    return BiLstmSpec.from_params(P, prefix)


def test_sinusoid_table_values():
    table = sinusoid_table(4, 6)
    assert table[0, 0] == 0.0 and table[0, 1] == 1.0
    np.testing.assert_allclose(table[3, 0], np.sin(3.0))
    np.testing.assert_allclose(table[2, 3], np.cos(2.0 / 10000 ** (2 / 6)))
    np.testing.assert_allclose(table[1, 4], np.sin(1.0 / 10000 ** (4 / 6)))


def test_positional_embedding_skips_padding():
    x = SequenceBatch(Tensor(np.zeros((2, 3, 4))), np.array([3, 1]))
    out = positional_embedding(x).data.data
    np.testing.assert_allclose(out[0], sinusoid_table(3, 4))
    assert np.all(out[1, 1:] == 0)


@given(st.integers(1, 4), st.integers(1, 6), st.sampled_from([1, 3, 5]))
def test_temporal_conv_shape_and_mask(batch, seq, k):
    rng = np.random.default_rng(batch * 31 + seq)
    lengths = rng.integers(0, seq + 1, batch)
    x = SequenceBatch(Tensor(rng.normal(size=(batch, seq, 5))), lengths)
    spec = ConvSpec(5, 3, k, Tensor(rng.normal(size=(k, 5, 3))), Tensor(rng.normal(size=3)))
    out = temporal_conv(x, spec)
    assert out.data.shape == (batch, seq, 3)
    assert np.all(out.data.data[~x.mask] == 0)


def test_conv_spec_validates_shapes():
    with pytest.raises(DimensionError):
        ConvSpec(4, 2, 1, Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros(2)))
    with pytest.raises(DimensionError):
        ConvSpec(4, 2, 2, Tensor(np.zeros((2, 4, 2))), Tensor(np.zeros(2)))


def test_bilstm_widths():
    rng = np.random.default_rng(0)
    spec = _lstm_params(rng, 4, 3)
    x = SequenceBatch(Tensor(rng.normal(size=(2, 5, 4))), np.array([5, 2]))
    assert bilstm_encode(x, spec).data.shape == (2, 5, 6)
    assert bilstm_final(x, spec).shape == (2, 6)
    assert spec.output_dim == 6


def test_bilstm_final_reads_last_valid_forward_and_first_backward():
    rng = np.random.default_rng(1)
    spec = _lstm_params(rng, 3, 2)
    x = SequenceBatch(Tensor(rng.normal(size=(1, 4, 3))), np.array([3]))
    seq = bilstm_encode(x, spec).data.data
    final = bilstm_final(x, spec).data
    np.testing.assert_array_equal(final[0, :2], seq[0, 2, :2])
    np.testing.assert_array_equal(final[0, 2:], seq[0, 0, 2:])


def test_bilstm_final_ignores_padding_content():
    rng = np.random.default_rng(2)
    spec = _lstm_params(rng, 3, 2)
    data = rng.normal(size=(1, 4, 3))
    other = data.copy()
    other[0, 2:] = 100.0
    a = bilstm_final(SequenceBatch(Tensor(data), np.array([2])), spec).data
    b = bilstm_final(SequenceBatch(Tensor(other), np.array([2])), spec).data
    np.testing.assert_array_equal(a, b)


def test_bilstm_final_grad():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(2, 3, 2))
    names = [f"l.{d}.{k}" for d in ("fwd", "bwd") for k in ("w_ih", "w_hh", "b")]
    P0 = _lstm_params(rng, 2, 2)
    arrays = [x0] + [t.data for t in (*P0.fwd, *P0.bwd)]

    def f(x, *ws):
        P = dict(zip(names, ws))
        spec = BiLstmSpec.from_params(P, "l")
        out = bilstm_final(SequenceBatch(x, np.array([3, 2])), spec)
        return nc.reduce_sum(nc.pow_scalar(out, 2))

    assert nc.grad_check(f, arrays) < 1e-5


def test_sequence_batch_rejects_bad_lengths():
    with pytest.raises(DimensionError):
        SequenceBatch(Tensor(np.zeros((2, 3, 1))), np.array([4, 1]))
    with pytest.raises(DimensionError):
        SequenceBatch(Tensor(np.zeros((2, 3))), np.array([1, 1]))
