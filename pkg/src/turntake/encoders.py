"""Per-modality front end: temporal conv, bidirectional LSTM, sinusoidal positions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Tensor


@dataclass
class SequenceBatch:
    """Padded batch ``data`` [B,S,D]; positions at or past ``lengths[b]`` are padding."""

    data: Tensor
    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.data.ndim != 3:
            raise DimensionError(f"sequence batch must be [B,S,D], got {self.data.shape}")
        if self.lengths.shape != (self.data.shape[0],):
            raise DimensionError(f"lengths {self.lengths.shape} do not match batch {self.data.shape[0]}")
        if np.any(self.lengths < 0) or np.any(self.lengths > self.data.shape[1]):
            raise DimensionError(f"lengths outside [0, {self.data.shape[1]}]")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def seq_len(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.seq_len)[None, :] < self.lengths[:, None]

    def with_data(self, data: Tensor) -> "SequenceBatch":
        return SequenceBatch(data, self.lengths)

    @classmethod
    def full(cls, data: Tensor) -> "SequenceBatch":
        return cls(data, np.full(data.shape[0], data.shape[1]))


@dataclass
class ConvSpec:
    in_dim: int
    out_dim: int
    kernel: int
    weights: Tensor  # [kernel, in_dim, out_dim]
    bias: Tensor

    def __post_init__(self):
        if self.kernel < 1 or (self.kernel > 1 and self.kernel % 2 == 0):
            raise DimensionError(f"kernel must be 1 or odd, got {self.kernel}")
        if self.weights.shape != (self.kernel, self.in_dim, self.out_dim):
            raise DimensionError(f"conv weights {self.weights.shape} do not match "
                                 f"({self.kernel}, {self.in_dim}, {self.out_dim})")

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> "ConvSpec":
        w = params[f"{prefix}.w"]
        return cls(w.shape[1], w.shape[2], w.shape[0], w, params[f"{prefix}.b"])


@dataclass
class BiLstmSpec:
    input_dim: int
    hidden_per_direction: int
    fwd: tuple[Tensor, Tensor, Tensor]  # w_ih, w_hh, b
    bwd: tuple[Tensor, Tensor, Tensor]

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_per_direction

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str) -> "BiLstmSpec":
        fwd = tuple(params[f"{prefix}.fwd.{k}"] for k in ("w_ih", "w_hh", "b"))
        bwd = tuple(params[f"{prefix}.bwd.{k}"] for k in ("w_ih", "w_hh", "b"))
        return cls(fwd[0].shape[0], fwd[1].shape[0], fwd, bwd)


# ----------------------------------------------------------------------------
# initialisation


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ----------------------------------------------------------------------------
# operations


def temporal_conv(x: SequenceBatch, spec: ConvSpec) -> SequenceBatch:
    if x.dim != spec.in_dim:
        raise DimensionError(f"temporal_conv expects width {spec.in_dim}, got {x.dim}")
    out = nc.conv1d(x.data, spec.weights, spec.bias)
    mask = x.mask
    if not mask.all():
        out = nc.mul(out, mask[:, :, None].astype(out.dtype))
    return x.with_data(out)


def _directions(x: SequenceBatch, spec: BiLstmSpec) -> tuple[Tensor, Tensor]:
    if x.dim != spec.input_dim:
        raise DimensionError(f"bilstm expects width {spec.input_dim}, got {x.dim}")
    mask = x.mask
    fwd = nc.lstm(x.data, *spec.fwd, mask=mask, reverse=False)
    bwd = nc.lstm(x.data, *spec.bwd, mask=mask, reverse=True)
    return fwd, bwd


def bilstm_encode(x: SequenceBatch, spec: BiLstmSpec) -> SequenceBatch:
    """Per-timestep [forward; backward] hidden states, width 2*hidden."""
    fwd, bwd = _directions(x, spec)
    return x.with_data(nc.concat([fwd, bwd], axis=-1))


def bilstm_final(x: SequenceBatch, spec: BiLstmSpec) -> Tensor:
    """Final hidden state of each direction, concatenated: [B, 2*hidden].

    The forward direction ends at the last valid step, the backward one at
    step 0. Empty sequences give zeros.
    """
    fwd, bwd = _directions(x, spec)
    rows = np.arange(x.batch)
    last = np.maximum(x.lengths - 1, 0)
    f_last = nc.index(fwd, (rows, last))
    b_first = nc.index(bwd, (rows, np.zeros_like(last)))
    return nc.concat([f_last, b_first], axis=-1)


def sinusoid_table(seq_len: int, width: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, width, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, two_i / width)
    table = np.zeros((seq_len, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : width // 2])
    return table.astype(dtype)


def positional_embedding(x: SequenceBatch) -> SequenceBatch:
    """Add sinusoidal positions to valid timesteps; padding stays untouched."""
    pe = sinusoid_table(x.seq_len, x.dim, x.data.dtype)[None]
    mask = x.mask
    if not mask.all():
        pe = pe * mask[:, :, None]
    return x.with_data(nc.add(x.data, pe))
