"""Comparison architectures: early fusion LSTM, late fusion LSTM and a crossmodal
transformer without recurrent stages.

Each baseline has one capacity knob (``baseline_width``): the EF-LSTM recurrent
width, the LF-LSTM convolution width, or the MULT feed-forward width. Leaving it
at 0 picks the value whose parameter count is closest to the main model's.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import numcore as nc
from .config import MODALITIES, ModelConfig
from .dataio import Batch
from .encoders import (BiLstmSpec, ConvSpec, SequenceBatch, bilstm_final, positional_embedding,
                       temporal_conv)
from .fusion import (CrossmodalBlockParams, _crossmodal_shapes, _encoder_shapes, _fc_shapes,
                     _lstm_shapes, count_params, crossmodal_forward, crossmodal_pairs, fc_head,
                     fuse_and_concat, input_stream, pair_name)
from .numcore import Tensor

PARITY_TOLERANCE = 0.15


def _width(cfg: ModelConfig) -> int:
    if cfg.baseline_width <= 0:
        raise ValueError("baseline width unresolved; call resolve_width first")
    return cfg.baseline_width


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    w = _width(cfg)
    shapes: dict = {}
    if cfg.arch == "ef_lstm":
        for m in MODALITIES:
            shapes.update(_encoder_shapes(cfg, m, with_lstm=False))
        shapes.update(_lstm_shapes("ef.lstm", len(MODALITIES) * cfg.d, w))
        shapes.update(_fc_shapes(cfg, 2 * w))
    elif cfg.arch == "lf_lstm":
        for m in MODALITIES:
            shapes.update(_encoder_shapes(cfg, m, conv_out=w))
        shapes.update(_fc_shapes(cfg, len(MODALITIES) * cfg.bilstm_width))
    elif cfg.arch == "mult":
        for m in MODALITIES:
            shapes.update(_encoder_shapes(cfg, m, conv_out=cfg.bilstm_width, with_lstm=False))
        for s, t in crossmodal_pairs("TVAG", "TVAG"):
            shapes.update(_crossmodal_shapes(f"cm.{pair_name(s, t)}", cfg.bilstm_width, w, cfg.n_layers))
        shapes.update(_fc_shapes(cfg, len(MODALITIES) * 3 * cfg.bilstm_width))
    else:
        raise ValueError(f"unknown baseline arch {cfg.arch!r}")
    return shapes


def resolve_width(cfg: ModelConfig) -> ModelConfig:
    """Fill in ``baseline_width`` so the parameter count matches the main model."""
    if cfg.arch == "ctt" or cfg.baseline_width > 0:
        return cfg
    target = count_params(cfg.replace(arch="ctt", ablation="full", baseline_width=0))

    def count(w):
        return count_params(cfg.replace(baseline_width=w))

    lo, hi = 1, 1
    while count(hi) < target:
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(mid) < target:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda w: abs(count(w) - target))
    return cfg.replace(baseline_width=best)


def resample_indices(lengths: np.ndarray, seq_len: int, grid: int) -> np.ndarray:
    """Nearest-neighbour map from ``grid`` points onto each sample's valid prefix."""
    lengths = np.asarray(lengths)
    j = np.arange(grid)[None, :] + 0.5
    idx = np.floor(j * lengths[:, None] / grid).astype(np.int64)
    return np.clip(idx, 0, max(seq_len - 1, 0))


def _masked_mean(x: SequenceBatch) -> Tensor:
    mask = x.mask.astype(x.data.dtype)
    denom = np.maximum(x.lengths, 1).astype(x.data.dtype)[:, None]
    summed = nc.reduce_sum(nc.mul(x.data, mask[:, :, None]), axis=1)
    return nc.mul(summed, 1.0 / denom)


def forward(P: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, training: bool = False,
            rng: np.random.Generator | None = None, trace: dict | None = None) -> Tensor:
    dtype = next(iter(P.values())).dtype
    streams = {m: input_stream(batch, m, dtype) for m in MODALITIES}
    convs = {m: temporal_conv(streams[m], ConvSpec.from_params(P, f"enc.{m}.conv")) for m in MODALITIES}

    if cfg.arch == "ef_lstm":
        grid = cfg.seq_audio
        parts = []
        for m in MODALITIES:
            x = convs[m]
            idx = resample_indices(x.lengths, x.seq_len, grid)
            g = nc.index(x.data, (np.arange(x.batch)[:, None], idx))
            if np.any(x.lengths == 0):
                g = nc.mul(g, (x.lengths > 0).astype(dtype)[:, None, None])
            parts.append(g)
        joint = SequenceBatch.full(nc.concat(parts, axis=-1))
        if trace is not None:
            trace["ef.concat"] = joint.data.shape
        pre = bilstm_final(joint, BiLstmSpec.from_params(P, "ef.lstm"))
    elif cfg.arch == "lf_lstm":
        finals = [bilstm_final(convs[m], BiLstmSpec.from_params(P, f"enc.{m}.lstm")) for m in MODALITIES]
        pre = nc.concat(finals, axis=-1)
    elif cfg.arch == "mult":
        encoded = {m: positional_embedding(convs[m]) for m in MODALITIES}
        out = {}
        for s, t in crossmodal_pairs("TVAG", "TVAG"):
            block = CrossmodalBlockParams.from_params(P, f"cm.{pair_name(s, t)}", cfg.n_layers, cfg.n_heads)
            out[(s, t)] = crossmodal_forward(encoded[t], encoded[s], block, cfg.dropout, training, rng,
                                             cfg.ln_eps)
        fused = fuse_and_concat(out)
        pre = nc.concat([_masked_mean(fused[t]) for t in MODALITIES], axis=-1)
    else:
        raise ValueError(f"unknown baseline arch {cfg.arch!r}")
    if trace is not None:
        trace["pre_head"] = pre.shape
    return fc_head(pre, P, cfg.head_layers)
