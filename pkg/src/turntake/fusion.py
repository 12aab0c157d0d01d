"""Crossmodal transformer fusion, the prediction head, and full-model assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numcore as nc
from .config import MODALITIES, ModelConfig
from .dataio import Batch, WindowSample
from .encoders import (BiLstmSpec, ConvSpec, SequenceBatch, bilstm_encode, bilstm_final,
                       positional_embedding, temporal_conv)
from .numcore import DimensionError, Tensor
from .params import ModelParams, init_from_shapes


class AssemblyError(KeyError):
    pass


def pair_name(source: str, target: str) -> str:
    return f"{source}_to_{target}"


def crossmodal_pairs(modalities: str, targets: str) -> list[tuple[str, str]]:
    """(source, target) pairs, grouped by target; sources follow T, V, A, G order minus self."""
    return [(s, t) for t in targets for s in MODALITIES if s in modalities and s != t]


# ----------------------------------------------------------------------------
# parameter layout


def _lstm_shapes(prefix: str, in_dim: int, hidden: int) -> dict:
    out = {}
    for d in ("fwd", "bwd"):
        out[f"{prefix}.{d}.w_ih"] = (in_dim, 4 * hidden)
        out[f"{prefix}.{d}.w_hh"] = (hidden, 4 * hidden)
        out[f"{prefix}.{d}.b"] = (4 * hidden,)
    return out


def _encoder_shapes(cfg: ModelConfig, m: str, conv_out: int | None = None,
                    with_lstm: bool = True) -> dict:
    conv_out = cfg.d if conv_out is None else conv_out
    shapes = {f"enc.{m}.conv.w": (cfg.kernel(m), cfg.in_dim(m), conv_out),
              f"enc.{m}.conv.b": (conv_out,)}
    if with_lstm:
        shapes.update(_lstm_shapes(f"enc.{m}.lstm", conv_out, cfg.hidden))
    return shapes


def _crossmodal_shapes(prefix: str, width: int, ff_hidden: int, n_layers: int) -> dict:
    shapes = {}
    for i in range(1, n_layers + 1):
        p = f"{prefix}.layer{i}"
        for ln in ("ln_q", "ln_kv", "ln_ff"):
            shapes[f"{p}.{ln}.g"] = (width,)
            shapes[f"{p}.{ln}.b"] = (width,)
        for proj in ("q", "k", "v", "o"):
            shapes[f"{p}.attn.{proj}.w"] = (width, width)
            shapes[f"{p}.attn.{proj}.b"] = (width,)
        shapes[f"{p}.ff.w1"] = (width, ff_hidden)
        shapes[f"{p}.ff.b1"] = (ff_hidden,)
        shapes[f"{p}.ff.w2"] = (ff_hidden, width)
        shapes[f"{p}.ff.b2"] = (width,)
    return shapes


def _fc_shapes(cfg: ModelConfig, in_dim: int) -> dict:
    shapes = {}
    dim = in_dim
    for j in range(1, cfg.head_layers):
        shapes[f"head.fc{j}.w"] = (dim, cfg.head_hidden)
        shapes[f"head.fc{j}.b"] = (cfg.head_hidden,)
        dim = cfg.head_hidden
    shapes[f"head.fc{cfg.head_layers}.w"] = (dim, 1)
    shapes[f"head.fc{cfg.head_layers}.b"] = (1,)
    return shapes


def fused_width(cfg: ModelConfig) -> int:
    n_src = len(cfg.modalities) - 1
    return cfg.bilstm_width * max(n_src, 1)


def ctt_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict = {}
    for m in cfg.modalities:
        shapes.update(_encoder_shapes(cfg, m))
    for s, t in crossmodal_pairs(cfg.modalities, cfg.targets):
        shapes.update(_crossmodal_shapes(f"cm.{pair_name(s, t)}", cfg.bilstm_width,
                                         cfg.transformer_hidden, cfg.n_layers))
    for t in cfg.targets:
        shapes.update(_lstm_shapes(f"head.{t}.lstm", fused_width(cfg), cfg.hidden))
    shapes.update(_fc_shapes(cfg, cfg.bilstm_width * len(cfg.targets)))
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    if cfg.arch == "ctt":
        return ctt_param_shapes(cfg)
    from . import baselines
    return baselines.param_shapes(cfg)


def count_params(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def build_model(config: ModelConfig, seed: int | None = None, dtype: str = "fp32") -> ModelParams:
    """Deterministically initialised parameters for ``config`` (seed defaults to config.seed)."""
    if config.arch != "ctt":
        from . import baselines
        config = baselines.resolve_width(config)
    seed = config.seed if seed is None else seed
    return init_from_shapes(config, param_shapes(config), seed, dtype)


def build_baseline(kind: str, config: ModelConfig, seed: int | None = None) -> ModelParams:
    kinds = {"EF_LSTM": "ef_lstm", "LF_LSTM": "lf_lstm", "MULT": "mult"}
    arch = kinds.get(kind, kind)
    if arch not in kinds.values():
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {sorted(kinds)}")
    return build_model(config.replace(arch=arch, ablation="full"), seed)


# ----------------------------------------------------------------------------
# crossmodal transformer


@dataclass
class CrossmodalBlockParams:
    layers: list[dict[str, Tensor]]
    n_heads: int

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], prefix: str, n_layers: int,
                    n_heads: int) -> "CrossmodalBlockParams":
        keys = ("ln_q.g", "ln_q.b", "ln_kv.g", "ln_kv.b", "ln_ff.g", "ln_ff.b",
                "attn.q.w", "attn.q.b", "attn.k.w", "attn.k.b", "attn.v.w", "attn.v.b",
                "attn.o.w", "attn.o.b", "ff.w1", "ff.b1", "ff.w2", "ff.b2")
        layers = [{k: params[f"{prefix}.layer{i}.{k}"] for k in keys} for i in range(1, n_layers + 1)]
        return cls(layers, n_heads)

    @property
    def width(self) -> int:
        return self.layers[0]["attn.q.w"].shape[0]


def multi_head_attention(q_in: Tensor, kv_in: Tensor, kv_mask: np.ndarray, L: dict[str, Tensor],
                         n_heads: int, dropout: float = 0.0, training: bool = False,
                         rng: np.random.Generator | None = None,
                         probs_out: list | None = None) -> Tensor:
    B, St, w = q_in.shape
    Ss = kv_in.shape[1]
    dh = w // n_heads

    def heads(x, S):
        return nc.transpose(nc.reshape(x, (B, S, n_heads, dh)), (0, 2, 1, 3))

    q = heads(nc.matmul(q_in, L["attn.q.w"]) + L["attn.q.b"], St)
    k = heads(nc.matmul(kv_in, L["attn.k.w"]) + L["attn.k.b"], Ss)
    v = heads(nc.matmul(kv_in, L["attn.v.w"]) + L["attn.v.b"], Ss)
    scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = nc.softmax(scores, mask=kv_mask[:, None, None, :])
    if probs_out is not None:
        probs_out.append(probs.data)
    probs = nc.dropout(probs, dropout, rng, training)
    ctx = nc.reshape(nc.transpose(nc.matmul(probs, v), (0, 2, 1, 3)), (B, St, w))
    return nc.matmul(ctx, L["attn.o.w"]) + L["attn.o.b"]


def crossmodal_forward(target: SequenceBatch, source: SequenceBatch, block: CrossmodalBlockParams,
                       dropout: float = 0.0, training: bool = False,
                       rng: np.random.Generator | None = None, eps: float = 1e-5,
                       probs_out: list | None = None) -> SequenceBatch:
    """Stack of pre-LN cross-attention layers: queries from ``target``, keys/values
    from ``source`` (always its layer-0 representation)."""
    if target.dim != block.width or source.dim != block.width:
        raise DimensionError(f"crossmodal width {block.width} vs target {target.dim} / source {source.dim}")
    src_mask = source.mask
    c = target.data
    for L in block.layers:
        q_in = nc.layer_norm(c, L["ln_q.g"], L["ln_q.b"], eps)
        kv_in = nc.layer_norm(source.data, L["ln_kv.g"], L["ln_kv.b"], eps)
        c_hat = multi_head_attention(q_in, kv_in, src_mask, L, block.n_heads, dropout,
                                     training, rng, probs_out) + q_in
        z = nc.layer_norm(c_hat, L["ln_ff.g"], L["ln_ff.b"], eps)
        hidden = nc.dropout(nc.relu(nc.matmul(z, L["ff.w1"]) + L["ff.b1"]), dropout, rng, training)
        c = nc.matmul(hidden, L["ff.w2"]) + L["ff.b2"] + z
    return target.with_data(c)


def fuse_and_concat(streams: Mapping[tuple[str, str], SequenceBatch],
                    modalities: str = "TVAG", targets: str | None = None) -> dict[str, SequenceBatch]:
    """Concatenate, per target modality, the crossmodal outputs of every other source."""
    targets = modalities if targets is None else targets
    fused = {}
    for t in targets:
        parts = []
        for s in MODALITIES:
            if s == t or s not in modalities:
                continue
            if (s, t) not in streams:
                raise AssemblyError(f"missing crossmodal stream {pair_name(s, t)}")
            parts.append(streams[(s, t)])
        if not parts:
            raise AssemblyError(f"no source streams for target {t}")
        fused[t] = parts[0].with_data(nc.concat([p.data for p in parts], axis=-1))
    return fused


def fc_head(x: Tensor, P: Mapping[str, Tensor], n_layers: int) -> Tensor:
    """Fully-connected layers (ReLU between) ending in a sigmoid; returns [B]."""
    for j in range(1, n_layers + 1):
        x = nc.matmul(x, P[f"head.fc{j}.w"]) + P[f"head.fc{j}.b"]
        if j < n_layers:
            x = nc.relu(x)
    return nc.reshape(nc.sigmoid(x), (x.shape[0],))


def predict_head(fused: Mapping[str, SequenceBatch], P: Mapping[str, Tensor], cfg: ModelConfig,
                 trace: dict | None = None) -> Tensor:
    finals = [bilstm_final(fused[t], BiLstmSpec.from_params(P, f"head.{t}.lstm")) for t in cfg.targets]
    pre = nc.concat(finals, axis=-1)
    if trace is not None:
        trace["pre_head"] = pre.shape
        for t, f in zip(cfg.targets, finals):
            trace[f"final.{t}"] = f.shape
    return fc_head(pre, P, cfg.head_layers)


# ----------------------------------------------------------------------------
# full model


def input_stream(batch: Batch, m: str, dtype) -> SequenceBatch:
    arr = batch.modality(m).astype(dtype, copy=False)
    lengths = batch.text_length if m == "T" else np.full(arr.shape[0], arr.shape[1])
    return SequenceBatch(Tensor(arr), lengths)


def check_inputs(cfg: ModelConfig, batch: Batch) -> None:
    for m in cfg.modalities:
        arr = batch.modality(m)
        want = (cfg.seq_len(m), cfg.in_dim(m))
        if arr.ndim != 3 or arr.shape[1:] != want:
            raise DimensionError(f"stage input.{m}: expected [B, {want[0]}, {want[1]}], got {arr.shape}")


def encode_modality(P, cfg: ModelConfig, x: SequenceBatch, m: str) -> SequenceBatch:
    x = temporal_conv(x, ConvSpec.from_params(P, f"enc.{m}.conv"))
    x = bilstm_encode(x, BiLstmSpec.from_params(P, f"enc.{m}.lstm"))
    return positional_embedding(x)


def ctt_forward(P: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, training: bool = False,
                rng: np.random.Generator | None = None, trace: dict | None = None,
                attention: dict | None = None) -> Tensor:
    dtype = next(iter(P.values())).dtype
    encoded = {}
    for m in cfg.modalities:
        try:
            encoded[m] = encode_modality(P, cfg, input_stream(batch, m, dtype), m)
        except DimensionError as e:
            raise DimensionError(f"stage encoder.{m}: {e}") from e
        if trace is not None:
            trace[f"encoded.{m}"] = encoded[m].data.shape
    pairs = crossmodal_pairs(cfg.modalities, cfg.targets)
    if pairs:
        streams = {}
        for s, t in pairs:
            block = CrossmodalBlockParams.from_params(P, f"cm.{pair_name(s, t)}", cfg.n_layers, cfg.n_heads)
            probs = [] if attention is not None else None
            streams[(s, t)] = crossmodal_forward(encoded[t], encoded[s], block, cfg.dropout,
                                                 training, rng, cfg.ln_eps, probs)
            if attention is not None:
                attention[(s, t)] = probs
        fused = fuse_and_concat(streams, cfg.modalities, cfg.targets)
        if trace is not None:
            trace["n_crossmodal"] = len(streams)
            for (s, t), v in streams.items():
                trace[f"cm.{pair_name(s, t)}"] = v.data.shape
    else:
        fused = {t: encoded[t] for t in cfg.targets}
    if trace is not None:
        for t, v in fused.items():
            trace[f"fused.{t}"] = v.data.shape
    return predict_head(fused, P, cfg, trace)


def forward_batch(params: ModelParams | Mapping[str, Tensor], batch: Batch, cfg: ModelConfig | None = None,
                  training: bool = False, rng: np.random.Generator | None = None,
                  trace: dict | None = None, attention: dict | None = None) -> Tensor:
    """Probabilities [B] that the next second holds a turn-taking opportunity."""
    if isinstance(params, ModelParams):
        cfg = params.config
        P = params.tensors()
    else:
        P = params
    check_inputs(cfg, batch)
    if trace is not None:
        for m in cfg.modalities:
            trace[f"input.{m}"] = batch.modality(m).shape[1:]
    if cfg.arch == "ctt":
        return ctt_forward(P, cfg, batch, training, rng, trace, attention)
    from . import baselines
    return baselines.forward(P, cfg, batch, training, rng, trace)


def predict_proba(params: ModelParams, batch: Batch, chunk: int = 256) -> np.ndarray:
    """Eval-mode probabilities for a (raw, unscaled) batch, using the params' scaling stats."""
    from .dataio import scale_batch
    batch = scale_batch(batch, params.extras)
    P = params.tensors()
    out = []
    with nc.no_grad():
        for lo in range(0, len(batch), chunk):
            out.append(forward_batch(P, batch.take(slice(lo, lo + chunk)), params.config).data)
    return np.concatenate(out) if out else np.zeros(0, np.float32)


def forward(params: ModelParams, sample: WindowSample) -> float:
    return float(predict_proba(params, Batch.from_samples([sample]))[0])
