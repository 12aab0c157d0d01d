"""Model files, fp16 weight quantization and latency benchmarking."""

from __future__ import annotations

import io
import json
import logging
import os
import platform
import struct
import tempfile
import time
import warnings
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import ModelConfig
from .dataio import AUDIO_DIM, GAME_DIM, TEXT_DIM, TEXT_SEQ, VISION_DIM, WINDOW, Batch
from .params import ModelParams

log = logging.getLogger(__name__)

MODEL_MAGIC = b"CTTM"
MODEL_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
CODE_OF = {"fp32": 0, "fp16": 1}
FP16_MAX = float(np.finfo(np.float16).max)


class ModelFileError(ValueError):
    """Structurally invalid or truncated model file."""


class BadMagicError(ModelFileError):
    pass


class VersionError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class QuantizationWarning(UserWarning):
    pass


def _tensor_record(name: str, arr: np.ndarray, code: int) -> bytes:
    raw = name.encode("utf-8")
    data = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code])
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", code, data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + data.tobytes()


def encode_model(params: ModelParams, extra: Mapping[str, np.ndarray] | None = None,
                 meta: Mapping | None = None) -> bytes:
    """Serialize weights (in their own precision), scaling stats and any extra fp32 tensors."""
    header = {"config": params.config.to_dict(), "dtype": params.dtype}
    if meta:
        header["meta"] = dict(meta)
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    code = CODE_OF[params.dtype] if params.dtype in CODE_OF else None
    if code is None:
        raise ValueError(f"cannot serialize {params.dtype} weights")
    body = io.BytesIO()
    records = [(k, a, code) for k, a in params.arrays.items()]
    records += [(k, a, 0) for k, a in sorted(params.extras.items())]
    records += [(k, a, 0) for k, a in sorted((extra or {}).items())]
    body.write(struct.pack("<I", len(hjson)) + hjson)
    body.write(struct.pack("<I", len(records)))
    for name, arr, c in records:
        body.write(_tensor_record(name, arr, c))
    payload = body.getvalue()
    return (MODEL_MAGIC + struct.pack("<I", MODEL_VERSION) + payload
            + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def decode_model(blob: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, tuple[int, np.ndarray]]]:
    if len(blob) < 12 or blob[:4] != MODEL_MAGIC:
        raise BadMagicError(f"{source}: not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != MODEL_VERSION:
        raise VersionError(f"{source}: model file version {version}, this build reads {MODEL_VERSION}")
    payload, (crc,) = blob[8:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{source}: checksum mismatch")
    try:
        off = 0
        (hlen,) = struct.unpack_from("<I", payload, off)
        off += 4
        header = json.loads(payload[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", payload, off)
        off += 4
        tensors: dict[str, tuple[int, np.ndarray]] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", payload, off)
            off += 4
            name = payload[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BI", payload, off)
            off += 5
            dims = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            dt = DTYPE_CODES[code]
            n = int(np.prod(dims, dtype=np.int64))
            if off + n * dt.itemsize > len(payload):
                raise ModelFileError(f"{source}: tensor {name!r} runs past the end of the file")
            arr = np.frombuffer(payload, dt, n, off).reshape(dims).astype(dt.newbyteorder("="))
            off += n * dt.itemsize
            tensors[name] = (code, arr)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise ModelFileError(f"{source}: malformed model file ({e})") from e
    if off != len(payload):
        raise ModelFileError(f"{source}: {len(payload) - off} trailing bytes")
    return header, tensors


def save_model(path, params: ModelParams, extra: Mapping[str, np.ndarray] | None = None,
               meta: Mapping | None = None) -> int:
    blob = encode_model(params, extra, meta)
    Path(path).write_bytes(blob)
    return len(blob)


def _split_tensors(header: dict, tensors: dict, source: str):
    cfg = ModelConfig.from_dict(header["config"])
    dtype = header["dtype"]
    arrays, extras, other = {}, {}, {}
    for name, (code, arr) in tensors.items():
        if name.startswith("norm."):
            extras[name] = arr
        elif "." in name and name.split(".", 1)[0] in ("adam",):
            other[name] = arr
        else:
            if code != CODE_OF[dtype]:
                raise ModelFileError(f"{source}: weight {name!r} stored as code {code}, header says {dtype}")
            arrays[name] = arr
    return ModelParams(cfg, arrays, dtype, extras), other


def load_model(path) -> ModelParams:
    header, tensors = decode_model(Path(path).read_bytes(), str(path))
    params, _ = _split_tensors(header, tensors, str(path))
    return params


def load_model_with_extras(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    header, tensors = decode_model(Path(path).read_bytes(), str(path))
    params, other = _split_tensors(header, tensors, str(path))
    return params, other, header.get("meta", {})


def expected_file_size(params: ModelParams, meta: Mapping | None = None) -> int:
    header = {"config": params.config.to_dict(), "dtype": params.dtype}
    if meta:
        header["meta"] = dict(meta)
    hlen = len(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    width = 2 if params.dtype == "fp16" else 4
    size = 4 + 4 + 4 + hlen + 4 + 4
    for name, arr in params.arrays.items():
        size += 4 + len(name.encode()) + 1 + 4 + 4 * arr.ndim + width * arr.size
    for name, arr in params.extras.items():
        size += 4 + len(name.encode()) + 1 + 4 + 4 * arr.ndim + 4 * arr.size
    return size


def quantize_fp16(params: ModelParams, counts: dict | None = None) -> ModelParams:
    """Round every weight to the nearest half (ties to even); scaling stats stay fp32."""
    if params.dtype != "fp32":
        raise ValueError(f"quantize_fp16 expects fp32 weights, got {params.dtype}")
    arrays = {}
    saturated = 0
    for name, a in params.arrays.items():
        over = np.abs(a) > FP16_MAX
        if over.any():
            saturated += int(over.sum())
            a = np.clip(a, -FP16_MAX, FP16_MAX)
        arrays[name] = a.astype(np.float16)
    if saturated:
        warnings.warn(f"{saturated} weights exceed the fp16 range and were saturated", QuantizationWarning)
    if counts is not None:
        counts["saturated"] = saturated
    return ModelParams(params.config, arrays, "fp16", dict(params.extras))


def machine_info() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "cpus": os.cpu_count(), "python": platform.python_version(), "numpy": np.__version__}


def random_windows(n: int, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, TEXT_SEQ + 1, n)
    text = rng.normal(0, 1 / np.sqrt(TEXT_DIM), (n, TEXT_SEQ, TEXT_DIM)).astype(np.float32)
    for i, L in enumerate(lengths):
        text[i, L:] = 0
    return Batch(text, lengths, rng.random((n, WINDOW, VISION_DIM), np.float32),
                 rng.random((n, 2 * WINDOW, AUDIO_DIM), np.float32),
                 rng.random((n, WINDOW, GAME_DIM), np.float32), np.ones(n, np.int64))


def bench_inference(params: ModelParams, n_windows: int = 20, repetitions: int = 5,
                    warmup: int = 3, seed: int = 0) -> dict:
    """Wall-clock latency of single-window forwards, plus the serialized size."""
    from .fusion import predict_proba

    windows = random_windows(n_windows, seed)
    singles = [windows.take(slice(i, i + 1)) for i in range(n_windows)]
    for i in range(warmup):
        predict_proba(params, singles[i % n_windows])
    times = []
    for _ in range(repetitions):
        for w in singles:
            t0 = time.perf_counter()
            predict_proba(params, w)
            times.append((time.perf_counter() - t0) * 1000.0)
    with tempfile.TemporaryDirectory() as tmp:
        size = save_model(Path(tmp) / "m.cttm", params)
    ms = np.array(times)
    return {"p50_ms": float(np.percentile(ms, 50)), "p95_ms": float(np.percentile(ms, 95)),
            "mean_ms": float(ms.mean()), "runs": len(times), "file_bytes": size,
            "dtype": params.dtype, "params": params.count(), "machine": machine_info()}
