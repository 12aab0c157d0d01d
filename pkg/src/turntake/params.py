"""Named parameter collections and their deterministic initialisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .encoders import xavier_uniform
from .numcore import Tensor

DTYPES = {"fp32": np.float32, "fp16": np.float16, "fp64": np.float64}


def initialize(name: str, shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Init rule chosen from the parameter's name suffix."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("g",):
        return np.ones(shape, dtype)
    if leaf == "b" and ".lstm." in name:
        h = shape[0] // 4
        b = np.zeros(shape, dtype)
        b[h:2 * h] = 1.0
        return b
    if leaf.startswith("b"):
        return np.zeros(shape, dtype)
    if len(shape) == 3:  # conv [K, in, out]
        return xavier_uniform(rng, shape[0] * shape[1], shape[2], shape, dtype)
    return xavier_uniform(rng, shape[0], shape[1], shape, dtype)


class TouchRecorder(dict):
    """dict that remembers which keys were read."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.touched: set[str] = set()

    def __getitem__(self, key):
        self.touched.add(key)
        return super().__getitem__(key)


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    dtype: str = "fp32"
    # feature scaling statistics; stored alongside weights but never quantised
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def names(self) -> list[str]:
        return list(self.arrays)

    def tensors(self, requires_grad: bool = False, compute_dtype=np.float32) -> TouchRecorder:
        """Leaf tensors for a forward pass; half-precision weights are widened here."""
        out = TouchRecorder()
        for k, a in self.arrays.items():
            arr = a if a.dtype == compute_dtype else a.astype(compute_dtype)
            out[k] = Tensor(arr, requires_grad=requires_grad)
        return out

    def astype(self, dtype: str) -> "ModelParams":
        np_dtype = DTYPES[dtype]
        return ModelParams(self.config, {k: a.astype(np_dtype) for k, a in self.arrays.items()},
                           dtype, dict(self.extras))

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.config, arrays, self.dtype, self.extras)


def init_from_shapes(config: ModelConfig, shapes: dict[str, tuple[int, ...]], seed: int,
                     dtype: str = "fp32") -> ModelParams:
    rng = np.random.default_rng(seed)
    np_dtype = DTYPES[dtype]
    arrays = {name: initialize(name, shape, rng, np_dtype) for name, shape in shapes.items()}
    return ModelParams(config, arrays, dtype)
