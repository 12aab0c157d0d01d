"""Model/training hyperparameters and ablation definitions."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

MODALITIES = ("T", "V", "A", "G")
MODALITY_NAMES = {"T": "text", "V": "vision", "A": "audio", "G": "game"}
ARCHS = ("ctt", "ef_lstm", "lf_lstm", "mult")

# mode -> (modalities encoded, target modalities feeding the head)
ABLATIONS: dict[str, tuple[str, str]] = {
    "full": ("TVAG", "TVAG"),
    "text_only": ("T", "T"),
    "vision_only": ("V", "V"),
    "audio_only": ("A", "A"),
    "game_only": ("G", "G"),
    "only_to_T": ("TVAG", "T"),
    "only_to_V": ("TVAG", "V"),
    "only_to_A": ("TVAG", "A"),
    "only_to_G": ("TVAG", "G"),
    "without_game": ("TVA", "TVA"),
}

# display labels for ablation reports, in row order
ABLATION_ROWS: dict[str, str] = {
    "text_only": "Text only",
    "vision_only": "Vision only",
    "audio_only": "Audio only",
    "game_only": "In-game only",
    "only_to_T": "Only[V, A, G → T]",
    "only_to_V": "Only[T, A, G → V]",
    "only_to_A": "Only[T, V, G → A]",
    "only_to_G": "Only[T, V, A → G]",
    "without_game": "Without In-game",
    "full": "Ours (full)",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    optimizer: str = "adam"
    batch_size: int = 64
    lr: float = 5e-5
    seq_text: int = 35
    seq_vision: int = 5
    seq_audio: int = 10
    seq_game: int = 5
    dim_text: int = 768
    dim_vision: int = 128
    dim_audio: int = 65
    dim_game: int = 40
    d: int = 32
    transformer_hidden: int = 128
    n_layers: int = 3
    n_heads: int = 8
    kernel_text: int = 1
    kernel_vision: int = 1
    kernel_audio: int = 1
    kernel_game: int = 1
    dropout: float = 0.1
    # bidirectional output width (2d); each direction gets half
    bilstm_width: int = 64
    epochs: int = 30
    focal_gamma: float = 2.0
    focal_alpha: float = 0.3
    threshold: float = 0.5
    seed: int = 0
    head_layers: int = 1
    head_hidden: int = 64
    arch: str = "ctt"
    ablation: str = "full"
    # baseline capacity knob; 0 picks the width matching the main model's size
    baseline_width: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        errors = self.problems()
        if errors:
            raise ConfigError("invalid config: " + "; ".join(errors))

    def problems(self) -> list[str]:
        errs = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and f.name not in ("seed", "baseline_width", "dropout") and not v > 0:
                errs.append(f"{f.name} must be positive (got {v})")
        if self.seed < 0:
            errs.append("seed must be non-negative")
        if self.baseline_width < 0:
            errs.append("baseline_width must be >= 0")
        if self.bilstm_width % 2:
            errs.append(f"bilstm_width must be even (got {self.bilstm_width})")
        if self.n_heads > 0 and self.bilstm_width % self.n_heads:
            errs.append(f"n_heads={self.n_heads} must divide stream width {self.bilstm_width}")
        for m in MODALITIES:
            k = self.kernel(m)
            if k > 1 and k % 2 == 0:
                errs.append(f"kernel for {m} must be 1 or odd (got {k})")
        if not 0.0 <= self.dropout < 1.0:
            errs.append(f"dropout must be in [0,1) (got {self.dropout})")
        if not 0.0 < self.focal_alpha < 1.0:
            errs.append(f"focal_alpha must be in (0,1) (got {self.focal_alpha})")
        if not 0.0 < self.threshold < 1.0:
            errs.append(f"threshold must be in (0,1) (got {self.threshold})")
        if self.arch not in ARCHS:
            errs.append(f"arch must be one of {ARCHS} (got {self.arch!r})")
        if self.ablation not in ABLATIONS:
            errs.append(f"ablation must be one of {tuple(ABLATIONS)} (got {self.ablation!r})")
        if self.arch != "ctt" and self.ablation != "full":
            errs.append("ablations apply to the ctt architecture only")
        if self.optimizer != "adam":
            errs.append(f"only the adam optimizer is supported (got {self.optimizer!r})")
        return errs

    # per-modality lookups
    def seq_len(self, m: str) -> int:
        return getattr(self, f"seq_{MODALITY_NAMES[m]}")

    def in_dim(self, m: str) -> int:
        return getattr(self, f"dim_{MODALITY_NAMES[m]}")

    def kernel(self, m: str) -> int:
        return getattr(self, f"kernel_{MODALITY_NAMES[m]}")

    @property
    def hidden(self) -> int:
        return self.bilstm_width // 2

    @property
    def modalities(self) -> str:
        return ABLATIONS[self.ablation][0]

    @property
    def targets(self) -> str:
        return ABLATIONS[self.ablation][1]

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, pairs: dict[str, str]) -> "ModelConfig":
        """Apply string-valued overrides, coercing to each field's type."""
        types = {f.name: f.type for f in fields(self)}
        kw = {}
        for k, v in pairs.items():
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            t = types[k]
            try:
                kw[k] = int(v) if t == "int" else float(v) if t == "float" else str(v)
            except ValueError as e:
                raise ConfigError(f"bad value for {k}: {v!r}") from e
        return self.replace(**kw)


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ModelConfig:
    cfg = ModelConfig()
    if path is not None:
        text = Path(path).read_text()
        pairs = {k: str(v) for k, v in json.loads(text).items()} if text.lstrip().startswith("{") else parse_kv(text)
        cfg = cfg.with_overrides(pairs)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


# d=4 with the other widths scaled to match; input dims stay at the data's.
TINY_WIDTHS = dict(d=4, bilstm_width=8, transformer_hidden=16, n_layers=1, n_heads=2)


def tiny_config(**kw) -> ModelConfig:
    """Small widths and short sequences for gradient checks and fast tests."""
    base = dict(seq_text=3, seq_vision=3, seq_audio=3, seq_game=3,
                dim_text=6, dim_vision=5, dim_audio=4, dim_game=3,
                d=4, bilstm_width=8, transformer_hidden=8, n_layers=1, n_heads=2)
    base.update(kw)
    return ModelConfig(**base)
