"""Feature streams, utterance logs, window datasets and their file formats.

Feature stream and utterance log files are newline-delimited JSON records.
Window datasets use a little-endian binary container::

    b"CTTK" | u32 version=1 | u32 count |
    count x ( u8 label | u32 text_length | f32[35*768] | f32[5*128] | f32[10*65] | f32[5*40] )

Text sidecars (precomputed 35x768 text blocks keyed by window end) use::

    b"CTTT" | u32 version=1 | u32 count | count x ( u32 t_end | u32 text_length | f32[35*768] )
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .labeling import LabeledWindow, UtteranceEvent

log = logging.getLogger(__name__)

TEXT_SEQ, TEXT_DIM = 35, 768
VISION_DIM, AUDIO_DIM, GAME_DIM = 128, 65, 40
WINDOW = 5
AUDIO_PER_SECOND = 2

DATASET_MAGIC = b"CTTK"
SIDECAR_MAGIC = b"CTTT"
FORMAT_VERSION = 1

BLOCKS = (("text", (TEXT_SEQ, TEXT_DIM)), ("vision", (WINDOW, VISION_DIM)),
          ("audio", (WINDOW * AUDIO_PER_SECOND, AUDIO_DIM)), ("game", (WINDOW, GAME_DIM)))

# ----------------------------------------------------------------------------
# game state encoding

PHASES = ("day", "dusk", "night")
ITEMS = ("none", "axe", "pickaxe", "torch", "spear", "log", "twigs", "flint", "rocks",
         "grass", "berries", "carrot")
TARGETS = ("none", "spider", "hound", "beefalo", "pig", "frog", "tree", "boulder")

ENTITY_FIELDS = ("hunger", "health", "sanity", "xloc", "zloc", "inv_count", "active_item",
                 "equip_hands", "attack_target", "defense_target", "recent_attacked", "food",
                 "is_light", "monster_num", "twig", "flint", "log", "rock", "grass")
GAME_FIELDS = ("phase", "distance") + tuple(f"{who}.{f}" for who in ("avatar", "player")
                                            for f in ENTITY_FIELDS)
CATEGORICAL = {"phase": PHASES, "active_item": ITEMS, "equip_hands": ITEMS,
               "attack_target": TARGETS, "defense_target": TARGETS}
assert len(GAME_FIELDS) == GAME_DIM


class SchemaError(ValueError):
    pass


class FormatError(ValueError):
    pass


def encode_game_state(state: Mapping[str, object]) -> np.ndarray:
    """Flatten a game-state record into 40 numbers; categorical fields become table indices."""
    out = np.zeros(GAME_DIM, np.float32)
    for i, name in enumerate(GAME_FIELDS):
        if name not in state:
            raise SchemaError(f"game state missing field {name!r}")
        v = state[name]
        table = CATEGORICAL.get(name.split(".")[-1])
        if table is not None:
            if v not in table:
                raise SchemaError(f"{name}: unknown category {v!r}")
            v = table.index(v)
        out[i] = float(v)
    return out


# ----------------------------------------------------------------------------
# records


@dataclass
class FeatureFrame:
    t: int
    vision: np.ndarray
    game: np.ndarray
    audio_a: np.ndarray
    audio_b: np.ndarray

    def __post_init__(self):
        if self.t < 0:
            raise SchemaError(f"frame t must be non-negative, got {self.t}")
        for name, dim in (("vision", VISION_DIM), ("game", GAME_DIM),
                          ("audio_a", AUDIO_DIM), ("audio_b", AUDIO_DIM)):
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape != (dim,):
                raise SchemaError(f"{name}: expected {dim} values, got {arr.size}")
            setattr(self, name, arr)

    def to_record(self) -> dict:
        return {"t": int(self.t), "vision": self.vision.tolist(), "game": self.game.tolist(),
                "audio_a": self.audio_a.tolist(), "audio_b": self.audio_b.tolist()}

    @classmethod
    def from_record(cls, rec: Mapping) -> "FeatureFrame":
        try:
            t = rec["t"]
            if not isinstance(t, int) or isinstance(t, bool):
                raise SchemaError(f"t must be an integer, got {t!r}")
            game = rec["game"]
            if isinstance(game, Mapping):
                game = encode_game_state(game)
            return cls(t, rec["vision"], game, rec["audio_a"], rec["audio_b"])
        except KeyError as e:
            raise SchemaError(f"missing field {e.args[0]!r}") from e
        except (TypeError, ValueError) as e:
            if isinstance(e, SchemaError):
                raise
            raise SchemaError(str(e)) from e


def event_from_record(rec: Mapping) -> UtteranceEvent:
    try:
        ev = UtteranceEvent(str(rec["speaker"]), float(rec["start"]), float(rec["end"]),
                            str(rec.get("text", "")))
    except KeyError as e:
        raise SchemaError(f"missing field {e.args[0]!r}") from e
    except (TypeError, ValueError) as e:
        raise SchemaError(str(e)) from e
    if not ev.end > ev.start:
        raise SchemaError(f"end {ev.end} is not after start {ev.start}")
    return ev


def event_to_record(ev: UtteranceEvent) -> dict:
    return {"speaker": ev.speaker, "start": ev.start, "end": ev.end, "text": ev.text}


def _read_jsonl(path, parse):
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse(json.loads(line)))
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{n}: invalid JSON ({e.msg})") from e
            except SchemaError as e:
                raise SchemaError(f"{path}:{n}: {e}") from e
    return out


def _write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def parse_feature_stream(path) -> list[FeatureFrame]:
    frames = _read_jsonl(path, FeatureFrame.from_record)
    return sorted(frames, key=lambda f: f.t)


def write_feature_stream(path, frames: Iterable[FeatureFrame]) -> None:
    _write_jsonl(path, (f.to_record() for f in frames))


def parse_utterance_log(path) -> list[UtteranceEvent]:
    return _read_jsonl(path, event_from_record)


def write_utterance_log(path, events: Iterable[UtteranceEvent]) -> None:
    _write_jsonl(path, (event_to_record(e) for e in events))


# ----------------------------------------------------------------------------
# text stand-in


@lru_cache(maxsize=65536)
def embed_token(token: str, dims: int = TEXT_DIM, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm vector for a token (seeded hash)."""
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    v = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(dims)
    v = (v / np.linalg.norm(v)).astype(np.float32)
    v.setflags(write=False)
    return v


def window_tokens(events: Sequence[UtteranceEvent], t_end: int, seq: int = TEXT_SEQ) -> list[str]:
    """Speaker/time-marked tokens of utterances overlapping [t_end - 5, t_end); most recent ``seq`` kept."""
    lo = t_end - WINDOW
    chosen = sorted((e for e in events if e.start < t_end and e.end > lo),
                    key=lambda e: (e.start, e.speaker))
    tokens: list[str] = []
    for e in chosen:
        tokens.append(f"[{e.speaker}]")
        tokens.append(f"<{int(np.floor(e.start - t_end))}s>")
        tokens.extend(e.text.split())
    return tokens[-seq:]


def embed_tokens(tokens: Sequence[str], dims: int = TEXT_DIM, seq: int = TEXT_SEQ,
                 seed: int = 0) -> tuple[np.ndarray, int]:
    mat = np.zeros((seq, dims), np.float32)
    tokens = list(tokens)[-seq:]
    for i, tok in enumerate(tokens):
        mat[i] = embed_token(tok, dims, seed)
    return mat, len(tokens)


def embed_text_window(events: Sequence[UtteranceEvent], t_end: int, dims: int = TEXT_DIM,
                      seq: int = TEXT_SEQ, seed: int = 0) -> tuple[np.ndarray, int]:
    return embed_tokens(window_tokens(events, t_end, seq), dims, seq, seed)


class TokenText:
    """Text block stored as token ids into an embedding table; rows densify on access."""

    def __init__(self, ids: np.ndarray, table: np.ndarray):
        self.ids = np.asarray(ids, np.int32)  # -1 marks padding
        self.table = np.asarray(table, np.float32)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.ids.shape[0], self.ids.shape[1], self.table.shape[1])

    @property
    def ndim(self) -> int:
        return 3

    def __len__(self) -> int:
        return self.ids.shape[0]

    def dense(self, idx=slice(None)) -> np.ndarray:
        ids = self.ids[idx]
        out = self.table[np.maximum(ids, 0)]
        out[ids < 0] = 0.0
        return out

    def __getitem__(self, idx):
        return TokenText(self.ids[idx], self.table)

    @classmethod
    def from_token_lists(cls, token_lists: Sequence[Sequence[str]], seq: int = TEXT_SEQ,
                         dims: int = TEXT_DIM, seed: int = 0) -> "TokenText":
        vocab: dict[str, int] = {}
        ids = np.full((len(token_lists), seq), -1, np.int32)
        for r, toks in enumerate(token_lists):
            for c, tok in enumerate(list(toks)[-seq:]):
                ids[r, c] = vocab.setdefault(tok, len(vocab))
        table = np.zeros((max(len(vocab), 1), dims), np.float32)
        for tok, i in vocab.items():
            table[i] = embed_token(tok, dims, seed)
        return cls(ids, table)


def _dense_text(text) -> np.ndarray:
    return text.dense() if isinstance(text, TokenText) else text


# ----------------------------------------------------------------------------
# windows


@dataclass
class WindowSample:
    text: np.ndarray
    vision: np.ndarray
    audio: np.ndarray
    game: np.ndarray
    text_length: int
    label: int
    t_end: int = -1

    def __post_init__(self):
        for name, shape in BLOCKS:
            arr = np.asarray(getattr(self, name), np.float32)
            if arr.shape != shape:
                raise SchemaError(f"{name} block must be {shape}, got {arr.shape}")
            setattr(self, name, arr)
        if not 0 <= self.text_length <= TEXT_SEQ:
            raise SchemaError(f"text_length {self.text_length} outside [0, {TEXT_SEQ}]")
        if self.label not in (0, 1):
            raise SchemaError(f"label must be 0 or 1, got {self.label}")


@dataclass
class Batch:
    """Column-wise window collection; ``text`` is dense or a TokenText."""

    text: object
    text_length: np.ndarray
    vision: np.ndarray
    audio: np.ndarray
    game: np.ndarray
    label: np.ndarray
    t_end: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.label)
        if self.t_end is None:
            self.t_end = np.full(n, -1, np.int64)
        self.text_length = np.asarray(self.text_length, np.int64)
        self.label = np.asarray(self.label, np.int64)
        for name in ("text_length", "vision", "audio", "game", "t_end"):
            if len(getattr(self, name)) != n:
                raise SchemaError(f"batch column {name} has {len(getattr(self, name))} rows, expected {n}")
        if len(self.text) != n:
            raise SchemaError(f"batch text has {len(self.text)} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.label)

    def modality(self, m: str) -> np.ndarray:
        if m == "T":
            return _dense_text(self.text)
        return {"V": self.vision, "A": self.audio, "G": self.game}[m]

    def take(self, idx, dense: bool = True) -> "Batch":
        text = self.text[idx]
        if dense and isinstance(text, TokenText):
            text = text.dense()
        return Batch(text, self.text_length[idx], self.vision[idx], self.audio[idx],
                     self.game[idx], self.label[idx], self.t_end[idx])

    def samples(self) -> list[WindowSample]:
        text = _dense_text(self.text)
        return [WindowSample(text[i], self.vision[i], self.audio[i], self.game[i],
                             int(self.text_length[i]), int(self.label[i]), int(self.t_end[i]))
                for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples: Sequence[WindowSample]) -> "Batch":
        if not samples:
            raise SchemaError("empty sample list")
        return cls(np.stack([s.text for s in samples]), np.array([s.text_length for s in samples]),
                   np.stack([s.vision for s in samples]), np.stack([s.audio for s in samples]),
                   np.stack([s.game for s in samples]), np.array([s.label for s in samples]),
                   np.array([s.t_end for s in samples]))


def make_windows(frames: Sequence[FeatureFrame], log_events: Sequence[UtteranceEvent],
                 labels: Sequence[LabeledWindow], sidecar: Mapping[int, tuple[np.ndarray, int]] | None = None,
                 compact: bool = False, seed: int = 0) -> tuple[Batch | None, int]:
    """Assemble one window per non-excluded label; returns (windows, dropped count).

    With ``compact`` the text column is a TokenText. Windows missing any of the
    five frames are dropped.
    """
    by_t = {f.t: f for f in frames}
    rows = []
    dropped = 0
    for lw in labels:
        if lw.target is None:
            continue
        ts = range(lw.t_end - WINDOW, lw.t_end)
        if any(t not in by_t for t in ts):
            dropped += 1
            continue
        fr = [by_t[t] for t in ts]
        rows.append((lw, fr))
    if dropped:
        log.warning("dropped %d windows with missing frames", dropped)
    if not rows:
        return None, dropped

    n = len(rows)
    vision = np.stack([np.stack([f.vision for f in fr]) for _, fr in rows])
    game = np.stack([np.stack([f.game for f in fr]) for _, fr in rows])
    audio = np.stack([np.stack([a for f in fr for a in (f.audio_a, f.audio_b)]) for _, fr in rows])
    label = np.array([lw.target for lw, _ in rows])
    t_end = np.array([lw.t_end for lw, _ in rows])
    if sidecar is not None:
        missing = [lw.t_end for lw, _ in rows if lw.t_end not in sidecar]
        if missing:
            raise SchemaError(f"text sidecar lacks windows ending at {missing[:5]}")
        text = np.stack([sidecar[lw.t_end][0] for lw, _ in rows]).astype(np.float32)
        lengths = np.array([sidecar[lw.t_end][1] for lw, _ in rows])
    else:
        token_lists = [window_tokens(log_events, lw.t_end) for lw, _ in rows]
        lengths = np.array([len(t) for t in token_lists])
        tt = TokenText.from_token_lists(token_lists, seed=seed)
        text = tt if compact else tt.dense()
    assert len(label) == n
    return Batch(text, lengths, vision, audio, game, label, t_end), dropped


# ----------------------------------------------------------------------------
# binary containers


def _check_header(fh, magic: bytes, path) -> int:
    head = fh.read(12)
    if len(head) < 12 or head[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    version, count = struct.unpack("<II", head[4:])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return count


def write_dataset(path, batch: Batch) -> None:
    text = batch.text
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC + struct.pack("<II", FORMAT_VERSION, len(batch)))
        for i in range(len(batch)):
            t = text.dense(slice(i, i + 1))[0] if isinstance(text, TokenText) else text[i]
            fh.write(struct.pack("<BI", int(batch.label[i]), int(batch.text_length[i])))
            for arr in (t, batch.vision[i], batch.audio[i], batch.game[i]):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_dataset(path, compact: bool = False) -> Batch:
    """Load a CTTK file; ``compact`` stores text rows as ids into a table of distinct rows."""
    sizes = [int(np.prod(s)) for _, s in BLOCKS]
    rec = 5 + 4 * sum(sizes)
    with open(path, "rb") as fh:
        count = _check_header(fh, DATASET_MAGIC, path)
        raw = fh.read()
    if len(raw) != count * rec:
        raise FormatError(f"{path}: expected {count * rec} payload bytes, found {len(raw)}")
    label = np.empty(count, np.int64)
    lengths = np.empty(count, np.int64)
    start = 0 if not compact else 1
    cols = [np.empty((count,) + s, np.float32) for _, s in BLOCKS[start:]]
    ids = np.full((count, TEXT_SEQ), -1, np.int32)
    rows: dict[bytes, int] = {}
    row_bytes = 4 * TEXT_DIM
    for i in range(count):
        off = i * rec
        label[i], lengths[i] = struct.unpack_from("<BI", raw, off)
        off += 5
        if compact:
            for j in range(TEXT_SEQ):
                chunk = raw[off + j * row_bytes: off + (j + 1) * row_bytes]
                if j < lengths[i] or any(chunk):
                    ids[i, j] = rows.setdefault(chunk, len(rows))
            off += 4 * sizes[0]
        for col, n, (_, s) in zip(cols, sizes[start:], BLOCKS[start:]):
            col[i] = np.frombuffer(raw, "<f4", n, off).reshape(s)
            off += 4 * n
    if np.any(label > 1):
        raise FormatError(f"{path}: labels must be 0 or 1")
    if compact:
        table = np.zeros((max(len(rows), 1), TEXT_DIM), np.float32)
        for chunk, k in rows.items():
            table[k] = np.frombuffer(chunk, "<f4")
        return Batch(TokenText(ids, table), lengths, *cols, label)
    return Batch(cols[0], lengths, cols[1], cols[2], cols[3], label)


def write_text_sidecar(path, entries: Mapping[int, tuple[np.ndarray, int]]) -> None:
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC + struct.pack("<II", FORMAT_VERSION, len(entries)))
        for t_end in sorted(entries):
            mat, length = entries[t_end]
            fh.write(struct.pack("<II", t_end, length))
            fh.write(np.ascontiguousarray(mat, dtype="<f4").reshape(TEXT_SEQ, TEXT_DIM).tobytes())


def read_text_sidecar(path) -> dict[int, tuple[np.ndarray, int]]:
    n = TEXT_SEQ * TEXT_DIM
    out = {}
    with open(path, "rb") as fh:
        count = _check_header(fh, SIDECAR_MAGIC, path)
        for _ in range(count):
            head = fh.read(8)
            if len(head) < 8:
                raise FormatError(f"{path}: truncated")
            t_end, length = struct.unpack("<II", head)
            body = fh.read(4 * n)
            if len(body) < 4 * n:
                raise FormatError(f"{path}: truncated")
            out[t_end] = (np.frombuffer(body, "<f4").reshape(TEXT_SEQ, TEXT_DIM).copy(), length)
    return out


# ----------------------------------------------------------------------------
# scaling and splitting

SCALED = {"V": "vision", "A": "audio", "G": "game"}


def fit_minmax(batch: Batch) -> dict[str, np.ndarray]:
    """Per-feature min/max of vision, audio and game columns (text is left as is)."""
    stats = {}
    for m, name in SCALED.items():
        arr = getattr(batch, name).reshape(-1, getattr(batch, name).shape[-1])
        stats[f"norm.{m}.lo"] = arr.min(axis=0).astype(np.float32)
        stats[f"norm.{m}.hi"] = arr.max(axis=0).astype(np.float32)
    return stats


def scale_batch(batch: Batch, stats: Mapping[str, np.ndarray]) -> Batch:
    if not stats:
        return batch
    cols = {}
    for m, name in SCALED.items():
        lo, hi = stats[f"norm.{m}.lo"], stats[f"norm.{m}.hi"]
        span = hi - lo
        safe = np.where(span > 0, span, 1.0).astype(np.float32)
        cols[name] = np.where(span > 0, (getattr(batch, name) - lo) / safe, 0.0).astype(np.float32)
    return Batch(batch.text, batch.text_length, cols["vision"], cols["audio"], cols["game"],
                 batch.label, batch.t_end)


def split_train_test(n: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous split: the first ``train_fraction`` of windows train, the rest test."""
    cut = int(round(n * train_fraction))
    return np.arange(cut), np.arange(cut, n)
