"""Synthetic two-party dialogue corpus with planted turn-taking cues.

The generator lays out alternating turns (with internal pauses, backchannels,
overlaps and long silences), labels them with the real labeler, and then plants
cues in the second before every labelled transition:

* text: an end-of-turn token closes the yielding speaker's last chunk
* audio: both half-second LLD vectors stay voiced while pitch falls and loudness decays
* vision / game: small shifts along fixed directions, buried in noise

Utterance events are split at integer seconds, so a window ending at ``t_end``
sees exactly the speech that started before ``t_end``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .dataio import (AUDIO_DIM, GAME_DIM, GAME_FIELDS, ITEMS, PHASES, TARGETS, VISION_DIM,
                     Batch, FeatureFrame, TokenText, embed_token)
from .labeling import LabeledWindow, LabelThresholds, SpeechSegment, UtteranceEvent, label_stream

END_TOKEN = "<eot>"
BACKCHANNELS = ("mhm", "yeah", "uh-huh", "right", "okay")
PROFILES = {"en": 0.71, "ko": 0.82, "mixed": 0.76}

LOUDNESS = 0  # first energy LLD
F0 = 59  # first voicing LLD
VOICING = 60
DISTANCE = GAME_FIELDS.index("distance")


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    duration: float = 3600.0
    seed: int = 0
    class1_fraction: float | None = None  # None: the profile's default
    profile: str = "mixed"
    text_cue: float = 0.9  # chance the end token marks a transition
    audio_cue: float = 0.9  # chance the falling-pitch pattern marks a transition
    pitch_drop: float = 0.4
    spectral_cue: float = 0.5  # band-energy shift that accompanies the pitch pattern
    vision_cue: float = 0.8  # shift along the cue direction, in noise standard deviations
    vision_noise: float = 0.3
    game_cue: float = 0.8
    game_noise: float = 2.0
    spurious: float = 0.01  # chance of a text or audio cue in a non-event second
    backchannel_rate: float = 0.2
    pause_rate: float = 0.25
    overlap_rate: float = 0.05
    long_silence_rate: float = 0.04
    words_per_second: float = 2.5
    tolerance: float = 0.005

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; expected one of {sorted(PROFILES)}")
        if not 0 < self.target_fraction < 1:
            raise ValueError(f"class1 fraction must be in (0,1), got {self.target_fraction}")
        for name in ("text_cue", "audio_cue", "spurious", "backchannel_rate", "pause_rate",
                     "overlap_rate", "long_silence_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.duration < 60:
            raise ValueError("duration must be at least 60 s")

    @property
    def target_fraction(self) -> float:
        return PROFILES[self.profile] if self.class1_fraction is None else self.class1_fraction


@dataclass
class SynthCorpus:
    frames: list[FeatureFrame]
    log: list[UtteranceEvent]
    text: dict | None
    labels: list[LabeledWindow]
    scale: float
    class1_fraction: float
    spec: SynthSpec = field(repr=False, default=None)

    def __iter__(self) -> Iterator:
        return iter((self.frames, self.log, self.text))


@dataclass
class _Turn:
    speaker: str
    ipus: list[tuple[float, float]]


def _layout(spec: SynthSpec, scale: float) -> tuple[list[_Turn], list[SpeechSegment]]:
    rng = np.random.default_rng([spec.seed, 1])
    t = 0.3 + rng.random()
    speaker = "agent" if rng.random() < 0.5 else "human"
    turns: list[_Turn] = []
    backchannels: list[SpeechSegment] = []
    end_limit = spec.duration - 0.05
    while t < end_limit - 1.0:
        dur = max(1.2, scale * rng.gamma(4.0, 0.25))
        ipus = [(t, t + dur)]
        if rng.random() < spec.pause_rate and dur > 2.0:
            cut = t + dur * rng.uniform(0.35, 0.65)
            pause = rng.uniform(0.25, 0.8)
            ipus = [(t, cut), (cut + pause, t + dur + pause)]
        ipus = [(a, min(b, end_limit)) for a, b in ipus if a < end_limit - 0.1]
        turns.append(_Turn(speaker, ipus))
        listener = "human" if speaker == "agent" else "agent"
        a0, b0 = ipus[0]
        if rng.random() < spec.backchannel_rate and b0 - a0 > 2.5:
            s = rng.uniform(a0 + 0.5, b0 - 1.5)
            backchannels.append(SpeechSegment(listener, s, s + rng.uniform(0.15, 0.4)))
        end = ipus[-1][1]
        r = rng.random()
        if r < spec.long_silence_rate:
            gap = rng.uniform(5.5, 9.0)
        elif r < spec.long_silence_rate + spec.overlap_rate:
            gap = -rng.uniform(0.1, 0.4)
        else:
            gap = rng.uniform(0.15, 0.7)
        t = end + gap
        speaker = listener
    segs = [SpeechSegment(tr.speaker, a, b) for tr in turns for a, b in tr.ipus] + backchannels
    segs.sort(key=lambda s: (s.start, s.speaker))
    return turns, segs


def _chunk(seg: SpeechSegment) -> list[tuple[float, float]]:
    """Split at integer seconds (ASR-style partials)."""
    out = []
    a = seg.start
    while a < seg.end - 1e-9:
        b = min(seg.end, math.floor(a) + 1.0)
        if b - a > 1e-6:
            out.append((a, b))
        a = b
    return out


def _events(spec: SynthSpec, segs: list[SpeechSegment], labels: list[LabeledWindow],
            rng: np.random.Generator) -> list[UtteranceEvent]:
    chunks = []  # [speaker, start, end, words, is_backchannel]
    for s in segs:
        bc = s.duration < 0.5
        for a, b in _chunk(s):
            if bc:
                words = [BACKCHANNELS[rng.integers(len(BACKCHANNELS))]]
            else:
                n = max(1, rng.poisson(spec.words_per_second * (b - a)))
                words = [f"w{min(int(rng.zipf(1.3)), 999)}" for _ in range(n)]
            chunks.append([s.speaker, a, b, words, bc])
    chunks.sort(key=lambda c: (c[1], c[0]))
    by_speaker = {spk: [c for c in chunks if c[0] == spk] for spk in ("agent", "human")}
    starts = {spk: np.array([c[1] for c in cs]) for spk, cs in by_speaker.items()}
    events_t = {lw.t_end for lw in labels if lw.target == 0}
    marked = set()
    for lw in labels:
        if lw.target != 0:
            continue
        t = lw.t_end
        nxt = [s for s in segs if t <= s.start < t + 1.0 and s.duration >= 0.5]
        if not nxt:
            continue
        yielding = "agent" if nxt[0].speaker == "human" else "human"
        k = int(np.searchsorted(starts[yielding], t)) - 1
        if k >= 0 and rng.random() < spec.text_cue:
            by_speaker[yielding][k][3].append(END_TOKEN)
            marked.add(id(by_speaker[yielding][k]))
    for c in chunks:
        nearest = math.floor(c[1]) + 1
        if id(c) not in marked and nearest not in events_t and rng.random() < spec.spurious:
            c[3].append(END_TOKEN)
    return [UtteranceEvent(c[0], round(c[1], 4), round(c[2], 4), " ".join(c[3])) for c in chunks
            if round(c[2], 4) > round(c[1], 4)]


def _coverage(segs: list[SpeechSegment], n_slots: int, slot: float, speaker: str | None = None) -> np.ndarray:
    cov = np.zeros(n_slots)
    for s in segs:
        if speaker is not None and s.speaker != speaker:
            continue
        k0 = max(int(s.start // slot), 0)
        k1 = min(int(math.ceil(s.end / slot)), n_slots)
        for k in range(k0, k1):
            lo, hi = k * slot, (k + 1) * slot
            cov[k] += max(0.0, min(hi, s.end) - max(lo, s.start))
    return np.clip(cov / slot, 0.0, 1.0)


class _Directions:
    def __init__(self, seed: int):
        rng = np.random.default_rng([seed, 7])
        self.identity = rng.normal(0, 1, VISION_DIM).astype(np.float32)
        self.identity /= np.linalg.norm(self.identity)
        u, v = rng.normal(size=(2, VISION_DIM))
        u /= np.linalg.norm(u)
        v -= (v @ u) * u
        v /= np.linalg.norm(v)
        self.vision_cue = u.astype(np.float32)
        self.vision_speaking = v.astype(np.float32)
        self.spectrum = rng.uniform(0.2, 0.8, AUDIO_DIM).astype(np.float32)
        self.audio_cue = rng.choice([-1.0, 1.0], AUDIO_DIM).astype(np.float32)
        self.audio_cue[[LOUDNESS, 1, 2, F0, VOICING]] = 0.0


def _frames(spec: SynthSpec, segs: list[SpeechSegment], labels: list[LabeledWindow],
            rng: np.random.Generator) -> list[FeatureFrame]:
    n = int(math.floor(spec.duration))
    dirs = _Directions(spec.seed)
    cov = _coverage(segs, 2 * n, 0.5)
    human = _coverage(segs, n, 1.0, "human")

    # audio: 2 half-second LLD vectors per second
    audio = rng.normal(0, 0.05, (2 * n, AUDIO_DIM)).astype(np.float32)
    audio += cov[:, None] * dirs.spectrum[None, :]
    audio[:, LOUDNESS] = 0.05 + 0.65 * cov + rng.normal(0, 0.05, 2 * n)
    audio[:, 1] = 0.04 + 0.5 * cov + rng.normal(0, 0.05, 2 * n)
    audio[:, 2] = 0.03 + 0.6 * cov + rng.normal(0, 0.05, 2 * n)
    voiced = cov > 0.5
    audio[:, F0] = np.where(voiced, 0.5 + rng.normal(0, 0.04, 2 * n), rng.normal(0, 0.02, 2 * n))
    audio[:, VOICING] = cov + rng.normal(0, 0.05, 2 * n)

    # vision: a face embedding with speaking-related motion and noise
    vision = (dirs.identity[None, :] + 0.5 * spec.vision_noise * human[:, None] * dirs.vision_speaking[None, :]
              + rng.normal(0, spec.vision_noise, (n, VISION_DIM))).astype(np.float32)

    game = _game_states(spec, n, rng)

    event_t = {lw.t_end for lw in labels if lw.target == 0}
    scored = {lw.t_end for lw in labels if lw.target is not None}
    for t_end in range(1, n + 1):
        f = t_end - 1
        if t_end in event_t:
            plant_audio = rng.random() < spec.audio_cue
            vision[f] += spec.vision_cue * spec.vision_noise * dirs.vision_cue
            game[f, DISTANCE] -= spec.game_cue * spec.game_noise
        else:
            plant_audio = t_end in scored and rng.random() < spec.spurious
        if plant_audio:
            a, b = 2 * f, 2 * f + 1
            audio[a, LOUDNESS] = 0.55 + rng.normal(0, 0.03)
            audio[b, LOUDNESS] = 0.25 + rng.normal(0, 0.03)
            audio[a, F0] = 0.5 + spec.pitch_drop / 2 + rng.normal(0, 0.02)
            audio[b, F0] = 0.5 - spec.pitch_drop / 2 + rng.normal(0, 0.02)
            audio[a, VOICING] = 0.9
            audio[b, VOICING] = 0.8
            audio[[a, b]] += spec.spectral_cue * dirs.audio_cue
    return [FeatureFrame(t, vision[t], game[t], audio[2 * t], audio[2 * t + 1]) for t in range(n)]


def _game_states(spec: SynthSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    g = np.zeros((n, GAME_DIM), np.float32)
    idx = {name: i for i, name in enumerate(GAME_FIELDS)}
    phase = (np.arange(n) // 160) % len(PHASES)
    g[:, idx["phase"]] = phase
    pos = {who: np.cumsum(rng.normal(0, 1.5, (n, 2)), axis=0) + rng.uniform(-50, 50, 2)
           for who in ("avatar", "player")}
    dist = np.linalg.norm(pos["avatar"] - pos["player"], axis=1)
    g[:, idx["distance"]] = dist + rng.normal(0, spec.game_noise, n)
    for who in ("avatar", "player"):
        p = f"{who}."
        for stat, top in (("hunger", 150), ("health", 150), ("sanity", 200)):
            walk = top * 0.7 + np.cumsum(rng.normal(0, 0.8, n))
            g[:, idx[p + stat]] = np.clip(walk, 0, top)
        g[:, idx[p + "xloc"]] = pos[who][:, 0]
        g[:, idx[p + "zloc"]] = pos[who][:, 1]
        g[:, idx[p + "is_light"]] = (phase != 2) | (rng.random(n) < 0.3)
        for cat, table in (("active_item", ITEMS), ("equip_hands", ITEMS),
                           ("attack_target", TARGETS), ("defense_target", TARGETS)):
            g[:, idx[p + cat]] = _sticky_categorical(n, len(table), 0.03, rng)
        g[:, idx[p + "recent_attacked"]] = rng.random(n) < 0.05
        g[:, idx[p + "monster_num"]] = rng.poisson(1.0, n)
        for res in ("inv_count", "food", "twig", "flint", "log", "rock", "grass"):
            g[:, idx[p + res]] = np.maximum(0, np.cumsum(rng.choice([-1, 0, 0, 0, 1], n)) + 5)
    return g


def _sticky_categorical(n: int, k: int, p_switch: float, rng) -> np.ndarray:
    out = np.empty(n)
    cur = rng.integers(k)
    for i in range(n):
        if rng.random() < p_switch:
            cur = rng.integers(k)
        out[i] = cur
    return out


def _class1_fraction(spec: SynthSpec, scale: float, th: LabelThresholds) -> tuple[float, list, list]:
    turns, segs = _layout(spec, scale)
    log = [UtteranceEvent(s.speaker, s.start, s.end) for s in sorted(segs, key=lambda s: (s.speaker, s.start))]
    log.sort(key=lambda e: (e.start, e.speaker))
    labels = label_stream(log, spec.duration, th)
    kept = [lw for lw in labels if lw.target is not None]
    frac = sum(lw.target for lw in kept) / max(len(kept), 1)
    return frac, segs, labels


def synth_generate(spec: SynthSpec, thresholds: LabelThresholds = LabelThresholds()) -> SynthCorpus:
    """Deterministic corpus whose labelled class1 share is within ``spec.tolerance`` of the target."""
    target = spec.target_fraction
    lo, hi = 0.3, 30.0
    f_lo = _class1_fraction(spec, lo, thresholds)[0]
    f_hi = _class1_fraction(spec, hi, thresholds)[0]
    if not f_lo <= target <= f_hi:
        raise InfeasibleSpec(f"class1 fraction {target} unreachable; feasible range [{f_lo:.3f}, {f_hi:.3f}]")
    best = None
    for _ in range(40):
        mid = math.sqrt(lo * hi)
        frac, segs, labels = _class1_fraction(spec, mid, thresholds)
        if best is None or abs(frac - target) < abs(best[0] - target):
            best = (frac, segs, labels, mid)
        if abs(frac - target) <= spec.tolerance:
            break
        if frac < target:
            lo = mid
        else:
            hi = mid
    frac, segs, labels, scale = best
    if abs(frac - target) > 0.02:
        raise InfeasibleSpec(f"could not reach class1 fraction {target} (best {frac:.3f})")
    rng = np.random.default_rng([spec.seed, 2])
    log = _events(spec, segs, labels, rng)
    frames = _frames(spec, segs, labels, rng)
    relabeled = label_stream(log, spec.duration, thresholds)
    kept = [lw for lw in relabeled if lw.target is not None]
    frac = sum(lw.target for lw in kept) / max(len(kept), 1)
    return SynthCorpus(frames, log, None, relabeled, scale, frac, spec)


# ----------------------------------------------------------------------------
# oracle


@dataclass(frozen=True)
class OracleParams:
    p_text: float
    p_audio: float
    spurious: float
    vision_shift: float
    game_shift: float
    game_sd: float
    prior_event: float


def oracle_params(spec: SynthSpec) -> OracleParams:
    return OracleParams(spec.text_cue, spec.audio_cue, spec.spurious, spec.vision_cue,
                        spec.game_cue * spec.game_noise,
                        math.sqrt(2 * spec.game_noise ** 2 + 2 * 1.5 ** 2),
                        1.0 - spec.target_fraction)


def cue_features(batch: Batch, spec: SynthSpec) -> dict[str, np.ndarray]:
    """The planted-cue statistics the oracle reads from a raw (unscaled) batch."""
    n = len(batch)
    end_vec = embed_token(END_TOKEN)
    text = np.zeros(n, bool)
    for i in range(n):
        L = int(batch.text_length[i])
        if L:
            row = batch.text[i:i + 1]
            row = row.dense()[0] if isinstance(row, TokenText) else row[0]
            text[i] = float(row[L - 1] @ end_vec) > 0.999
    a, b = batch.audio[:, -2], batch.audio[:, -1]
    drop = a[:, F0] - b[:, F0]
    audio = (drop > spec.pitch_drop / 2) & (b[:, F0] > 0.15) & (b[:, LOUDNESS] > 0.1)
    dirs = _Directions(spec.seed)
    vision = (batch.vision[:, -1] - dirs.identity) @ dirs.vision_cue / spec.vision_noise
    game = batch.game[:, -2, DISTANCE] - batch.game[:, -1, DISTANCE]
    return {"text": text, "audio": audio, "vision": vision, "game": game}


def oracle_scores(batch: Batch, spec: SynthSpec) -> np.ndarray:
    """Log-odds that each window is a turn-taking event, from the planted cues alone."""
    op = oracle_params(spec)
    f = cue_features(batch, spec)
    eps = 1e-4

    def binary(present, p1, p0):
        p1, p0 = min(max(p1, eps), 1 - eps), min(max(p0, eps), 1 - eps)
        return np.where(present, math.log(p1 / p0), math.log((1 - p1) / (1 - p0)))

    llr = math.log(op.prior_event / (1 - op.prior_event))
    llr = llr + binary(f["text"], op.p_text, op.spurious) + binary(f["audio"], op.p_audio, op.spurious)
    s = op.vision_shift
    llr = llr + s * f["vision"] - s * s / 2
    g, sd = op.game_shift, op.game_sd
    llr = llr + (g * f["game"] - g * g / 2) / (sd * sd)
    return llr


def oracle_predict(batch: Batch, spec: SynthSpec) -> np.ndarray:
    """Predicted labels (0 = turn-taking event, 1 = none)."""
    return np.where(oracle_scores(batch, spec) > 0, 0, 1)
