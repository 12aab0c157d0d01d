"""Turn-taking labels from diarized utterance logs.

A window ending at integer second ``t_end`` observes ``[t_end - 5, t_end)`` and
asks whether a speaker transition starts in ``[t_end, t_end + 1)``. Label
strings follow the dataset convention: ``class0`` is a turn-taking event,
``class1`` its absence.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Sequence

SPEAKERS = ("agent", "human")  # tie-break order: agent first

CLASS0 = "class0"
CLASS1 = "class1"
EXCLUDED = "excluded"

TRANSITION = "transition-in-horizon"
NO_TRANSITION = "no-transition"
SILENT = "silent-history"
SHORT = "short-segment"


class LogError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceEvent:
    speaker: str
    start: float
    end: float
    text: str = ""

    def __post_init__(self):
        if self.speaker not in SPEAKERS:
            raise LogError(f"unknown speaker {self.speaker!r}")


@dataclass(frozen=True)
class SpeechSegment:
    speaker: str
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class LabeledWindow:
    t_end: int
    label: str
    reason: str

    @property
    def target(self) -> int | None:
        """0 for class0, 1 for class1, None when excluded."""
        return {CLASS0: 0, CLASS1: 1}.get(self.label)


@dataclass(frozen=True)
class LabelThresholds:
    silence: float = 0.2
    short: float = 0.5
    horizon: float = 1.0
    history: float = 5.0

    def __post_init__(self):
        if self.silence <= 0 or self.horizon <= 0 or self.history <= 0 or self.short < 0:
            raise ValueError(f"thresholds must be positive: {self}")


def _speaker_rank(s: str) -> int:
    return SPEAKERS.index(s)


def validate_log(log: Sequence[UtteranceEvent]) -> None:
    last: dict[str, UtteranceEvent] = {}
    for i, ev in enumerate(log):
        if not ev.end > ev.start:
            raise LogError(f"event {i}: end {ev.end} is not after start {ev.start}")
        prev = last.get(ev.speaker)
        if prev is not None:
            if ev.start < prev.start:
                raise LogError(f"event {i}: {ev.speaker} events not sorted by start "
                               f"({ev.start} after {prev.start})")
            if ev.start < prev.end:
                raise LogError(f"event {i}: overlaps the previous {ev.speaker} event")
        last[ev.speaker] = ev


def segment_ipus(log: Sequence[UtteranceEvent], silence_threshold: float = 0.2) -> list[SpeechSegment]:
    """Merge each speaker's events across gaps shorter than ``silence_threshold``."""
    if silence_threshold <= 0:
        raise ValueError("silence_threshold must be positive")
    validate_log(log)
    open_seg: dict[str, list[float]] = {}
    out: list[SpeechSegment] = []
    for ev in log:
        cur = open_seg.get(ev.speaker)
        if cur is not None and ev.start - cur[1] < silence_threshold:
            cur[1] = max(cur[1], ev.end)
            continue
        if cur is not None:
            out.append(SpeechSegment(ev.speaker, cur[0], cur[1]))
        open_seg[ev.speaker] = [ev.start, ev.end]
    out.extend(SpeechSegment(s, a, b) for s, (a, b) in open_seg.items())
    out.sort(key=lambda s: (s.start, _speaker_rank(s.speaker)))
    return out


def _more_recent(a: SpeechSegment | None, b: SpeechSegment) -> SpeechSegment:
    if a is None or b.end > a.end:
        return b
    if b.end == a.end and _speaker_rank(b.speaker) < _speaker_rank(a.speaker):
        return b
    return a


def _decide(candidates: Iterable[tuple[SpeechSegment, SpeechSegment | None]], short: float,
            t_end: int) -> LabeledWindow:
    saw_short = False
    for seg, prev in candidates:
        if prev is None or prev.speaker == seg.speaker:
            continue
        if seg.duration >= short:
            return LabeledWindow(t_end, CLASS0, TRANSITION)
        saw_short = True
    return LabeledWindow(t_end, CLASS1, SHORT if saw_short else NO_TRANSITION)


class SegmentIndex:
    """Sorted segments with prefix maxima for O(log n) window queries."""

    def __init__(self, segments: Sequence[SpeechSegment]):
        self.segments = sorted(segments, key=lambda s: (s.start, _speaker_rank(s.speaker)))
        self.starts = [s.start for s in self.segments]
        # most recent segment among those starting strictly before each segment
        self.prev: list[SpeechSegment | None] = []
        best: SpeechSegment | None = None
        i = 0
        n = len(self.segments)
        while i < n:
            j = i
            while j < n and self.starts[j] == self.starts[i]:
                j += 1
            self.prev.extend([best] * (j - i))
            for k in range(i, j):
                best = _more_recent(best, self.segments[k])
            i = j
        self.prefix_end = []
        m = -math.inf
        for s in self.segments:
            m = max(m, s.end)
            self.prefix_end.append(m)

    def speech_in(self, lo: float, hi: float) -> bool:
        k = bisect.bisect_left(self.starts, hi)
        return k > 0 and self.prefix_end[k - 1] > lo

    def label(self, t_end: int, th: LabelThresholds) -> LabeledWindow:
        if not self.speech_in(t_end - th.history, t_end):
            return LabeledWindow(t_end, EXCLUDED, SILENT)
        lo = bisect.bisect_left(self.starts, t_end)
        hi = bisect.bisect_left(self.starts, t_end + th.horizon)
        return _decide(((self.segments[k], self.prev[k]) for k in range(lo, hi)), th.short, t_end)


def label_window(segments: Sequence[SpeechSegment], t_end: int, horizon: float = 1.0,
                 history: float = 5.0, short_threshold: float = 0.5) -> LabeledWindow:
    th = LabelThresholds(short=short_threshold, horizon=horizon, history=history)
    return SegmentIndex(segments).label(t_end, th)


def window_ends(duration: float) -> range:
    if duration < 6:
        raise ValueError(f"duration {duration} s is too short; need at least 6 s")
    return range(5, int(math.floor(duration)))


def label_stream(log: Sequence[UtteranceEvent], duration: float,
                 thresholds: LabelThresholds = LabelThresholds()) -> list[LabeledWindow]:
    """One label per integer ``t_end`` in [5, duration - 1]."""
    ends = window_ends(duration)
    index = SegmentIndex(segment_ipus(log, thresholds.silence))
    return [index.label(t, thresholds) for t in ends]


class StreamingLabeler:
    """Incremental labeler fed events in order of start time.

    Keeps only segments that can still matter and emits each window's label as
    soon as no future event could change it.
    """

    def __init__(self, thresholds: LabelThresholds = LabelThresholds(), first_t_end: int = 5):
        self.th = thresholds
        self.next_t = first_t_end
        self.open: dict[str, list[float]] = {}
        self.closed: deque[SpeechSegment] = deque()
        self.last_start = -math.inf

    def push(self, ev: UtteranceEvent) -> list[LabeledWindow]:
        if not ev.end > ev.start:
            raise LogError(f"event end {ev.end} is not after start {ev.start}")
        if ev.start < self.last_start:
            raise LogError("streaming labeler needs events ordered by start")
        self.last_start = ev.start
        for spk in sorted(self.open, key=_speaker_rank):
            a, b = self.open[spk]
            if spk != ev.speaker and ev.start - b >= self.th.silence:
                self.closed.append(SpeechSegment(spk, a, b))
                del self.open[spk]
        cur = self.open.get(ev.speaker)
        if cur is not None and ev.start < cur[1]:
            raise LogError(f"{ev.speaker} event overlaps the previous one")
        if cur is not None and ev.start - cur[1] < self.th.silence:
            cur[1] = max(cur[1], ev.end)
        else:
            if cur is not None:
                self.closed.append(SpeechSegment(ev.speaker, cur[0], cur[1]))
            self.open[ev.speaker] = [ev.start, ev.end]
        return self._emit(ev.start)

    def finish(self, duration: float) -> list[LabeledWindow]:
        last = int(math.floor(duration)) - 1
        for spk in sorted(self.open, key=_speaker_rank):
            a, b = self.open[spk]
            self.closed.append(SpeechSegment(spk, a, b))
        self.open.clear()
        out = []
        while self.next_t <= last:
            out.append(self._label(self.next_t))
            self.next_t += 1
        return out

    def _emit(self, now: float) -> list[LabeledWindow]:
        out = []
        # window t is final once every segment starting before t + horizon is
        # known and none of them can still be extended
        while True:
            t = self.next_t
            if now < t + self.th.horizon:
                break
            if any(a < t + self.th.horizon for a, _ in self.open.values()):
                break
            out.append(self._label(t))
            self.next_t += 1
        return out

    def _segments(self) -> list[SpeechSegment]:
        segs = list(self.closed) + [SpeechSegment(s, a, b) for s, (a, b) in self.open.items()]
        return sorted(segs, key=lambda s: (s.start, _speaker_rank(s.speaker)))

    def _label(self, t: int) -> LabeledWindow:
        segs = self._segments()
        lo = t - self.th.history
        if not any(s.start < t and s.end > lo for s in segs):
            win = LabeledWindow(t, EXCLUDED, SILENT)
        else:
            cands = []
            for seg in segs:
                if t <= seg.start < t + self.th.horizon:
                    prev = None
                    for other in segs:
                        if other.start < seg.start:
                            prev = _more_recent(prev, other)
                    cands.append((seg, prev))
            win = _decide(cands, self.th.short, t)
        self._prune(t)
        return win

    def _prune(self, t: int) -> None:
        # a segment that ended before the next window's history can never again
        # be the most recent one: any non-silent later window has a newer segment
        cutoff = t + 1 - self.th.history
        self.closed = deque(s for s in self.closed if s.end > cutoff)


def label_stream_online(log: Sequence[UtteranceEvent], duration: float,
                        thresholds: LabelThresholds = LabelThresholds()) -> list[LabeledWindow]:
    window_ends(duration)
    events = sorted(log, key=lambda e: (e.start, _speaker_rank(e.speaker)))
    lab = StreamingLabeler(thresholds)
    out: list[LabeledWindow] = []
    for ev in events:
        out.extend(lab.push(ev))
    out.extend(lab.finish(duration))
    return [w for w in out if w.t_end <= int(math.floor(duration)) - 1]
