"""Real-time sliding-window inference over newline-delimited JSON records.

Input lines are feature frames (``{"t": ..., "vision": ...}``) or utterance
events (``{"speaker": ..., "start": ..., "end": ..., "text": ...}``). When frame
``t`` arrives the window ending at ``t + 1`` is scored and one output record is
written per second::

    {"t": 7, "p_turn": 0.81, "decision": "speak_opportunity"}
"""

from __future__ import annotations

import json
import logging
import math
import socketserver
import sys
import threading
from collections import deque
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataio import (WINDOW, Batch, FeatureFrame, SchemaError, WindowSample, embed_text_window,
                     event_from_record, event_to_record, make_windows)
from .fusion import predict_proba
from .labeling import CLASS1, NO_TRANSITION, LabeledWindow, SegmentIndex, SpeechSegment, UtteranceEvent
from .params import ModelParams

log = logging.getLogger(__name__)

SPEAK = "speak_opportunity"
HOLD = "hold"
SILENT = "silent_history"
OVERFLOW_POLICIES = ("drop_oldest", "block")


def _decision(p: float, threshold: float) -> str:
    return SPEAK if p > threshold else HOLD


class StreamSession:
    """Per-connection buffers: the last five seconds of frames plus recent utterances."""

    def __init__(self, params: ModelParams, threshold: float | None = None):
        self.params = params
        self.threshold = params.config.threshold if threshold is None else threshold
        self.frames: dict[int, FeatureFrame] = {}
        self.events: list[UtteranceEvent] = []
        self.last_t = -1
        self.lines = 0

    def feed_line(self, line: str) -> list[dict]:
        self.lines += 1
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            return [{"error": f"invalid JSON: {e.msg}", "line": self.lines}]
        return self.feed(rec)

    def feed(self, rec) -> list[dict]:
        try:
            if not isinstance(rec, dict):
                raise SchemaError("record must be a JSON object")
            if "speaker" in rec:
                self.events.append(event_from_record(rec))
                return []
            if "t" in rec:
                return self._on_frame(FeatureFrame.from_record(rec))
            raise SchemaError("record is neither a feature frame nor an utterance event")
        except SchemaError as e:
            return [{"error": str(e), "line": self.lines}]

    def _on_frame(self, frame: FeatureFrame) -> list[dict]:
        if frame.t <= self.last_t:
            raise SchemaError(f"frame t={frame.t} does not follow t={self.last_t}")
        first = max(self.last_t + 2, WINDOW)
        self.last_t = frame.t
        self.frames[frame.t] = frame
        for t in [t for t in self.frames if t <= frame.t - WINDOW]:
            del self.frames[t]
        return [self.tick(t_end) for t_end in range(first, frame.t + 2)]

    def tick(self, t_end: int) -> dict:
        lo = t_end - WINDOW
        self.events = [e for e in self.events if e.end > lo]
        frames = [self.frames.get(t) for t in range(lo, t_end)]
        if any(f is None for f in frames) or not any(e.start < t_end for e in self.events):
            return {"t": t_end, "p_turn": 0.0, "decision": SILENT}
        text, length = embed_text_window(self.events, t_end)
        sample = WindowSample(text, np.stack([f.vision for f in frames]),
                              np.stack([a for f in frames for a in (f.audio_a, f.audio_b)]),
                              np.stack([f.game for f in frames]), length, 1, t_end)
        p = float(predict_proba(self.params, Batch.from_samples([sample]))[0])
        return {"t": t_end, "p_turn": p, "decision": _decision(p, self.threshold)}


def offline_predictions(params: ModelParams, frames: Sequence[FeatureFrame], log_events: Sequence[UtteranceEvent],
                        threshold: float | None = None, chunk: int = 1) -> list[dict]:
    """Batch counterpart of a replayed session: one record per second from t=5."""
    th = params.config.threshold if threshold is None else threshold
    have = {f.t for f in frames}
    if not have:
        return []
    index = SegmentIndex([SpeechSegment(e.speaker, e.start, e.end) for e in log_events])
    ends = range(WINDOW, max(have) + 2)
    live = [t for t in ends
            if all(s in have for s in range(t - WINDOW, t)) and index.speech_in(t - WINDOW, t)]
    out = {t: {"t": t, "p_turn": 0.0, "decision": SILENT} for t in ends}
    if live:
        labels = [LabeledWindow(t, CLASS1, NO_TRANSITION) for t in live]
        batch, _ = make_windows(frames, log_events, labels, compact=True)
        probs = predict_proba(params, batch, chunk=chunk)
        for t, p in zip(batch.t_end.tolist(), probs.tolist()):
            out[t] = {"t": t, "p_turn": float(p), "decision": _decision(float(p), th)}
    return [out[t] for t in ends]


def replay_records(frames: Sequence[FeatureFrame], log_events: Sequence[UtteranceEvent]) -> list[dict]:
    """Interleave a recorded session: every utterance goes out just before frame floor(start)."""
    events = sorted(log_events, key=lambda e: (e.start, e.speaker))
    out, k = [], 0
    for f in sorted(frames, key=lambda f: f.t):
        while k < len(events) and math.floor(events[k].start) <= f.t:
            out.append(event_to_record(events[k]))
            k += 1
        out.append(f.to_record())
    out.extend(event_to_record(e) for e in events[k:])
    return out


class RecordQueue:
    """Bounded hand-off between ingestion and inference."""

    def __init__(self, maxsize: int = 64, overflow: str = "drop_oldest"):
        if overflow not in OVERFLOW_POLICIES:
            raise ValueError(f"overflow must be one of {OVERFLOW_POLICIES}")
        if maxsize < 1:
            raise ValueError("queue size must be positive")
        self.maxsize = maxsize
        self.overflow = overflow
        self.items: deque = deque()
        self.cond = threading.Condition()
        self.closed = False
        self.dropped_frames = 0

    def put(self, item: str, is_frame: bool) -> None:
        with self.cond:
            if self.overflow == "block":
                while len(self.items) >= self.maxsize:
                    self.cond.wait()
            elif len(self.items) >= self.maxsize:
                victim = next((i for i, (_, fr) in enumerate(self.items) if fr), 0)
                del self.items[victim]
                self.dropped_frames += 1
            self.items.append((item, is_frame))
            self.cond.notify_all()

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()

    def get(self) -> str | None:
        with self.cond:
            while not self.items and not self.closed:
                self.cond.wait()
            if not self.items:
                return None
            item, _ = self.items.popleft()
            self.cond.notify_all()
            return item


def _looks_like_frame(line: str) -> bool:
    return '"speaker"' not in line


def serve_connection(params: ModelParams, lines: Iterable[str], write: Callable[[str], None],
                     threshold: float | None = None, queue_size: int = 64,
                     overflow: str = "drop_oldest") -> dict:
    """Run one session until the input ends; returns counters."""
    q = RecordQueue(queue_size, overflow)
    session = StreamSession(params, threshold)
    counts = {"outputs": 0, "errors": 0}

    def worker():
        while (line := q.get()) is not None:
            for rec in session.feed_line(line):
                counts["outputs"] += 1
                counts["errors"] += "error" in rec
                write(json.dumps(rec, separators=(",", ":")) + "\n")

    th = threading.Thread(target=worker, daemon=True)
    th.start()
    for line in lines:
        if line.strip():
            q.put(line, _looks_like_frame(line))
    q.close()
    th.join()
    counts["dropped_frames"] = q.dropped_frames
    if q.dropped_frames:
        log.warning("dropped %d frames on queue overflow", q.dropped_frames)
    return counts


def parse_endpoint(endpoint: str) -> tuple[str, str | None, int | None]:
    if endpoint == "stdio":
        return "stdio", None, None
    if endpoint.startswith("tcp://"):
        host, _, port = endpoint[len("tcp://"):].rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad endpoint {endpoint!r}; expected tcp://host:port")
        return "tcp", host, int(port)
    raise ValueError(f"bad endpoint {endpoint!r}; expected stdio or tcp://host:port")


def make_tcp_server(params: ModelParams, host: str, port: int, threshold: float | None = None,
                    queue_size: int = 64, overflow: str = "drop_oldest") -> socketserver.ThreadingTCPServer:
    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            lines = (raw.decode("utf-8", errors="replace") for raw in self.rfile)

            def write(s: str) -> None:
                self.wfile.write(s.encode("utf-8"))
                self.wfile.flush()

            serve_connection(params, lines, write, threshold, queue_size, overflow)

    socketserver.ThreadingTCPServer.allow_reuse_address = True
    server = socketserver.ThreadingTCPServer((host, port), Handler)
    server.daemon_threads = True
    return server


def serve_stream(model_path, endpoint: str = "stdio", threshold: float | None = None,
                 queue_size: int = 64, overflow: str = "drop_oldest", stdin=None, stdout=None) -> dict:
    from .quantserve import load_model

    params = load_model(model_path)
    kind, host, port = parse_endpoint(endpoint)
    if kind == "stdio":
        out = stdout or sys.stdout

        def write(s: str) -> None:
            out.write(s)
            out.flush()

        return serve_connection(params, stdin or sys.stdin, write, threshold, queue_size, overflow)
    server = make_tcp_server(params, host, port, threshold, queue_size, overflow)
    print(f"listening on {server.server_address[0]}:{server.server_address[1]}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return {}
