"""Streaming per-frame CRNN inference with pacing, latency, and throughput measurement.

The LSTM state is carried continuously across the whole session (no window
boundaries at inference). Frame sources are directory replays of the dataset
layout or a raw-frame pipe: each frame is a 12-byte header (width, height,
frame-index, little-endian u32 each) followed by height*width*3 RGB bytes.
Per-frame output records are ``frame_index,label,p_no,p_fist,p_infil,latency_ms``.
"""

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .data import NeedleState, preprocess_frame
from .metrics import per_video_accuracy, transitions

RAW_HEADER = struct.Struct("<III")


class StreamError(RuntimeError):
    pass


class SessionClosedError(StreamError):
    pass


@dataclass
class LatencyRecord:
    preprocess_ms: float
    network_ms: float

    @property
    def total_ms(self):
        return self.preprocess_ms + self.network_ms


@dataclass
class StreamSession:
    """Live inference state for one video stream over a loaded CRNN."""

    model: object
    source: str = "<unknown>"
    predictions: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    latencies: list = field(default_factory=list)
    frame_count: int = 0
    closed: bool = False

    def __post_init__(self):
        self._h, self._c = self.model.initial_state(1)
        self._wall_start = None

    def reset(self):
        self._h, self._c = self.model.initial_state(1)
        self.predictions.clear()
        self.labels.clear()
        self.latencies.clear()
        self.frame_count = 0
        self._wall_start = None

    def close(self):
        self.closed = True

    def infer(self, frame, label=None):
        """Classify one raw RGB frame; returns (NeedleState, probability triple, latency_ms)."""
        if self.closed:
            raise SessionClosedError(f"session over {self.source} is closed")
        if self._wall_start is None:
            self._wall_start = time.perf_counter()
        t0 = time.perf_counter()
        x = preprocess_frame(frame)
        t1 = time.perf_counter()
        feat = self.model.conv_features(x[None])
        probs, self._h, self._c = self.model.step(feat, self._h, self._c)
        t2 = time.perf_counter()
        probs = probs[0]
        state = NeedleState(int(probs.argmax()))
        rec = LatencyRecord((t1 - t0) * 1e3, (t2 - t1) * 1e3)
        self.latencies.append(rec)
        self.predictions.append(int(state))
        if label is not None:
            self.labels.append(int(label))
        self.frame_count += 1
        return state, probs, rec.total_ms

    def elapsed_s(self):
        if self._wall_start is None:
            return 0.0
        return time.perf_counter() - self._wall_start


def stream_infer(session, frame, label=None):
    return session.infer(frame, label)


def predict_clip_offline(model, clip):
    """Offline sequential inference, frame by frame with continuous state.

    Uses the identical per-frame code path as StreamSession, so streaming and
    offline outputs are bitwise equal for the same checkpoint.
    """
    h, c = model.initial_state(1)
    preds = np.empty(len(clip), dtype=np.int64)
    all_probs = np.empty((len(clip), 3), dtype=np.float32)
    for i, frame in enumerate(clip.iter_frames()):
        feat = model.conv_features(preprocess_frame(frame)[None])
        probs, h, c = model.step(feat, h, c)
        preds[i] = int(probs[0].argmax())
        all_probs[i] = probs[0]
    return preds, all_probs


class ReplaySource:
    """Iterate a clip's frames at a fixed cadence; fps=0 means as fast as possible.

    Frames whose deadline has already passed when the consumer asks for the
    next one are dropped and counted.
    """

    def __init__(self, clip, fps=30.0):
        if fps < 0:
            raise ValueError("fps must be >= 0")
        self.clip = clip
        self.fps = fps
        self.drops = 0

    def __iter__(self):
        n = len(self.clip)
        start = time.perf_counter()
        i = 0
        while i < n:
            if self.fps > 0:
                due = start + i / self.fps
                now = time.perf_counter()
                if now < due:
                    time.sleep(due - now)
                else:
                    # consumer is late; skip frames that are already stale
                    current = int((now - start) * self.fps)
                    if current > i:
                        skip = min(current - i, n - 1 - i)
                        self.drops += skip
                        i += skip
            try:
                frame = self.clip.load_frame(i)
            except Exception as exc:
                raise StreamError(f"missing or unreadable frame {i}: {exc}") from exc
            yield i, frame
            i += 1


def write_raw_frame(fh, frame_index, frame):
    """Emit one frame in the raw pipe wire format."""
    h, w = frame.shape[:2]
    fh.write(RAW_HEADER.pack(w, h, frame_index))
    fh.write(np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


def read_raw_frames(fh):
    """Yield (frame_index, RGB frame) from a raw-frame pipe until EOF."""
    while True:
        header = fh.read(RAW_HEADER.size)
        if not header:
            return
        if len(header) < RAW_HEADER.size:
            raise StreamError("truncated raw frame header")
        w, h, idx = RAW_HEADER.unpack(header)
        nbytes = w * h * 3
        payload = fh.read(nbytes)
        if len(payload) < nbytes:
            raise StreamError(f"truncated payload for frame {idx}")
        yield idx, np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def format_record(frame_index, state, probs, latency_ms):
    return (
        f"{frame_index},{NeedleState(state).label},"
        f"{probs[0]:.6f},{probs[1]:.6f},{probs[2]:.6f},{latency_ms:.3f}"
    )


@dataclass
class SessionReport:
    frames: int
    accuracy: float  # nan when no labels were supplied
    mean_latency_ms: float
    p95_latency_ms: float
    mean_preprocess_ms: float
    mean_network_ms: float
    achieved_fps: float
    transitions: list  # (frame_index, from_state, to_state)


def session_report(session):
    if session.frame_count < 1:
        raise ValueError("session has processed no frames")
    totals = np.array([r.total_ms for r in session.latencies])
    acc = float("nan")
    if session.labels and len(session.labels) == len(session.predictions):
        acc = per_video_accuracy(session.predictions, session.labels)
    elapsed = session.elapsed_s()
    return SessionReport(
        frames=session.frame_count,
        accuracy=acc,
        mean_latency_ms=float(totals.mean()),
        p95_latency_ms=float(np.percentile(totals, 95)),
        mean_preprocess_ms=float(np.mean([r.preprocess_ms for r in session.latencies])),
        mean_network_ms=float(np.mean([r.network_ms for r in session.latencies])),
        achieved_fps=session.frame_count / elapsed if elapsed > 0 else float("inf"),
        transitions=transitions(session.predictions),
    )
