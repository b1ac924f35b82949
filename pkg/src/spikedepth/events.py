"""DVS event streams and their conversion to spike histograms.

Events are binned per polarity over half-open time windows [t0, t0+dt),
producing integer count rasters ("spike histograms"). Several consecutive
histograms are concatenated channel-wise into the network input chunk.
Counts are fed raw: no normalization is ever applied, so the input stays
an integer spike volume.

Channel convention (fixed): channel 0 = ON counts, channel 1 = OFF counts.

Also implements the native `.evt` binary file format, see EVT_MAGIC below.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

POLARITY_ON = 1
POLARITY_OFF = 0

EVT_MAGIC = b"EVTS"
EVT_VERSION = 1
_EVT_HEADER = struct.Struct("<4sHHH6x")   # magic, version, H, W, pad to 16 bytes
_EVT_RECORD = struct.Struct("<QHHBx")     # t (us), x, y, polarity, pad to 14 bytes


class EventFormatError(ValueError):
    """Raised when an `.evt` file is malformed."""


@dataclass(frozen=True)
class Event:
    """A single DVS event: timestamp in microseconds, pixel, polarity."""
    t: int
    x: int
    y: int
    polarity: int  # POLARITY_ON or POLARITY_OFF


@dataclass
class EventStream:
    """Time-ordered event arrays plus the sensor geometry.

    Stored as parallel numpy arrays for fast binning; `t` must be
    non-decreasing and all coordinates must lie inside (height, width).
    """
    t: np.ndarray      # uint64, microseconds
    x: np.ndarray      # uint16
    y: np.ndarray      # uint16
    polarity: np.ndarray  # uint8, 1=ON 0=OFF
    height: int
    width: int

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.uint64)
        self.x = np.asarray(self.x, dtype=np.uint16)
        self.y = np.asarray(self.y, dtype=np.uint16)
        self.polarity = np.asarray(self.polarity, dtype=np.uint8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.polarity) == n):
            raise ValueError("event arrays must have equal length")
        if n and np.any(np.diff(self.t.astype(np.int64)) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if n and (self.x.max() >= self.width or self.y.max() >= self.height):
            raise ValueError("event coordinates outside sensor geometry")

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield Event(int(self.t[i]), int(self.x[i]), int(self.y[i]),
                        int(self.polarity[i]))

    @classmethod
    def from_events(cls, events, height: int, width: int) -> "EventStream":
        events = list(events)
        return cls(
            t=np.array([e.t for e in events], dtype=np.uint64),
            x=np.array([e.x for e in events], dtype=np.uint16),
            y=np.array([e.y for e in events], dtype=np.uint16),
            polarity=np.array([e.polarity for e in events], dtype=np.uint8),
            height=height, width=width,
        )

    @classmethod
    def empty(cls, height: int, width: int) -> "EventStream":
        z = np.zeros(0)
        return cls(t=z, x=z, y=z, polarity=z, height=height, width=width)


@dataclass
class SpikeHistogram:
    """Per-polarity event counts over one time window, shape (2, H, W)."""
    counts: np.ndarray
    window_start: int
    window_end: int


@dataclass
class InputChunk:
    """n consecutive histograms stacked channel-wise: shape (2n, H, W)."""
    data: np.ndarray
    n_frames: int
    window_length_ms: float = field(default=0.0)


def bin_events(stream: EventStream, t0: int, dt: int) -> SpikeHistogram:
    """Count events per polarity and pixel over the half-open window [t0, t0+dt)."""
    if dt <= 0:
        raise ValueError("window length dt must be positive")
    counts = np.zeros((2, stream.height, stream.width), dtype=np.int64)
    if len(stream):
        t = stream.t
        lo = np.searchsorted(t, np.uint64(t0), side="left")
        hi = np.searchsorted(t, np.uint64(t0 + dt), side="left")
        if hi > lo:
            # channel 0 = ON, channel 1 = OFF
            ch = np.where(stream.polarity[lo:hi] == POLARITY_ON, 0, 1)
            flat = (ch * stream.height + stream.y[lo:hi].astype(np.int64)) \
                * stream.width + stream.x[lo:hi].astype(np.int64)
            counts = np.bincount(flat, minlength=counts.size).reshape(counts.shape)
    return SpikeHistogram(counts=counts, window_start=t0, window_end=t0 + dt)


def make_chunk(stream: EventStream, t0: int, n: int, dt: int) -> InputChunk:
    """Concatenate n contiguous, non-overlapping histograms channel-wise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    frames = [bin_events(stream, t0 + k * dt, dt).counts for k in range(n)]
    return InputChunk(data=np.concatenate(frames, axis=0), n_frames=n,
                      window_length_ms=dt / 1000.0)


def write_evt(stream: EventStream, path) -> None:
    """Write a stream to the native `.evt` binary format (little-endian)."""
    with open(path, "wb") as f:
        f.write(_EVT_HEADER.pack(EVT_MAGIC, EVT_VERSION, stream.height, stream.width))
        if len(stream):
            rec = np.zeros(len(stream), dtype=np.dtype(
                [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")]))
            rec["t"] = stream.t
            rec["x"] = stream.x
            rec["y"] = stream.y
            rec["p"] = stream.polarity
            f.write(rec.tobytes())


def read_evt(path) -> EventStream:
    """Read a `.evt` file; raises EventFormatError on malformed input."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _EVT_HEADER.size:
        raise EventFormatError(f"{path}: truncated header")
    magic, version, height, width = _EVT_HEADER.unpack_from(raw)
    if magic != EVT_MAGIC:
        raise EventFormatError(f"{path}: bad magic {magic!r}")
    if version != EVT_VERSION:
        raise EventFormatError(f"{path}: unsupported version {version}")
    body = raw[_EVT_HEADER.size:]
    if len(body) % _EVT_RECORD.size:
        raise EventFormatError(f"{path}: truncated record section")
    rec = np.frombuffer(body, dtype=np.dtype(
        [("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1"), ("pad", "u1")]))
    return EventStream(t=rec["t"].copy(), x=rec["x"].copy(), y=rec["y"].copy(),
                       polarity=rec["p"].copy(), height=height, width=width)
