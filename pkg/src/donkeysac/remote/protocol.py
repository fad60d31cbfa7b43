"""Minimal topic-based framing used between the car and the trainer.

Frame layout (little-endian)::

    magic 'D' 'K' | topic length u8 | topic utf-8 | sequence u64 | send time u64 (us) |
    payload length u32 | payload
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"\x44\x4b"
MAX_PAYLOAD = 16 * 1024 * 1024
_TAIL = struct.Struct("<QQI")

TOPIC_OBS = "obs"
TOPIC_CTRL = "ctrl"
TOPIC_EPISODE = "episode"


class ProtocolError(ValueError):
    """Any malformed buffer."""


class BadMagicError(ProtocolError):
    pass


class TruncatedError(ProtocolError):
    pass


class LengthOverflowError(ProtocolError):
    pass


class BadTopicError(ProtocolError):
    pass


class TrailingDataError(ProtocolError):
    pass


@dataclass(frozen=True)
class Frame:
    topic: str
    sequence: int
    send_timestamp: int  # microseconds
    payload: bytes


def header_size(topic: str) -> int:
    return len(MAGIC) + 1 + len(topic.encode("utf-8")) + _TAIL.size


def encode_frame(f: Frame) -> bytes:
    topic = f.topic.encode("utf-8")
    if len(topic) >= 256:
        raise ValueError("topic must encode to fewer than 256 bytes")
    if len(f.payload) > MAX_PAYLOAD:
        raise ValueError("payload too large")
    return b"".join((MAGIC, bytes((len(topic),)), topic,
                     _TAIL.pack(f.sequence, f.send_timestamp, len(f.payload)), bytes(f.payload)))


def decode_prefix(buf: bytes) -> tuple[Frame, int]:
    """Decode one frame from the start of ``buf``; returns (frame, bytes consumed)."""
    mv = memoryview(buf)
    if len(mv) < 3:
        if len(mv) and bytes(mv[: len(MAGIC)]) != MAGIC[: len(mv)]:
            raise BadMagicError("bad magic")
        raise TruncatedError("buffer shorter than the fixed header")
    if bytes(mv[:2]) != MAGIC:
        raise BadMagicError("bad magic")
    n_topic = mv[2]
    pos = 3 + n_topic
    if len(mv) < pos + _TAIL.size:
        raise TruncatedError("buffer ends inside the header")
    try:
        topic = bytes(mv[3:pos]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise BadTopicError("topic is not valid UTF-8") from exc
    seq, ts, n_payload = _TAIL.unpack_from(mv, pos)
    pos += _TAIL.size
    if n_payload > MAX_PAYLOAD:
        raise LengthOverflowError(f"declared payload length {n_payload} exceeds {MAX_PAYLOAD}")
    if len(mv) < pos + n_payload:
        raise TruncatedError("buffer ends inside the payload")
    return Frame(topic, seq, ts, bytes(mv[pos:pos + n_payload])), pos + n_payload


def decode_frame(buf: bytes) -> Frame:
    frame, used = decode_prefix(buf)
    if used != len(buf):
        raise TrailingDataError(f"{len(buf) - used} unexpected trailing bytes")
    return frame


# ------------------------------------------------------------------ payloads

_OBS_HEAD = struct.Struct("<HHQ")
_CTRL = struct.Struct("<ff")
_EPISODE = struct.Struct("<BI")


@dataclass(frozen=True)
class ObservationPayload:
    width: int
    height: int
    pixels: bytes  # 8-bit grayscale, row-major
    capture_timestamp: int  # microseconds

    def __post_init__(self):
        if len(self.pixels) != self.width * self.height:
            raise ProtocolError("pixel byte count does not match width*height")

    @classmethod
    def from_frame(cls, image: np.ndarray, capture_timestamp: int) -> "ObservationPayload":
        img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
        h, w = img.shape
        return cls(w, h, img.tobytes(), int(capture_timestamp))

    def image(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width)

    def encode(self) -> bytes:
        return _OBS_HEAD.pack(self.width, self.height, self.capture_timestamp) + self.pixels

    @classmethod
    def decode(cls, buf: bytes) -> "ObservationPayload":
        if len(buf) < _OBS_HEAD.size:
            raise TruncatedError("observation payload shorter than its header")
        w, h, ts = _OBS_HEAD.unpack_from(buf)
        pixels = bytes(buf[_OBS_HEAD.size:])
        if len(pixels) != w * h:
            raise TruncatedError(f"observation payload has {len(pixels)} pixel bytes, expected {w * h}")
        return cls(w, h, pixels, ts)


def _clamp_unit(v: float) -> float:
    if v != v:  # NaN maps to neutral
        return 0.0
    return min(1.0, max(-1.0, v))


@dataclass(frozen=True)
class ControlPayload:
    steering: float
    throttle: float

    def encode(self) -> bytes:
        return _CTRL.pack(self.steering, self.throttle)

    @classmethod
    def decode(cls, buf: bytes) -> "ControlPayload":
        if len(buf) != _CTRL.size:
            raise TruncatedError(f"control payload must be {_CTRL.size} bytes, got {len(buf)}")
        s, t = _CTRL.unpack(buf)
        return cls(_clamp_unit(s), _clamp_unit(t))


EPISODE_RESET, EPISODE_END = 0, 1


@dataclass(frozen=True)
class EpisodePayload:
    kind: int
    episode: int

    def encode(self) -> bytes:
        return _EPISODE.pack(self.kind, self.episode)

    @classmethod
    def decode(cls, buf: bytes) -> "EpisodePayload":
        if len(buf) != _EPISODE.size:
            raise TruncatedError("episode payload has the wrong size")
        kind, ep = _EPISODE.unpack(buf)
        if kind not in (EPISODE_RESET, EPISODE_END):
            raise ProtocolError(f"unknown episode message kind {kind}")
        return cls(kind, ep)
