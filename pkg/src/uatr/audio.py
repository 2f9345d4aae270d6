"""Audio primitives: WAV decode/encode, band-limited resampling, segmentation.

The reader handles RIFF/WAVE with 16-bit PCM or 32-bit IEEE float payloads,
mono or stereo.  Stereo is downmixed by per-sample channel average and 16-bit
samples map to s/32768, so the full int16 range lands in [-1, 1).

Resampling is windowed-sinc polyphase (Kaiser beta=8.6, 32 zero-crossings per
side, cutoff at the lower of the two Nyquist frequencies).  The inner dot
products run through :mod:`uatr.kernels`.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import (
    AudioFormatError,
    ConfigError,
    CorruptFileError,
    EmptyAudioError,
)
from .kernels import resample_core

KAISER_BETA = 8.6
ZERO_CROSSINGS = 32

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


@dataclass
class AudioBuffer:
    """Mono sample sequence with its sample rate."""

    samples: np.ndarray  # 1-d float64
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ConfigError("AudioBuffer samples must be one-dimensional")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _parse_fmt_chunk(payload: bytes) -> tuple[int, int, int, int]:
    if len(payload) < 16:
        raise CorruptFileError("fmt chunk shorter than 16 bytes")
    fmt, channels, rate, _byte_rate, _align, bits = struct.unpack(
        "<HHIIHH", payload[:16]
    )
    if fmt == _FMT_EXTENSIBLE:
        # format code repeats in the first two bytes of the SubFormat GUID
        if len(payload) < 26:
            raise CorruptFileError("extensible fmt chunk truncated")
        fmt = struct.unpack("<H", payload[24:26])[0]
    return fmt, channels, rate, bits


def read_wav(path: str | Path) -> AudioBuffer:
    """Decode a RIFF/WAVE file into a mono, [-1, 1] AudioBuffer.

    Raises AudioFormatError for unsupported encodings, CorruptFileError for
    truncated payloads, EmptyAudioError for zero-sample files.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = _parse_fmt_chunk(body)
        elif cid == b"data":
            if len(body) < size:
                raise CorruptFileError(
                    f"{path}: data chunk declares {size} bytes, "
                    f"only {len(body)} present"
                )
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    code, channels, rate, bits = fmt
    if channels not in (1, 2):
        raise AudioFormatError(f"{path}: {channels} channels unsupported")

    if code == _FMT_PCM and bits == 16:
        frame_bytes = 2 * channels
        if len(data) % frame_bytes:
            raise CorruptFileError(f"{path}: data size not a whole frame count")
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif code == _FMT_FLOAT and bits == 32:
        frame_bytes = 4 * channels
        if len(data) % frame_bytes:
            raise CorruptFileError(f"{path}: data size not a whole frame count")
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(x)):
            raise CorruptFileError(f"{path}: non-finite float samples")
        x = np.clip(x, -1.0, 1.0)
    else:
        raise AudioFormatError(
            f"{path}: unsupported encoding (format {code}, {bits}-bit)"
        )

    if channels == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    if x.shape[0] == 0:
        raise EmptyAudioError(f"{path}: zero samples")
    return AudioBuffer(x, rate)


def wav_frame_count(path: str | Path) -> tuple[int, int]:
    """(frames, sample_rate) from the header alone, without decoding."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data_size = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        if cid == b"fmt ":
            fmt = _parse_fmt_chunk(raw[pos + 8:pos + 8 + size])
        elif cid == b"data":
            data_size = min(size, len(raw) - pos - 8)
        pos += 8 + size + (size & 1)
    if fmt is None or data_size is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    code, channels, rate, bits = fmt
    bytes_per_frame = channels * (2 if bits == 16 else 4)
    return data_size // bytes_per_frame, rate


def write_wav(path: str | Path, buf: AudioBuffer) -> None:
    """Write mono 16-bit PCM; quantization error is at most one LSB."""
    q = np.clip(np.rint(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(buf.sample_rate)
        w.writeframes(q.tobytes())


def _kaiser(x: np.ndarray, beta: float) -> np.ndarray:
    """Continuous Kaiser window on [-1, 1], zero outside."""
    inside = np.abs(x) <= 1.0
    out = np.zeros_like(x)
    out[inside] = np.i0(beta * np.sqrt(1.0 - x[inside] ** 2)) / np.i0(beta)
    return out


@lru_cache(maxsize=16)
def _design_polyphase(src_rate: int, target_rate: int) -> tuple[np.ndarray, int, int, int]:
    """Polyphase tap matrix (up, 2H+1) plus (up, down, H) for a rate pair."""
    g = math.gcd(src_rate, target_rate)
    up = target_rate // g
    down = src_rate // g
    cutoff = min(1.0, up / down)  # relative to the input Nyquist
    half_width = ZERO_CROSSINGS / cutoff
    h = int(math.ceil(half_width))
    taps = np.empty((up, 2 * h + 1), dtype=np.float64)
    offsets = np.arange(2 * h + 1, dtype=np.float64) - h
    for p in range(up):
        u = p / up + offsets
        taps[p] = cutoff * np.sinc(cutoff * u) * _kaiser(u / half_width, KAISER_BETA)
        taps[p] /= taps[p].sum()  # unit DC gain per phase
    return taps, up, down, h


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resample; output length round(len * target / src)."""
    if target_rate <= 0:
        raise ConfigError(f"target_rate must be positive, got {target_rate}")
    if len(buf) == 0:
        raise EmptyAudioError("cannot resample an empty buffer")
    if buf.sample_rate == target_rate:
        return AudioBuffer(buf.samples.copy(), target_rate)

    taps, up, down, h = _design_polyphase(buf.sample_rate, target_rate)
    n = len(buf)
    out_len = (2 * n * up + down) // (2 * down)  # round(n*up/down), half up
    xpad = np.zeros(n + 2 * h, dtype=np.float64)
    xpad[h:h + n] = buf.samples
    out = np.empty(out_len, dtype=np.float64)
    resample_core(xpad, taps, up, down, 2 * h, out)
    return AudioBuffer(out, target_rate)


def resampled_length(n: int, src_rate: int, target_rate: int) -> int:
    """Length resample() will produce for an n-sample input."""
    if src_rate == target_rate:
        return n
    g = math.gcd(src_rate, target_rate)
    up, down = target_rate // g, src_rate // g
    return (2 * n * up + down) // (2 * down)


def clip_sample_count(sample_rate: int, clip_seconds: float) -> int:
    """Samples per clip; sample_rate * clip_seconds must be a whole number."""
    exact = sample_rate * clip_seconds
    n = int(round(exact))
    if n <= 0 or abs(exact - n) > 1e-9:
        raise ConfigError(
            f"clip_seconds {clip_seconds} does not give a whole sample count "
            f"at {sample_rate} Hz"
        )
    return n


def segment(buf: AudioBuffer, clip_seconds: float) -> list[AudioBuffer]:
    """Split into non-overlapping fixed-length clips; remainder dropped."""
    n = clip_sample_count(buf.sample_rate, clip_seconds)
    count = len(buf) // n
    return [
        AudioBuffer(buf.samples[i * n:(i + 1) * n].copy(), buf.sample_rate)
        for i in range(count)
    ]
