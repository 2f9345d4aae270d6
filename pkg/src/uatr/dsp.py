"""Speech-convention acoustic features for the encoder.

Pipeline: Hamming-windowed frames -> power spectrum -> triangular mel
filterbank -> natural log with a floor -> frame stacking with temporal
downsampling -> optional per-utterance standardization.

Defaults follow the common speech front end: 25 ms windows, 10 ms hop,
80 mel bands to 8 kHz, stack 7 frames and keep every 6th.  All of it is
configuration; nothing is hard-coded beyond the window type and log base.
Internally everything is float64, the emitted frames are float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer
from .errors import ConfigError, CorruptFileError, TooShortError

FEATURE_CACHE_MAGIC = b"UATRFEAT"
FEATURE_CACHE_VERSION = 1


@dataclass(frozen=True)
class MelConfig:
    win_samples: int = 400
    hop_samples: int = 160
    fft_size: int = 512
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    lfr_m: int = 7
    lfr_n: int = 6
    normalize: bool = True

    def validate(self, sample_rate: int) -> None:
        if self.win_samples > self.fft_size:
            raise ConfigError("win_samples must not exceed fft_size")
        if not 0 < self.hop_samples <= self.win_samples:
            raise ConfigError("hop_samples must be in (0, win_samples]")
        if not 0 <= self.f_min < self.f_max <= sample_rate / 2:
            raise ConfigError(
                f"need 0 <= f_min < f_max <= {sample_rate / 2}, "
                f"got [{self.f_min}, {self.f_max}]"
            )
        if self.lfr_m < 1 or self.lfr_n < 1:
            raise ConfigError("lfr_m and lfr_n must be >= 1")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def stacked_dim(self) -> int:
        return self.lfr_m * self.n_mels

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "MelConfig":
        return cls(**payload)

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FeatureSequence:
    """Time-major feature matrix with its frame rate."""

    frames: np.ndarray  # (T, D) float32
    frame_rate: float

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: MelConfig, sample_rate: int) -> np.ndarray:
    """Triangular filters, shape (n_mels, fft_size // 2 + 1)."""
    config.validate(sample_rate)
    n_bins = config.fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * sample_rate / config.fft_size
    edges = mel_to_hz(np.linspace(
        hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2))
    fbank = np.zeros((config.n_mels, n_bins), dtype=np.float64)
    for m in range(config.n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fbank[m] = np.maximum(0.0, np.minimum(rising, falling))
        if not fbank[m].any():
            raise ConfigError(
                f"mel filter {m} has empty support; lower n_mels or raise fft_size"
            )
    return fbank


def filter_centers_hz(config: MelConfig) -> np.ndarray:
    """Center frequency of each mel filter in Hz."""
    edges = mel_to_hz(np.linspace(
        hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2))
    return edges[1:-1]


def frame_count(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        return 0
    return 1 + (n_samples - win) // hop


def power_spectrum(frame: np.ndarray, fft_size: int) -> np.ndarray:
    """|rfft|^2 of a (windowed) frame zero-padded to fft_size, in float64."""
    return np.abs(np.fft.rfft(frame, n=fft_size)) ** 2


def log_mel(buf: AudioBuffer, config: MelConfig) -> FeatureSequence:
    """Log-mel energies, shape (1 + floor((len - win) / hop), n_mels)."""
    config.validate(buf.sample_rate)
    n = len(buf)
    if n < config.win_samples:
        raise TooShortError(
            f"buffer of {n} samples is shorter than one {config.win_samples}-sample window"
        )
    n_frames = frame_count(n, config.win_samples, config.hop_samples)
    window = np.hamming(config.win_samples)
    fbank = mel_filterbank(config, buf.sample_rate)

    stride = buf.samples.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        buf.samples,
        shape=(n_frames, config.win_samples),
        strides=(config.hop_samples * stride, stride),
    )
    spectra = np.abs(np.fft.rfft(frames * window, n=config.fft_size, axis=1)) ** 2
    energies = spectra @ fbank.T
    feats = np.log(np.maximum(energies, config.log_floor))
    return FeatureSequence(
        frames=feats.astype(np.float32),
        frame_rate=buf.sample_rate / config.hop_samples,
    )


def lfr_stack(feat: FeatureSequence, m: int, n: int) -> FeatureSequence:
    """Stack m consecutive frames, keep every n-th stack.

    Indices past the end clamp to the last frame, so short inputs are
    repeat-padded rather than silence-padded.
    """
    if m < 1 or n < 1:
        raise ConfigError("stack factor m and downsample factor n must be >= 1")
    t = len(feat)
    if t == 0:
        raise TooShortError("cannot stack an empty feature sequence")
    if m == 1 and n == 1:
        return FeatureSequence(feat.frames.copy(), feat.frame_rate)
    out_t = -(-t // n)  # ceil(t / n)
    idx = np.minimum(
        np.arange(out_t)[:, None] * n + np.arange(m)[None, :], t - 1)
    stacked = feat.frames[idx].reshape(out_t, m * feat.dim)
    return FeatureSequence(stacked, feat.frame_rate / n)


def utterance_normalize(feat: FeatureSequence) -> FeatureSequence:
    """Per-dimension zero mean, unit variance over time (std floored at 1e-5)."""
    if len(feat) == 0:
        raise TooShortError("cannot normalize an empty feature sequence")
    x = feat.frames.astype(np.float64)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-5)
    out = ((x - mean) / std).astype(np.float32)
    return FeatureSequence(out, feat.frame_rate)


def featurize(buf: AudioBuffer, config: MelConfig) -> FeatureSequence:
    """Full front end: log-mel -> stack/downsample -> optional normalization."""
    feat = log_mel(buf, config)
    feat = lfr_stack(feat, config.lfr_m, config.lfr_n)
    if config.normalize:
        feat = utterance_normalize(feat)
    return feat


class FeatureCache:
    """Optional on-disk cache, one file per clip.

    Layout: magic, version, header length, JSON header (shape, frame rate,
    config hash), then row-major little-endian float32 frames.
    """

    def __init__(self, cache_dir: str | Path, config: MelConfig):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.config_hash = config.hash()

    def _path(self, file_id: str, clip_index: int) -> Path:
        key = hashlib.sha256(
            f"{file_id}#{clip_index}#{self.config_hash}".encode()).hexdigest()[:32]
        return self.dir / f"{key}.feat"

    def store(self, file_id: str, clip_index: int, feat: FeatureSequence) -> None:
        header = json.dumps({
            "frames": feat.frames.shape[0],
            "dim": feat.frames.shape[1],
            "frame_rate": feat.frame_rate,
            "config_hash": self.config_hash,
        }, sort_keys=True).encode()
        payload = feat.frames.astype("<f4").tobytes()
        blob = (FEATURE_CACHE_MAGIC
                + struct.pack("<II", FEATURE_CACHE_VERSION, len(header))
                + header + payload)
        self._path(file_id, clip_index).write_bytes(blob)

    def load(self, file_id: str, clip_index: int) -> FeatureSequence | None:
        path = self._path(file_id, clip_index)
        if not path.exists():
            return None
        raw = path.read_bytes()
        if raw[:8] != FEATURE_CACHE_MAGIC:
            raise CorruptFileError(f"{path}: bad feature-cache magic")
        version, hlen = struct.unpack("<II", raw[8:16])
        if version != FEATURE_CACHE_VERSION:
            raise CorruptFileError(f"{path}: feature-cache version {version}")
        header = json.loads(raw[16:16 + hlen])
        if header["config_hash"] != self.config_hash:
            return None
        frames = np.frombuffer(raw[16 + hlen:], dtype="<f4")
        expected = header["frames"] * header["dim"]
        if frames.size != expected:
            raise CorruptFileError(f"{path}: payload size mismatch")
        return FeatureSequence(
            frames.reshape(header["frames"], header["dim"]).copy(),
            header["frame_rate"],
        )
