"""Deterministic two-domain synthetic corpus generator.

The source domain is speech-like: harmonic series on a category-specific
fundamental band with formant-style spectral emphases, slow vibrato, and an
on/off amplitude envelope.  The target domain is ship-like: narrowband tonal
lines at blade-rate harmonics over broadband noise amplitude-modulated at the
shaft rate, with category-specific line spacing and modulation depth.

Every clip is a pure function of (spec, category, clip index), so corpora are
byte-identical across runs and clip generation parallelizes trivially.  Clips
are written as 16-bit PCM WAV so downstream runs exercise the real decode
path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, write_wav
from .errors import ConfigError

_DOMAIN_CODES = {"source": 0, "target": 1}


@dataclass(frozen=True)
class SynthSpec:
    domain: str
    num_categories: int = 4
    clips_per_category: int = 30
    clip_seconds: float = 1.0
    sample_rate: int = 16000
    snr_db_range: tuple[float, float] = (5.0, 20.0)
    seed: int = 0

    def __post_init__(self):
        if self.domain not in _DOMAIN_CODES:
            raise ConfigError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.num_categories < 2:
            raise ConfigError("need at least 2 categories")
        if self.clips_per_category < 1:
            raise ConfigError("need at least 1 clip per category")
        if self.snr_db_range[0] > self.snr_db_range[1]:
            raise ConfigError("snr_db_range low must not exceed high")

    def to_json(self) -> dict:
        d = asdict(self)
        d["snr_db_range"] = list(self.snr_db_range)
        return d

    @classmethod
    def from_json(cls, payload: dict) -> "SynthSpec":
        payload = dict(payload)
        payload["snr_db_range"] = tuple(payload["snr_db_range"])
        return cls(**payload)


# Small desk-scale corpus trio: pretraining source, fine-tuning target,
# and a target test set of longer files so variable-length protocols have
# material to re-segment.
DESK_SPECS = {
    "source": SynthSpec(domain="source", clips_per_category=200),
    "target_train": SynthSpec(domain="target", clips_per_category=30,
                              snr_db_range=(2.0, 15.0)),
    "target_test": SynthSpec(domain="target", clips_per_category=10,
                             clip_seconds=4.0, snr_db_range=(2.0, 15.0)),
}


def desk_spec(name: str, seed: int = 0) -> SynthSpec:
    base = DESK_SPECS[name].to_json()
    base["seed"] = seed
    return SynthSpec.from_json(base)


def _clip_rng(spec: SynthSpec, category: int, clip_index: int):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        [spec.seed, _DOMAIN_CODES[spec.domain], category, clip_index])))


def _peak_normalize(x: np.ndarray, peak: float = 0.9) -> np.ndarray:
    top = np.max(np.abs(x))
    return x * (peak / top) if top > 0 else x


def _add_noise(x: np.ndarray, rng, snr_db: float) -> np.ndarray:
    rms = np.sqrt(np.mean(x ** 2))
    noise = rng.standard_normal(x.shape)
    noise *= rms / (10.0 ** (snr_db / 20.0)) / np.sqrt(np.mean(noise ** 2))
    return x + noise


def tonal_component(t: np.ndarray, freqs: np.ndarray, amps: np.ndarray,
                    phases: np.ndarray) -> np.ndarray:
    """Sum of stationary sinusoidal lines."""
    out = np.zeros_like(t)
    for f, a, p in zip(freqs, amps, phases):
        out += a * np.sin(2.0 * np.pi * f * t + p)
    return out


def _band_noise(rng, n: int, sr: int, f_lo: float, f_hi: float,
                ramp: float = 200.0) -> np.ndarray:
    """Unit-RMS noise band-limited to [f_lo, f_hi] with cosine edges."""
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    weight = np.zeros_like(f)
    inside = (f >= f_lo) & (f <= f_hi)
    weight[inside] = 1.0
    lo_edge = (f >= f_lo - ramp) & (f < f_lo)
    weight[lo_edge] = 0.5 * (1 + np.cos(np.pi * (f_lo - f[lo_edge]) / ramp))
    hi_edge = (f > f_hi) & (f <= f_hi + ramp)
    weight[hi_edge] = 0.5 * (1 + np.cos(np.pi * (f[hi_edge] - f_hi) / ramp))
    x = np.fft.irfft(spectrum * weight, n=n)
    return x / np.sqrt(np.mean(x ** 2))


def _apply_tilt(x: np.ndarray, sr: int, tilt_db_per_octave: float) -> np.ndarray:
    """Spectral tilt around 500 Hz, a stand-in for channel coloration."""
    spectrum = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1.0 / sr)
    octaves = np.log2(np.maximum(f, 20.0) / 500.0)
    spectrum *= 10.0 ** (tilt_db_per_octave * octaves / 20.0)
    return np.fft.irfft(spectrum, n=len(x))


def _channel(x: np.ndarray, rng, sr: int) -> np.ndarray:
    """Recording-condition nuisance shared by both domains: random spectral
    tilt, peak normalization, then a random overall level."""
    x = _apply_tilt(x, sr, rng.uniform(-6.0, 6.0))
    x = _peak_normalize(x)
    return x * 10.0 ** (rng.uniform(-24.0, 0.0) / 20.0)


def _gate_envelope(rng, n: int, sr: int) -> np.ndarray:
    """On/off envelope with random segment lengths and 10 ms cosine ramps."""
    ramp = int(0.010 * sr)
    env = np.zeros(n)
    pos = 0
    state = True  # always start voiced so the clip is never silent
    while pos < n:
        seg = int(rng.uniform(0.08, 0.30) * sr)
        if state:
            env[pos:pos + seg] = 1.0
        pos += seg
        state = not state
    kernel = np.hanning(2 * ramp + 1)
    kernel /= kernel.sum()
    return np.convolve(env, kernel, mode="same")


def draw_source_params(spec: SynthSpec, category: int, clip_index: int) -> dict:
    rng = _clip_rng(spec, category, clip_index)
    f0 = rng.uniform(90.0 + 40.0 * category, 130.0 + 40.0 * category)
    n_partials = 10
    partials = np.arange(1, n_partials + 1)
    amps = 1.0 / partials
    for _ in range(2):  # formant-like emphases
        center = rng.uniform(300.0, 3500.0)
        width = rng.uniform(80.0, 300.0)
        amps = amps * (1.0 + 5.0 * np.exp(-((partials * f0 - center) ** 2)
                                          / (2.0 * width ** 2)))
    return {
        "f0": f0,
        "partial_amps": amps,
        "partial_phases": rng.uniform(0.0, 2.0 * np.pi, n_partials),
        "vibrato_depth": rng.uniform(0.01, 0.03),
        "vibrato_hz": rng.uniform(4.0, 7.0),
        "vibrato_phase": rng.uniform(0.0, 2.0 * np.pi),
        "snr_db": rng.uniform(*spec.snr_db_range),
        "rng": rng,
    }


def synthesize_source_clip(spec: SynthSpec, category: int, clip_index: int) -> AudioBuffer:
    p = draw_source_params(spec, category, clip_index)
    rng = p["rng"]
    sr = spec.sample_rate
    n = int(round(spec.clip_seconds * sr))
    t = np.arange(n) / sr
    f_inst = p["f0"] * (1.0 + p["vibrato_depth"]
                        * np.sin(2.0 * np.pi * p["vibrato_hz"] * t
                                 + p["vibrato_phase"]))
    phase = 2.0 * np.pi * np.cumsum(f_inst) / sr
    x = np.zeros(n)
    for k, (a, ph) in enumerate(zip(p["partial_amps"], p["partial_phases"]), start=1):
        if k * p["f0"] * 1.05 < sr / 2:
            x += a * np.sin(k * phase + ph)
    x *= _gate_envelope(rng, n, sr)
    x = _add_noise(x, rng, p["snr_db"])
    return AudioBuffer(_channel(x, rng, sr), sr)


# Per-category propeller parameters (shaft band index, blade count).  The
# order is shuffled relative to the category index so that category order
# does not accidentally track frequency order across the two domains.
_PROPELLERS = ((2, 17), (0, 12), (3, 20), (1, 14))


def draw_target_params(spec: SynthSpec, category: int, clip_index: int) -> dict:
    rng = _clip_rng(spec, category, clip_index)
    band, blades = _PROPELLERS[category % 4]
    lo = 2.0 + 2.5 * band
    shaft_hz = rng.uniform(lo, lo + 2.0)
    blade_hz = blades * shaft_hz
    n_lines = 20
    harmonics = np.arange(1, n_lines + 1)
    line_freqs = harmonics * blade_hz
    line_amps = (1.0 / np.sqrt(harmonics)) * rng.uniform(0.7, 1.3, n_lines)
    # cavitation-style noise band: center and width wander per clip, so the
    # average spectrum is dominated by nuisance coloration, not the comb
    band_lo = rng.uniform(100.0, 1500.0)
    return {
        "shaft_hz": shaft_hz,
        "blade_hz": blade_hz,
        "line_freqs": line_freqs,
        "line_amps": line_amps,
        "line_phases": rng.uniform(0.0, 2.0 * np.pi, n_lines),
        # tonal comb beats deeply at the shaft rate (blade-passage bursts)
        "beat_depth": rng.uniform(0.9, 1.0),
        "beat_phase": rng.uniform(0.0, 2.0 * np.pi),
        "mod_depth": 0.35 + 0.15 * (category % 4),
        "mod_phase": rng.uniform(0.0, 2.0 * np.pi),
        "band_lo": band_lo,
        "band_hi": min(band_lo * rng.uniform(2.0, 8.0), 7000.0),
        "broadband_gain": rng.uniform(0.4, 0.8),
        "snr_db": rng.uniform(*spec.snr_db_range),
        "rng": rng,
    }


def synthesize_target_clip(spec: SynthSpec, category: int, clip_index: int) -> AudioBuffer:
    p = draw_target_params(spec, category, clip_index)
    rng = p["rng"]
    sr = spec.sample_rate
    n = int(round(spec.clip_seconds * sr))
    t = np.arange(n) / sr
    tonals = tonal_component(t, p["line_freqs"], p["line_amps"], p["line_phases"])
    # blade-passage beat: raised-cosine pulse train at the shaft rate, so the
    # comb is audible in short bursts rather than continuously
    beat = np.maximum(np.cos(2.0 * np.pi * p["shaft_hz"] * t + p["beat_phase"]),
                      0.0) ** 2
    tonals = tonals * (1.0 - p["beat_depth"] + p["beat_depth"] * beat)
    tonals /= np.sqrt(np.mean(tonals ** 2))
    broadband = _band_noise(rng, n, sr, p["band_lo"], p["band_hi"])
    modulation = 1.0 + p["mod_depth"] * np.cos(2.0 * np.pi * p["shaft_hz"] * t
                                               + p["mod_phase"])
    x = tonals + p["broadband_gain"] * broadband * modulation
    x = _add_noise(x, rng, p["snr_db"])
    return AudioBuffer(_channel(x, rng, sr), sr)


def category_names(spec: SynthSpec) -> list[str]:
    prefix = "voice" if spec.domain == "source" else "ship"
    return [f"{prefix}{k}" for k in range(spec.num_categories)]


def generate_corpus(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Write the corpus WAVs plus a labels.json index; returns a summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synthesize = (synthesize_source_clip if spec.domain == "source"
                  else synthesize_target_clip)
    names = category_names(spec)
    labels: dict[str, str] = {}
    for cat, name in enumerate(names):
        (out / name).mkdir(exist_ok=True)
        for j in range(spec.clips_per_category):
            rel = f"{name}/clip{j:04d}.wav"
            write_wav(out / rel, synthesize(spec, cat, j))
            labels[rel] = name
    (out / "labels.json").write_text(
        json.dumps(labels, indent=2, sort_keys=True) + "\n")
    (out / "synth_spec.json").write_text(
        json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")
    return {"files": len(labels), "categories": names,
            "clip_seconds": spec.clip_seconds}
