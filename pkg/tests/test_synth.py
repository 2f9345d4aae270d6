import numpy as np
import pytest

from uatr.audio import read_wav
from uatr.dsp import MelConfig, log_mel
from uatr.errors import ConfigError
from uatr.synth import (
    SynthSpec,
    desk_spec,
    draw_target_params,
    generate_corpus,
    synthesize_source_clip,
    synthesize_target_clip,
    tonal_component,
)

SMALL_SOURCE = SynthSpec(domain="source", clips_per_category=6, seed=11)
SMALL_TARGET = SynthSpec(domain="target", clips_per_category=6, seed=11)


class TestSpec:
    def test_validation(self):
        with pytest.raises(ConfigError):
            SynthSpec(domain="ocean")
        with pytest.raises(ConfigError):
            SynthSpec(domain="source", num_categories=1)
        with pytest.raises(ConfigError):
            SynthSpec(domain="source", snr_db_range=(10.0, 0.0))

    def test_desk_presets_exist(self):
        assert desk_spec("source").clips_per_category == 200
        assert desk_spec("target_train").clips_per_category == 30
        # test preset: 10 files x 4 s = 40 one-second clips per category
        test = desk_spec("target_test")
        assert test.clips_per_category * test.clip_seconds == 40


class TestClips:
    @pytest.mark.parametrize("spec,synth", [
        (SMALL_SOURCE, synthesize_source_clip),
        (SMALL_TARGET, synthesize_target_clip),
    ])
    def test_deterministic_and_bounded(self, spec, synth):
        a = synth(spec, 1, 3)
        b = synth(spec, 1, 3)
        np.testing.assert_array_equal(a.samples, b.samples)
        assert len(a) == 16000
        assert np.max(np.abs(a.samples)) <= 0.9 + 1e-12

    def test_distinct_clips_differ(self):
        a = synthesize_target_clip(SMALL_TARGET, 0, 0)
        b = synthesize_target_clip(SMALL_TARGET, 0, 1)
        assert not np.array_equal(a.samples, b.samples)

    def test_tonal_lines_peak_at_specified_frequencies(self):
        # DFT oracle on the tonal component alone, 1 Hz bins
        p = draw_target_params(SMALL_TARGET, 2, 0)
        t = np.arange(16000) / 16000.0
        x = tonal_component(t, p["line_freqs"][:6], p["line_amps"][:6],
                            p["line_phases"][:6])
        spectrum = np.abs(np.fft.rfft(x))
        for f in p["line_freqs"][:6]:
            k = int(round(f))
            window = spectrum[max(k - 3, 0):k + 4]
            local_peak = np.argmax(window) + max(k - 3, 0)
            assert abs(local_peak - f) <= 1.0


class TestCorpus:
    def test_generate_is_byte_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_corpus(SMALL_TARGET, a)
        generate_corpus(SMALL_TARGET, b)
        files = sorted(p.relative_to(a) for p in a.rglob("*.wav"))
        assert len(files) == 24
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()
        assert (a / "labels.json").read_bytes() == (b / "labels.json").read_bytes()

    def test_counts_match_spec(self, tmp_path):
        out = tmp_path / "c"
        summary = generate_corpus(SMALL_SOURCE, out)
        assert summary["files"] == SMALL_SOURCE.num_categories * 6
        wavs = list(out.rglob("*.wav"))
        assert len(wavs) == summary["files"]

    def test_wav_roundtrip_within_one_lsb(self, tmp_path):
        out = tmp_path / "c"
        generate_corpus(SMALL_TARGET, out)
        clip = synthesize_target_clip(SMALL_TARGET, 0, 0)
        decoded = read_wav(out / "ship0" / "clip0000.wav")
        assert decoded.sample_rate == 16000
        assert np.max(np.abs(decoded.samples - clip.samples)) <= 1 / 32768


def _mean_logmel(buf):
    # level-normalized spectral shape: clips carry a random overall gain,
    # which a raw mean would track instead of the category cue
    shape = log_mel(buf, MelConfig()).frames.mean(axis=0)
    return shape - shape.mean()


def _centroid_accuracy(train_x, train_y, test_x, test_y, n_cats):
    centroids = np.stack([train_x[train_y == c].mean(axis=0)
                          for c in range(n_cats)])
    pred = np.argmin(
        ((test_x[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1)
    return float(np.mean(pred == test_y))


def _domain_features(spec, clips_per_cat):
    synth = (synthesize_source_clip if spec.domain == "source"
             else synthesize_target_clip)
    x, y = [], []
    for c in range(spec.num_categories):
        for j in range(clips_per_cat):
            x.append(_mean_logmel(synth(spec, c, j)))
            y.append(c)
    return np.stack(x), np.array(y)


class TestSeparability:
    """Nearest-mean classifier on mean log-mel features: the in-domain
    separability oracle, and the near-chance cross-domain gap."""

    @pytest.fixture(scope="class")
    def features(self):
        src = SynthSpec(domain="source", clips_per_category=25, seed=3)
        tgt = SynthSpec(domain="target", clips_per_category=25, seed=3)
        return {name: _domain_features(spec, 25)
                for name, spec in (("source", src), ("target", tgt))}

    @pytest.mark.parametrize("domain", ["source", "target"])
    def test_heldout_separability_beats_chance(self, features, domain):
        x, y = features[domain]
        train = np.ones(len(y), dtype=bool)
        train[np.arange(len(y)) % 5 == 0] = False  # hold out 20%
        acc = _centroid_accuracy(x[train], y[train], x[~train], y[~train], 4)
        assert acc > 1.5 * 0.25

    def test_cross_domain_centroids_near_chance(self, features):
        sx, sy = features["source"]
        tx, ty = features["target"]
        acc = _centroid_accuracy(sx, sy, tx, ty, 4)
        assert acc < 0.45  # the gap the transfer experiment must bridge
