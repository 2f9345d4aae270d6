"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`.  The transfer experiment
behind criteria 5 and 6 runs once as a session fixture (about ten minutes on
two CPU cores); everything else is fast.  Criterion 9 needs the real datasets
and is skipped unless UATR_DEEPSHIP_ROOT / UATR_SHIPSEAR_ROOT point at them.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from uatr.audio import AudioBuffer
from uatr.checkpoint import load_checkpoint, save_checkpoint
from uatr.dsp import MelConfig, featurize, filter_centers_hz, frame_count, log_mel
from uatr.evaluation import (
    aggregate_crossdomain,
    compute_metrics,
    confusion_from_pairs,
    eval_split,
    eval_varlen,
)
from uatr.ingest import CategoryMap, build_manifest, manifest_to_json
from uatr.nn import EncoderConfig, batch_forward, init_params, model_backward
from uatr.optim import (
    GradStore,
    OptimizerState,
    ParamStore,
    TrainConfig,
    adamw_step,
    init_optimizer_state,
    train,
)
from uatr.synth import SynthSpec, generate_corpus

from conftest import tone


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# --------------------------------------------------------------- criterion 1

def test_criterion_1_gradient_correctness():
    """Every parameter gradient matches central finite differences over
    five seeds on the tiny config, relative error <= 1e-3."""
    config = EncoderConfig(input_dim=12, model_dim=16, layers=2, heads=2,
                           ffn_dim=32, dropout_rate=0.0, num_categories=4)
    t0 = time.time()
    worst = 0.0
    eps = 1e-3
    for seed in range(5):
        rng = np.random.default_rng(1000 + seed)
        x = rng.standard_normal((1, 8, 12))
        label = int(rng.integers(0, 4))
        # float64: at eps=1e-3 the fp32 difference quotient is too noisy for
        # the stated tolerance; the backward code is dtype-generic
        params = init_params(config, seed).astype(np.float64)
        _, tape = batch_forward(x, params, config, mode="train", seed=seed)
        grads = model_backward(tape, label)

        def loss():
            probs, _ = batch_forward(x, params, config, mode="eval")
            return -math.log(max(probs[0, label], 1e-12))

        for name in params.names():
            flat = params[name].reshape(-1)
            gref = grads[name].reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                lp = loss()
                flat[i] = keep - eps
                lm = loss()
                flat[i] = keep
                fd = (lp - lm) / (2 * eps)
                rel = abs(fd - gref[i]) / max(abs(fd), abs(gref[i]), 1e-6)
                worst = max(worst, rel)
    elapsed = time.time() - t0
    report(1, worst <= 1e-3 and elapsed < 120,
           f"max relative error {worst:.2e} over 5 seeds, all parameters, "
           f"{elapsed:.0f}s")


# --------------------------------------------------------------- criterion 2

def test_criterion_2_optimizer_oracle():
    """AdamW trajectory on a scalar quadratic matches an independent scalar
    reference to 1e-10 over 100 steps; zero-gradient decay exact to 1e-12."""
    config = TrainConfig(weight_decay=0.004)
    params = ParamStore({"w.weight": np.array([1.0])})
    state = init_optimizer_state(params)
    theta, m, v = 1.0, 0.0, 0.0
    lr = 0.05
    worst = 0.0
    for t in range(1, 101):
        g = theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9 ** t)
        vhat = v / (1 - 0.999 ** t)
        theta -= lr * (mhat / (math.sqrt(vhat) + 1e-8) + 0.004 * theta)
        grads = GradStore({"w.weight": params["w.weight"].copy()})
        adamw_step(params, grads, state, lr=lr, config=config)
        worst = max(worst, abs(params["w.weight"][0] - theta))

    decay_params = ParamStore({"w.weight": np.array([1.0])})
    adamw_step(decay_params, GradStore({"w.weight": np.zeros(1)}),
               init_optimizer_state(decay_params), lr=0.1,
               config=TrainConfig(weight_decay=0.01))
    decay_err = abs(decay_params["w.weight"][0] - 0.999)
    report(2, worst <= 1e-10 and decay_err <= 1e-12,
           f"trajectory error {worst:.2e}, zero-grad decay error {decay_err:.2e}")


# --------------------------------------------------------------- criterion 3

def test_criterion_3_dsp_oracles():
    """Tone lands in the right mel bin, silence hits the floor, and the
    frame-count / stacking formulas agree with counting loops."""
    cfg = MelConfig()
    checks = []

    buf = tone(1000.0, 1.0, 16000)
    frame = buf.samples[:400] * np.hamming(400)
    from uatr.dsp import mel_filterbank
    oracle_bin = int(np.argmax(
        mel_filterbank(cfg, 16000) @ (np.abs(np.fft.rfft(frame, 512)) ** 2)))
    feat = log_mel(buf, cfg)
    checks.append(("tone argmax", np.all(np.argmax(feat.frames, 1) == oracle_bin)))
    nearest = int(np.argmin(np.abs(filter_centers_hz(cfg) - 1000.0)))
    checks.append(("tone near center", oracle_bin == nearest))

    silence = log_mel(AudioBuffer(np.zeros(16000), 16000), cfg)
    checks.append(("silence floor", np.all(
        silence.frames == np.float32(math.log(1e-10)))))

    five = featurize(AudioBuffer(np.random.default_rng(0).uniform(-0.5, 0.5, 80000),
                                 16000), cfg)
    one = featurize(AudioBuffer(np.random.default_rng(1).uniform(-0.5, 0.5, 16000),
                                16000), cfg)
    checks.append(("5s shape", five.frames.shape == (83, 560)))
    checks.append(("1s shape", one.frames.shape == (17, 560)))
    checks.append(("mel frame counts",
                   frame_count(80000, 400, 160) == 498
                   and frame_count(16000, 400, 160) == 98))

    rng = np.random.default_rng(7)
    formula_ok = True
    for n in rng.integers(400, 200_000, size=50):
        start, frames = 0, 0
        while start + 400 <= n:
            frames += 1
            start += 160
        stacks = 0
        begin = 0
        while begin < frames:  # one stack per n-step of the counting loop
            stacks += 1
            begin += 6
        formula_ok &= frame_count(int(n), 400, 160) == frames
        formula_ok &= -(-frames // 6) == stacks
    checks.append(("50 random lengths", formula_ok))

    failed = [name for name, ok in checks if not ok]
    report(3, not failed, "all oracles hold" if not failed
           else f"failed: {failed}")


# --------------------------------------------------------------- criterion 4

def test_criterion_4_metrics_equivalence():
    """compute_metrics equals the brute-force per-example oracle exactly on
    1,000 random confusion matrices, plus the hand-derived 2x2 case."""
    rng = np.random.default_rng(42)
    for _ in range(1000):
        c = int(rng.integers(2, 7))
        confusion = rng.integers(0, 12, size=(c, c))
        if confusion.sum() == 0:
            confusion[0, 0] = 1
        # expand to per-example pairs and count from scratch
        true, pred = [], []
        for i in range(c):
            for j in range(c):
                true += [i] * int(confusion[i, j])
                pred += [j] * int(confusion[i, j])
        true, pred = np.array(true), np.array(pred)
        rebuilt = confusion_from_pairs(true, pred, c)
        assert np.array_equal(rebuilt, confusion)
        rep = compute_metrics(confusion, [str(i) for i in range(c)])
        acc = 100.0 * np.mean(true == pred)
        assert rep.accuracy == pytest.approx(acc, abs=1e-12)
        ps, rs, fs = [], [], []
        for cat in range(c):
            tp = np.sum((true == cat) & (pred == cat))
            fp = np.sum((true != cat) & (pred == cat))
            fn = np.sum((true == cat) & (pred != cat))
            if tp + fn == 0:
                continue
            p = 100.0 * tp / (tp + fp) if tp + fp else 0.0
            r = 100.0 * tp / (tp + fn)
            ps.append(p)
            rs.append(r)
            fs.append(2 * p * r / (p + r) if p + r else 0.0)
        assert rep.macro_precision == pytest.approx(np.mean(ps), abs=1e-9)
        assert rep.macro_recall == pytest.approx(np.mean(rs), abs=1e-9)
        assert rep.macro_f1 == pytest.approx(np.mean(fs), abs=1e-9)

    two = compute_metrics(np.array([[1, 1], [0, 2]]), ["a", "b"])
    exact = (two.accuracy == 75.0
             and round(two.macro_precision, 2) == 83.33
             and two.macro_recall == 75.0
             and round(two.macro_f1, 2) == 73.33)
    report(4, exact, "1,000 random matrices exact; 2x2 case "
                     f"acc {two.accuracy} macroF1 {two.macro_f1:.2f}")


# --------------------------------------------------------------- criterion 7

def test_criterion_7_crossdomain_mechanics():
    """Known per-clip probabilities reproduce clip- and file-level
    accuracies exactly, including the 2-1 split vote."""
    probs = [np.array([0.6, 0.4]), np.array([0.4, 0.6]), np.array([0.9, 0.1])]
    entries = [("file", 0, p) for p in probs]
    clip_conf, file_conf = aggregate_crossdomain(entries, 2, "per_file_mean_prob")
    clip_acc = 100.0 * clip_conf[0, 0] / clip_conf.sum()
    file_ok = file_conf[0, 0] == 1 and file_conf.sum() == 1
    split_vote_ok = clip_acc == pytest.approx(100.0 * 2 / 3) and file_ok

    rng = np.random.default_rng(3)
    singles = [(f"f{i}", int(rng.integers(0, 3)), rng.dirichlet(np.ones(3)))
               for i in range(60)]
    c1, c2 = aggregate_crossdomain(singles, 3, "per_file_mean_prob")
    one_clip_ok = np.array_equal(c1, c2)

    report(7, split_vote_ok and one_clip_ok,
           f"split-vote clip acc {clip_acc:.2f}, file decision correct; "
           f"one-clip-per-file levels identical")


# --------------------------------------------------------------- criterion 8

def test_criterion_8_determinism_and_persistence(tmp_path):
    """Fixed-seed training twice gives bit-identical checkpoints;
    save/load/save is byte-identical; manifest building is deterministic."""
    corpus = tmp_path / "corpus"
    spec = SynthSpec(domain="target", clips_per_category=6, seed=5)
    generate_corpus(spec, corpus)
    cmap = CategoryMap.identity([f"ship{i}" for i in range(4)])
    mel = MelConfig()
    enc = EncoderConfig(input_dim=mel.stacked_dim, model_dim=32, layers=1,
                        heads=2, ffn_dim=64, num_categories=4)
    tcfg = TrainConfig(batch_size=6, base_lr=1e-3, warmup_steps=10, epochs=3,
                       seed=9)

    manifests = [build_manifest(corpus, cmap, 1.0, (0.7, 0.3, 0.0), seed=2)
                 for _ in range(2)]
    manifest_ok = (json.dumps(manifest_to_json(manifests[0]), sort_keys=True)
                   == json.dumps(manifest_to_json(manifests[1]), sort_keys=True))

    paths = []
    for i in range(2):
        ckpt, _ = train(manifests[0], mel, enc, tcfg)
        p = tmp_path / f"run{i}.ckpt"
        save_checkpoint(ckpt, p)
        paths.append(p)
    train_ok = paths[0].read_bytes() == paths[1].read_bytes()

    reload_path = tmp_path / "reload.ckpt"
    save_checkpoint(load_checkpoint(paths[0]), reload_path)
    roundtrip_ok = reload_path.read_bytes() == paths[0].read_bytes()

    report(8, manifest_ok and train_ok and roundtrip_ok,
           f"manifest deterministic: {manifest_ok}, training bit-identical: "
           f"{train_ok}, save/load/save byte-identical: {roundtrip_ok}")


# --------------------------------------------------------------- criterion 9

DEEPSHIP_TOTALS = {"Cargo": 7621, "Passenger": 9211, "Tanker": 8776,
                   "Tug": 8085}
SHIPSEAR_TOTALS = {"Passenger": 843, "OceanLiner_RoRo": 486,
                   "WorkVessels": 369, "SmallCraft": 301, "Background": 224}


@pytest.mark.skipif("UATR_DEEPSHIP_ROOT" not in os.environ,
                    reason="set UATR_DEEPSHIP_ROOT to run the structural check")
def test_criterion_9_deepship_structure():
    manifest = build_manifest(Path(os.environ["UATR_DEEPSHIP_ROOT"]),
                              CategoryMap.builtin("deepship"),
                              clip_seconds=5.0, seed=0)
    counts = manifest.counts()
    totals = {name: row["total"] for name, row in counts.items()}
    ok = totals == DEEPSHIP_TOTALS and sum(totals.values()) == 33_693
    report(9, ok, f"deepship totals {totals}")


@pytest.mark.skipif("UATR_SHIPSEAR_ROOT" not in os.environ,
                    reason="set UATR_SHIPSEAR_ROOT to run the structural check")
def test_criterion_9_shipsear_structure():
    manifest = build_manifest(Path(os.environ["UATR_SHIPSEAR_ROOT"]),
                              CategoryMap.builtin("shipsear"),
                              clip_seconds=5.0, seed=0)
    counts = manifest.counts()
    totals = {name: row["total"] for name, row in counts.items()}
    ok = totals == SHIPSEAR_TOTALS and sum(totals.values()) == 2_223
    report(9, ok, f"shipsear totals {totals}")
