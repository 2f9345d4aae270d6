"""Cross-entropy training: AdamW with decoupled weight decay, warmup
learning-rate schedule, and full-fine-tune / head-only / from-scratch modes.

Weight decay touches weight matrices only; biases and layer-norm parameters
are exempt.  Training is deterministic for a fixed (data, config, seed)
triple: shuffling, dropout masks, and head re-initialization all derive from
the config seed, and gradient reduction order is fixed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint
from .dsp import FeatureCache, MelConfig
from .errors import ConfigError, NonFiniteGradientError
from .ingest import ClipLoader, DatasetManifest
from .kernels import adamw_update
from .nn import (
    EncoderConfig,
    GradStore,
    ParamStore,
    batch_backward,
    batch_forward,
    init_params,
)
from .pipeline import batched_indices, clip_features

TRAIN_MODES = ("full_finetune", "head_only", "from_scratch")
HEAD_TENSORS = ("head.weight", "head.bias")
OPTSTATE_MAGIC = b"UATROPT1"


@dataclass
class TrainConfig:
    batch_size: int = 10
    base_lr: float = 1e-3
    warmup_steps: int = 500
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    grad_clip_norm: float | None = 5.0
    seed: int = 0
    mode: str = "from_scratch"
    init_checkpoint: str | None = None
    early_stop_patience: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.mode in ("full_finetune", "head_only") and not self.init_checkpoint:
            raise ConfigError(f"mode {self.mode!r} requires init_checkpoint")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)


# Named profiles: the two dataset-scale settings plus the small-CPU default.
TRAIN_PROFILES: dict[str, dict] = {
    "deepship": {"batch_size": 60, "base_lr": 2e-4},
    "shipsear": {"batch_size": 10, "base_lr": 4e-5},
    "desk": {"batch_size": 10, "base_lr": 1e-3, "warmup_steps": 100,
             "epochs": 30},
}


def train_profile(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PROFILES:
        raise ConfigError(f"unknown train profile {name!r}")
    return TrainConfig(**{**TRAIN_PROFILES[name], **overrides})


@dataclass
class OptimizerState:
    m: ParamStore
    v: ParamStore
    t: int = 0


def init_optimizer_state(params: ParamStore) -> OptimizerState:
    zeros = {n: np.zeros_like(t) for n, t in params.tensors.items()}
    return OptimizerState(
        m=ParamStore(zeros),
        v=ParamStore({n: z.copy() for n, z in zeros.items()}),
    )


def save_optimizer_state(state: OptimizerState, path: str | Path) -> None:
    index = []
    chunks = []
    offset = 0
    for kind, store in (("m", state.m), ("v", state.v)):
        for name, arr in store.tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            index.append({"name": f"{kind}.{name}", "shape": list(arr.shape),
                          "offset": offset})
            chunks.append(data)
            offset += len(data)
    header = json.dumps({"t": state.t, "tensors": index,
                         "payload_bytes": offset}, sort_keys=True).encode()
    Path(path).write_bytes(
        OPTSTATE_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks))


def load_optimizer_state(path: str | Path) -> OptimizerState:
    raw = Path(path).read_bytes()
    if raw[:8] != OPTSTATE_MAGIC:
        raise ConfigError(f"{path}: not an optimizer-state file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    payload = raw[12 + hlen:]
    stores: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}
    for entry in header["tensors"]:
        kind, name = entry["name"].split(".", 1)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=entry["offset"])
        stores[kind][name] = arr.reshape(shape).copy()
    return OptimizerState(ParamStore(stores["m"]), ParamStore(stores["v"]),
                          t=header["t"])


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """-ln(p[label]), clamped at 1e-12 so the loss stays finite."""
    probs = np.asarray(probs)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} categories")
    return float(-np.log(max(float(probs[label]), 1e-12)))


def warmup_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then inverse-square-root decay."""
    if step < 1:
        raise ConfigError(f"schedule step must be >= 1, got {step}")
    return base_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


def _check_finite(grads: GradStore) -> None:
    for name, g in grads.tensors.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)


def global_grad_norm(grads: GradStore, names=None) -> float:
    total = 0.0
    for name in (names if names is not None else grads.names()):
        g = grads[name].astype(np.float64, copy=False)
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def adamw_step(params: ParamStore, grads: GradStore, state: OptimizerState,
               lr: float, config: TrainConfig, trainable=None):
    """One AdamW update in place; returns the mutated (params, state).

    ``trainable`` restricts the update (and decay) to a subset of tensor
    names; unlisted tensors keep their exact bytes.
    """
    params.check_congruent(grads)
    _check_finite(grads)
    state.t += 1
    names = params.names() if trainable is None else [
        n for n in params.names() if n in trainable]
    for name in names:
        wd = config.weight_decay if name.endswith(".weight") else 0.0
        adamw_update(params[name], grads[name], state.m[name], state.v[name],
                     lr, config.beta1, config.beta2, config.eps, wd, state.t)
    return params, state


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_accuracy: float = -1.0

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps({"kind": "step", **rec}, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **rec}, sort_keys=True) + "\n")
            fh.write(json.dumps({
                "kind": "best", "epoch": self.best_epoch,
                "val_accuracy": self.best_val_accuracy}, sort_keys=True) + "\n")


def _resolve_init(encoder_config: EncoderConfig, train_config: TrainConfig,
                  manifest: DatasetManifest, mel_config: MelConfig):
    """Initial parameters per training mode, plus the trainable-name set."""
    if train_config.mode == "from_scratch":
        return init_params(encoder_config, train_config.seed), None

    ckpt = load_checkpoint(train_config.init_checkpoint)
    structural = ("input_dim", "model_dim", "layers", "heads", "ffn_dim")
    for attr in structural:
        if getattr(ckpt.config, attr) != getattr(encoder_config, attr):
            raise ConfigError(
                f"init checkpoint {attr}={getattr(ckpt.config, attr)} does not "
                f"match encoder config {attr}={getattr(encoder_config, attr)}")
    if ckpt.mel_config.hash() != mel_config.hash():
        raise ConfigError("init checkpoint was trained with a different feature config")

    params = init_params(encoder_config, train_config.seed)
    same_head = (ckpt.config.num_categories == encoder_config.num_categories
                 and ckpt.categories == manifest.categories)
    for name, tensor in ckpt.params.tensors.items():
        if name in HEAD_TENSORS and not same_head:
            continue  # category set changed: keep the fresh head
        params[name] = tensor.copy()

    trainable = set(HEAD_TENSORS) if train_config.mode == "head_only" else None
    return params, trainable


def _accuracy(feats, labels, params, config, batch_size=32) -> float:
    lengths = np.array([len(f) for f in feats])
    order = np.arange(len(feats))
    correct = 0
    for batch in batched_indices(lengths, order, batch_size):
        x = np.stack([feats[i].frames for i in batch])
        probs, _ = batch_forward(x, params, config, mode="eval")
        correct += int((probs.argmax(axis=1) == labels[batch]).sum())
    return 100.0 * correct / len(feats)


def train(manifest: DatasetManifest, mel_config: MelConfig,
          encoder_config: EncoderConfig, train_config: TrainConfig,
          cache: FeatureCache | None = None, threads: int = 1,
          root=None, return_state: bool = False):
    """Fit on the manifest's train split, select by validation accuracy.

    Returns (best checkpoint, TrainLog), plus the final OptimizerState when
    ``return_state`` is set (for serialization alongside the checkpoint).
    """
    train_records = manifest.split_records("train")
    val_records = manifest.split_records("validation")
    if not train_records or not val_records:
        raise ConfigError("manifest needs nonempty train and validation splits")
    if encoder_config.num_categories != len(manifest.categories):
        raise ConfigError(
            f"encoder num_categories={encoder_config.num_categories} but "
            f"manifest has {len(manifest.categories)} categories")
    if encoder_config.input_dim != mel_config.stacked_dim:
        raise ConfigError(
            f"encoder input_dim={encoder_config.input_dim} but features "
            f"produce {mel_config.stacked_dim} dims")

    loader = ClipLoader(manifest, root)
    train_feats = clip_features(train_records, loader, mel_config, cache, threads)
    val_feats = clip_features(val_records, loader, mel_config, cache, threads)
    train_labels = np.array([r.category for r in train_records])
    val_labels = np.array([r.category for r in val_records])
    lengths = np.array([len(f) for f in train_feats])

    params, trainable = _resolve_init(encoder_config, train_config, manifest,
                                      mel_config)
    state = init_optimizer_state(params)
    log = TrainLog()
    best_params = params.copy()
    best_acc = -1.0
    best_epoch = -1
    global_step = 0
    stale_epochs = 0

    for epoch in range(train_config.epochs):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([train_config.seed, 1, epoch])))
        order = rng.permutation(len(train_feats))
        epoch_losses = []
        for batch in batched_indices(lengths, order, train_config.batch_size):
            global_step += 1
            x = np.stack([train_feats[i].frames for i in batch])
            labels = train_labels[batch]
            drop_seed = int(np.random.SeedSequence(
                [train_config.seed, 2, global_step]).generate_state(1)[0])
            probs, tape = batch_forward(x, params, encoder_config,
                                        mode="train", seed=drop_seed)
            loss = float(np.mean(-np.log(np.maximum(
                probs[np.arange(len(batch)), labels], 1e-12))))
            grads = batch_backward(tape, labels)
            _check_finite(grads)

            names = params.names() if trainable is None else list(trainable)
            norm = global_grad_norm(grads, names)
            clip = train_config.grad_clip_norm
            if clip is not None and norm > clip:
                scale = np.asarray(clip / norm, dtype=params.dtype)
                for name in names:
                    grads[name] *= scale

            lr = warmup_lr(global_step, train_config.base_lr,
                           train_config.warmup_steps)
            adamw_step(params, grads, state, lr, train_config, trainable)
            epoch_losses.append(loss)
            log.steps.append({"step": global_step, "lr": lr, "loss": loss,
                              "grad_norm": norm})

        val_acc = _accuracy(val_feats, val_labels, params, encoder_config)
        log.epochs.append({
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_accuracy": val_acc,
        })
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_params = params.copy()
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= train_config.early_stop_patience:
                break

    log.best_epoch = best_epoch
    log.best_val_accuracy = best_acc
    ckpt = Checkpoint(
        params=best_params,
        config=encoder_config,
        category_map=manifest.category_map,
        mel_config=mel_config,
        sample_rate=manifest.sample_rate,
        metadata={
            "mode": train_config.mode,
            "seed": train_config.seed,
            "best_epoch": best_epoch,
            "best_val_accuracy": best_acc,
            "epochs_run": len(log.epochs),
        },
    )
    if return_state:
        return ckpt, log, state
    return ckpt, log
