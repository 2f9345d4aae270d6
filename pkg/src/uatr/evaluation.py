"""Evaluation protocols: in-domain metrics, variable-length zero-shot
robustness, cross-domain zero-shot with per-file aggregation, and pooled
embedding export.

Accuracy, precision, recall, and F1 are reported in percent.  Macro scores
are unweighted means over categories; a category with no true examples is
excluded from the macro means, and an empty predicted column yields zero
precision.  Argmax ties break to the lowest index everywhere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, clip_sample_count, resample
from .checkpoint import Checkpoint
from .dsp import featurize
from .errors import ConfigError, EmptyEvaluationError, LabelMappingError
from .ingest import ClipLoader, ClipRecord, DatasetManifest
from .nn import batch_forward
from .pipeline import batched_indices, clip_features


@dataclass
class EvalReport:
    confusion: np.ndarray  # (C, C) int64; rows true, columns predicted
    categories: list[str]
    accuracy: float
    per_category: dict[str, dict[str, float]]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_category": self.per_category,
            "categories": self.categories,
            "confusion": self.confusion.tolist(),
            "metadata": self.metadata,
        }

    def to_text(self) -> str:
        width = max([len(c) for c in self.categories] + [8])
        lines = [
            f"accuracy {self.accuracy:.2f}  macro precision {self.macro_precision:.2f}"
            f"  recall {self.macro_recall:.2f}  F1 {self.macro_f1:.2f}",
            f"{'category':<{width}}  {'prec':>7}  {'recall':>7}  {'f1':>7}  {'support':>7}",
        ]
        for name in self.categories:
            row = self.per_category[name]
            lines.append(
                f"{name:<{width}}  {row['precision']:7.2f}  {row['recall']:7.2f}"
                f"  {row['f1']:7.2f}  {int(row['support']):7d}")
        return "\n".join(lines) + "\n"


def confusion_from_pairs(true_idx, pred_idx, num_categories: int) -> np.ndarray:
    counts = np.zeros((num_categories, num_categories), dtype=np.int64)
    for t, p in zip(true_idx, pred_idx):
        counts[t, p] += 1
    return counts


def compute_metrics(confusion: np.ndarray, categories: list[str],
                    metadata: dict | None = None) -> EvalReport:
    """Accuracy plus per-category and macro precision/recall/F1, in percent."""
    counts = np.asarray(confusion, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise EmptyEvaluationError("confusion matrix holds zero clips")
    col_sums = counts.sum(axis=0)
    row_sums = counts.sum(axis=1)
    per_category = {}
    macro_p, macro_r, macro_f = [], [], []
    for c, name in enumerate(categories):
        diag = counts[c, c]
        precision = 100.0 * diag / col_sums[c] if col_sums[c] else 0.0
        recall = 100.0 * diag / row_sums[c] if row_sums[c] else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall > 0 else 0.0)
        per_category[name] = {"precision": precision, "recall": recall,
                              "f1": f1, "support": float(row_sums[c])}
        if row_sums[c]:  # categories absent from the truth are excluded
            macro_p.append(precision)
            macro_r.append(recall)
            macro_f.append(f1)
    return EvalReport(
        confusion=counts,
        categories=list(categories),
        accuracy=100.0 * float(np.trace(counts)) / total,
        per_category=per_category,
        macro_precision=float(np.mean(macro_p)),
        macro_recall=float(np.mean(macro_r)),
        macro_f1=float(np.mean(macro_f)),
        metadata=metadata or {},
    )


def _clip_probs_and_pooled(feats, ckpt: Checkpoint, batch_size: int = 32):
    """(probs, pooled) arrays over a feature list, batching equal lengths."""
    n = len(feats)
    probs = np.zeros((n, ckpt.config.num_categories), dtype=np.float32)
    pooled = np.zeros((n, ckpt.config.model_dim), dtype=np.float32)
    lengths = np.array([len(f) for f in feats])
    for batch in batched_indices(lengths, np.arange(n), batch_size):
        x = np.stack([feats[i].frames for i in batch])
        p, tape = batch_forward(x, ckpt.params, ckpt.config, mode="eval")
        probs[batch] = p
        pooled[batch] = tape.pooled
    return probs, pooled


def predict(ckpt: Checkpoint, clip: AudioBuffer):
    """(category index, probability vector, pooled embedding) for one clip.

    Resamples to the checkpoint's training rate when needed; argmax ties
    break to the lowest index.
    """
    if clip.sample_rate != ckpt.sample_rate:
        clip = resample(clip, ckpt.sample_rate)
    feat = featurize(clip, ckpt.mel_config)
    probs, tape = batch_forward(feat.frames[None], ckpt.params, ckpt.config,
                                mode="eval")
    return int(np.argmax(probs[0])), probs[0], tape.pooled[0]


def eval_split(ckpt: Checkpoint, manifest: DatasetManifest, split: str = "test",
               cache=None, threads: int = 1, root=None) -> EvalReport:
    """Standard in-domain protocol over one manifest split."""
    records = manifest.split_records(split)
    if not records:
        raise EmptyEvaluationError(f"split {split!r} holds no clips")
    loader = ClipLoader(manifest, root)
    feats = clip_features(records, loader, ckpt.mel_config, cache, threads)
    probs, _ = _clip_probs_and_pooled(feats, ckpt)
    pred = probs.argmax(axis=1)
    true = np.array([r.category for r in records])
    confusion = confusion_from_pairs(true, pred, len(manifest.categories))
    return compute_metrics(confusion, manifest.categories, {
        "protocol": "in_domain", "split": split, "clips": len(records)})


def split_file_regions(manifest: DatasetManifest, split: str) -> dict[str, list[tuple[int, int]]]:
    """Per file, maximal contiguous sample regions covered by a split's clips."""
    by_file: dict[str, list[ClipRecord]] = {}
    for r in manifest.split_records(split):
        by_file.setdefault(r.source_file_id, []).append(r)
    regions: dict[str, list[tuple[int, int]]] = {}
    for fid, records in by_file.items():
        spans = sorted((r.sample_offset, r.sample_offset + r.clip_samples)
                       for r in records)
        merged = [list(spans[0])]
        for lo, hi in spans[1:]:
            if lo == merged[-1][1]:
                merged[-1][1] = hi
            else:
                merged.append([lo, hi])
        regions[fid] = [(lo, hi) for lo, hi in merged]
    return regions


def eval_varlen(ckpt: Checkpoint, manifest: DatasetManifest,
                lengths: list[float], split: str = "test",
                threads: int = 1, root=None) -> dict:
    """Re-segment the split's source regions at each length and score the
    unchanged checkpoint; no retraining of any kind.

    Regions shorter than a length are skipped and counted.  Lengths with no
    usable audio are reported with accuracy None and a warning.
    """
    regions = split_file_regions(manifest, split)
    if not regions:
        raise EmptyEvaluationError(f"split {split!r} holds no clips")
    file_category = {fid: manifest.category_map.map_raw(manifest.files[fid].raw_label)
                     for fid in regions}
    loader = ClipLoader(manifest, root)
    rows = []
    warnings = []
    for seconds in lengths:
        clip_samples = clip_sample_count(manifest.sample_rate, seconds)
        feats = []
        labels = []
        skipped = 0
        for fid in sorted(regions):
            samples = None
            for lo, hi in regions[fid]:
                n_clips = (hi - lo) // clip_samples
                if n_clips == 0:
                    skipped += 1
                    continue
                if samples is None:
                    samples = loader.file_samples(fid)
                for k in range(n_clips):
                    piece = samples[lo + k * clip_samples: lo + (k + 1) * clip_samples]
                    buf = AudioBuffer(piece.copy(), manifest.sample_rate)
                    feats.append(featurize(buf, ckpt.mel_config))
                    labels.append(file_category[fid])
        if not feats:
            warnings.append(f"no region is at least {seconds} s long")
            rows.append({"length": seconds, "accuracy": None, "clips": 0,
                         "skipped_regions": skipped})
            continue
        probs, _ = _clip_probs_and_pooled(feats, ckpt)
        correct = int((probs.argmax(axis=1) == np.array(labels)).sum())
        rows.append({
            "length": seconds,
            "accuracy": 100.0 * correct / len(feats),
            "clips": len(feats),
            "skipped_regions": skipped,
        })
    return {"protocol": "variable_length", "split": split, "rows": rows,
            "warnings": warnings}


@dataclass
class DomainMapping:
    """Target-dataset category name -> source-model category name."""

    pairs: dict[str, str]

    def resolve(self, target_categories: list[str],
                source_categories: list[str]) -> dict[int, int]:
        out = {}
        for target_name, source_name in self.pairs.items():
            if target_name not in target_categories:
                raise LabelMappingError(
                    f"mapping names unknown target category {target_name!r}")
            if source_name not in source_categories:
                raise LabelMappingError(
                    f"mapping names unknown source category {source_name!r}")
            out[target_categories.index(target_name)] = \
                source_categories.index(source_name)
        return out


def aggregate_crossdomain(entries: list[tuple[str, int, np.ndarray]],
                          num_source_categories: int,
                          aggregation: str = "per_file_mean_prob"):
    """Clip- and file-level confusion from (file id, true source index,
    probability vector) triples.

    File-level decisions average each file's probability vectors
    (``per_file_mean_prob``) or take the majority clip vote
    (``per_file_majority``); ``per_clip`` skips the file level.
    """
    if aggregation not in ("per_clip", "per_file_mean_prob", "per_file_majority"):
        raise ConfigError(f"unknown aggregation {aggregation!r}")
    if not entries:
        raise EmptyEvaluationError("no clips to aggregate")
    c = num_source_categories
    clip_confusion = np.zeros((c, c), dtype=np.int64)
    by_file: dict[str, list[tuple[int, np.ndarray]]] = {}
    for fid, true_idx, probs in entries:
        clip_confusion[true_idx, int(np.argmax(probs))] += 1
        by_file.setdefault(fid, []).append((true_idx, probs))

    if aggregation == "per_clip":
        return clip_confusion, None

    file_confusion = np.zeros((c, c), dtype=np.int64)
    for fid, items in by_file.items():
        true_idx = items[0][0]
        if aggregation == "per_file_mean_prob":
            mean = np.mean([p for _, p in items], axis=0)
            decision = int(np.argmax(mean))
        else:
            votes = np.bincount([int(np.argmax(p)) for _, p in items],
                                minlength=c)
            decision = int(np.argmax(votes))
        file_confusion[true_idx, decision] += 1
    return clip_confusion, file_confusion


def eval_crossdomain(ckpt: Checkpoint, target_manifest: DatasetManifest,
                     mapping: DomainMapping,
                     aggregation: str = "per_file_mean_prob",
                     split: str = "all", cache=None, threads: int = 1,
                     root=None):
    """Zero-shot transfer: score target clips against the mapped source
    category, clip-level and (optionally) per source file.

    Returns (clip_report, file_report); the file report is None under
    ``per_clip`` aggregation.
    """
    records = target_manifest.split_records(split)
    if not records:
        raise EmptyEvaluationError(f"split {split!r} holds no clips")
    index_map = mapping.resolve(target_manifest.categories, ckpt.categories)
    present = {r.category for r in records}
    unmapped = present - set(index_map)
    if unmapped:
        names = sorted(target_manifest.categories[i] for i in unmapped)
        raise LabelMappingError(f"target categories with no mapping: {names}")

    loader = ClipLoader(target_manifest, root)
    feats = clip_features(records, loader, ckpt.mel_config, cache, threads)
    probs, _ = _clip_probs_and_pooled(feats, ckpt)
    entries = [(r.source_file_id, index_map[r.category], probs[i])
               for i, r in enumerate(records)]
    clip_confusion, file_confusion = aggregate_crossdomain(
        entries, ckpt.config.num_categories, aggregation)

    meta = {"protocol": "cross_domain", "split": split,
            "aggregation": aggregation, "mapping": dict(mapping.pairs),
            "clips": len(records), "files": len({r.source_file_id for r in records})}
    clip_report = compute_metrics(clip_confusion, ckpt.categories,
                                  {**meta, "level": "clip"})
    file_report = None
    if file_confusion is not None:
        file_report = compute_metrics(file_confusion, ckpt.categories,
                                      {**meta, "level": "file"})
    return clip_report, file_report


def export_embeddings(ckpt: Checkpoint, manifest: DatasetManifest,
                      split: str, path: str | Path, cache=None,
                      threads: int = 1, root=None) -> int:
    """CSV of pooled embeddings, one row per clip in manifest record order."""
    records = manifest.split_records(split)
    if not records:
        raise EmptyEvaluationError(f"split {split!r} holds no clips")
    loader = ClipLoader(manifest, root)
    feats = clip_features(records, loader, ckpt.mel_config, cache, threads)
    _, pooled = _clip_probs_and_pooled(feats, ckpt)
    dim = pooled.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "source_file_id", "category"]
                        + [f"e{i:03d}" for i in range(dim)])
        for row, r in enumerate(records):
            writer.writerow(
                [f"{r.source_file_id}#{r.clip_index}", r.source_file_id,
                 manifest.categories[r.category]]
                + [f"{v:.9g}" for v in pooled[row]])
    return len(records)
