"""Dataset ingestion: scan audio roots, segment, build split manifests.

A dataset root either carries one subdirectory per raw label, or a
``labels.json`` index mapping relative wav paths to raw labels.  Clips are
counted from WAV headers (no decoding) using the exact resampled-length
formula, so manifest building stays cheap even for large corpora.

Splits are assigned per clip, stratified per category: each category's clips
are shuffled with a seeded generator and partitioned by the ratios with
largest-remainder rounding.  Identical (root, config, seed) inputs reproduce
byte-identical manifest files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .audio import (
    AudioBuffer,
    clip_sample_count,
    read_wav,
    resample,
    resampled_length,
    wav_frame_count,
)
from .errors import ConfigError, LabelMappingError

MANIFEST_SCHEMA_VERSION = 1
SPLITS = ("train", "validation", "test")


class CategoryMap:
    """Ordered category names plus the raw-label consolidation."""

    def __init__(self, categories: list[str], raw_to_category: dict[str, int]):
        if len(set(categories)) != len(categories):
            raise ConfigError("duplicate category names")
        for raw, idx in raw_to_category.items():
            if not 0 <= idx < len(categories):
                raise ConfigError(f"raw label {raw!r} maps to invalid index {idx}")
        self.categories = list(categories)
        self.raw_to_category = dict(raw_to_category)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def map_raw(self, raw_label: str) -> int:
        try:
            return self.raw_to_category[raw_label]
        except KeyError:
            raise LabelMappingError(
                f"no category mapping for raw label {raw_label!r}"
            ) from None

    def index_of(self, name: str) -> int:
        try:
            return self.categories.index(name)
        except ValueError:
            raise LabelMappingError(f"unknown category {name!r}") from None

    @classmethod
    def identity(cls, labels: list[str]) -> "CategoryMap":
        return cls(list(labels), {name: i for i, name in enumerate(labels)})

    @classmethod
    def from_name_mapping(cls, categories: list[str],
                          raw_to_name: dict[str, str]) -> "CategoryMap":
        index = {name: i for i, name in enumerate(categories)}
        return cls(categories, {raw: index[name] for raw, name in raw_to_name.items()})

    @classmethod
    def from_json(cls, payload: dict) -> "CategoryMap":
        return cls.from_name_mapping(payload["categories"], payload["raw_to_category"])

    @classmethod
    def from_file(cls, path: str | Path) -> "CategoryMap":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def builtin(cls, dataset: str) -> "CategoryMap":
        """Shipped mapping for 'deepship' or 'shipsear'."""
        ref = resources.files("uatr.data") / f"{dataset}_categories.json"
        try:
            return cls.from_json(json.loads(ref.read_text()))
        except FileNotFoundError:
            raise ConfigError(f"no built-in category map for dataset {dataset!r}") from None


@dataclass
class ClipRecord:
    source_file_id: str
    clip_index: int
    sample_offset: int
    clip_samples: int
    category: int
    split: str


@dataclass
class FileEntry:
    raw_label: str
    src_rate: int
    src_frames: int
    samples: int  # length after resampling to the manifest rate


@dataclass
class DatasetManifest:
    records: list[ClipRecord]
    category_map: CategoryMap
    sample_rate: int
    clip_seconds: float
    seed: int
    root: str
    files: dict[str, FileEntry]
    dataset: str = "custom"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    metadata: dict = field(default_factory=dict)

    @property
    def categories(self) -> list[str]:
        return self.category_map.categories

    def split_records(self, split: str) -> list[ClipRecord]:
        if split == "all":
            return list(self.records)
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def counts(self) -> dict[str, dict[str, int]]:
        """Per-category clip counts by split plus totals."""
        out = {
            name: {s: 0 for s in SPLITS} | {"total": 0}
            for name in self.categories
        }
        for r in self.records:
            name = self.categories[r.category]
            out[name][r.split] += 1
            out[name]["total"] += 1
        return out


def largest_remainder_counts(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Partition n by ratios; leftovers go to the largest remainders,
    ties broken by position."""
    floors = [int(np.floor(r * n)) for r in ratios]
    remainders = [r * n - f for r, f in zip(ratios, floors)]
    leftover = n - sum(floors)
    order = sorted(range(len(ratios)), key=lambda i: (-remainders[i], i))
    for i in order[:leftover]:
        floors[i] += 1
    return floors


def _discover_files(root: Path) -> list[tuple[str, str]]:
    """[(relative posix path, raw label)] sorted by path."""
    index = root / "labels.json"
    if index.is_file():
        mapping = json.loads(index.read_text())
        return sorted((rel, str(raw)) for rel, raw in mapping.items())
    pairs = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        for wav in sorted(sub.rglob("*.wav")):
            pairs.append((wav.relative_to(root).as_posix(), sub.name))
    if not pairs:
        raise ConfigError(
            f"{root}: no labels.json and no per-label subdirectories with wav files"
        )
    return pairs


def build_manifest(root: str | Path, category_map: CategoryMap,
                   clip_seconds: float = 5.0,
                   ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                   seed: int = 0, sample_rate: int = 16000,
                   dataset: str = "custom") -> DatasetManifest:
    """Enumerate clips and assign stratified train/validation/test splits."""
    root = Path(root)
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three nonnegatives summing to 1, got {ratios}")
    clip_samples = clip_sample_count(sample_rate, clip_seconds)

    files: dict[str, FileEntry] = {}
    records: list[ClipRecord] = []
    for file_id, raw_label in _discover_files(root):
        category = category_map.map_raw(raw_label)
        frames, src_rate = wav_frame_count(root / file_id)
        samples = resampled_length(frames, src_rate, sample_rate)
        files[file_id] = FileEntry(raw_label, src_rate, frames, samples)
        for k in range(samples // clip_samples):
            records.append(ClipRecord(
                source_file_id=file_id,
                clip_index=k,
                sample_offset=k * clip_samples,
                clip_samples=clip_samples,
                category=category,
                split="train",  # reassigned below
            ))

    warnings = []
    for cat_idx, name in enumerate(category_map.categories):
        members = [i for i, r in enumerate(records) if r.category == cat_idx]
        if not members:
            warnings.append(f"category {name!r} has no clips")
            continue
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, cat_idx])))
        order = rng.permutation(len(members))
        counts = largest_remainder_counts(len(members), ratios)
        cursor = 0
        for split, count in zip(SPLITS, counts):
            for j in order[cursor:cursor + count]:
                records[members[j]].split = split
            cursor += count

    return DatasetManifest(
        records=records,
        category_map=category_map,
        sample_rate=sample_rate,
        clip_seconds=clip_seconds,
        seed=seed,
        root=str(root),
        files=files,
        dataset=dataset,
        ratios=tuple(ratios),
        metadata={"warnings": warnings},
    )


def manifest_to_json(manifest: DatasetManifest) -> dict:
    return {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "dataset": manifest.dataset,
        "root": manifest.root,
        "sample_rate": manifest.sample_rate,
        "clip_seconds": manifest.clip_seconds,
        "seed": manifest.seed,
        "ratios": list(manifest.ratios),
        "categories": manifest.categories,
        "raw_to_category": manifest.category_map.raw_to_category,
        "files": {
            fid: {
                "raw_label": e.raw_label,
                "src_rate": e.src_rate,
                "src_frames": e.src_frames,
                "samples": e.samples,
            }
            for fid, e in manifest.files.items()
        },
        "records": [
            [r.source_file_id, r.clip_index, r.sample_offset,
             r.clip_samples, r.category, r.split]
            for r in manifest.records
        ],
        "metadata": manifest.metadata,
    }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(manifest_to_json(manifest), indent=2, sort_keys=True) + "\n"
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: manifest schema {doc.get('schema_version')} unsupported"
        )
    cmap = CategoryMap(doc["categories"], doc["raw_to_category"])
    files = {
        fid: FileEntry(e["raw_label"], e["src_rate"], e["src_frames"], e["samples"])
        for fid, e in doc["files"].items()
    }
    records = [ClipRecord(*row) for row in doc["records"]]
    return DatasetManifest(
        records=records,
        category_map=cmap,
        sample_rate=doc["sample_rate"],
        clip_seconds=doc["clip_seconds"],
        seed=doc["seed"],
        root=doc["root"],
        files=files,
        dataset=doc["dataset"],
        ratios=tuple(doc["ratios"]),
        metadata=doc.get("metadata", {}),
    )


def save_manifest_csv(manifest: DatasetManifest, path: str | Path) -> None:
    """One row per clip, mirroring the JSON records."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source_file_id", "clip_index", "sample_offset",
                    "clip_samples", "category", "category_name", "split"])
        for r in manifest.records:
            w.writerow([r.source_file_id, r.clip_index, r.sample_offset,
                        r.clip_samples, r.category,
                        manifest.categories[r.category], r.split])


class ClipLoader:
    """Loads clip audio from manifest records, caching the last decoded file.

    Records of one file are contiguous in manifest order, so a one-file cache
    avoids re-decoding while keeping memory flat.
    """

    def __init__(self, manifest: DatasetManifest, root: str | Path | None = None):
        self.manifest = manifest
        self.root = Path(root) if root is not None else Path(manifest.root)
        self._cached_id: str | None = None
        self._cached: np.ndarray | None = None

    def file_samples(self, file_id: str) -> np.ndarray:
        """Whole file, resampled to the manifest rate."""
        if file_id != self._cached_id:
            buf = read_wav(self.root / file_id)
            if buf.sample_rate != self.manifest.sample_rate:
                buf = resample(buf, self.manifest.sample_rate)
            self._cached_id = file_id
            self._cached = buf.samples
        return self._cached

    def load(self, record: ClipRecord) -> AudioBuffer:
        x = self.file_samples(record.source_file_id)
        lo = record.sample_offset
        hi = lo + record.clip_samples
        return AudioBuffer(x[lo:hi].copy(), self.manifest.sample_rate)
