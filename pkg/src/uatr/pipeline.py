"""Shared plumbing between training and evaluation: feature extraction
over manifest records, with optional disk cache and thread parallelism."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .dsp import FeatureCache, FeatureSequence, MelConfig, featurize
from .ingest import ClipLoader, ClipRecord


def batched_indices(lengths: np.ndarray, order: np.ndarray,
                    batch_size: int) -> list[np.ndarray]:
    """Contiguous batches of equal-length sequences, preserving the given
    order within each length group."""
    stable = order[np.argsort(lengths[order], kind="stable")]
    batches = []
    start = 0
    while start < len(stable):
        length = lengths[stable[start]]
        end = start
        while end < len(stable) and lengths[stable[end]] == length:
            end += 1
        for lo in range(start, end, batch_size):
            batches.append(stable[lo:min(lo + batch_size, end)])
        start = end
    return batches


def parallel_map(fn, items, threads: int = 1) -> list:
    """Map preserving input order; threads=1 is plain serial execution."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def clip_features(records: list[ClipRecord], loader: ClipLoader,
                  config: MelConfig, cache: FeatureCache | None = None,
                  threads: int = 1) -> list[FeatureSequence]:
    """Features for each record, in record order.

    Cache hits skip decoding entirely.  Decoding shares the loader's one-file
    buffer, so records should arrive grouped by source file (manifest order);
    the parallel path only parallelizes the per-clip feature computation.
    """
    if cache is not None:
        feats: list[FeatureSequence | None] = [
            cache.load(r.source_file_id, r.clip_index) for r in records]
    else:
        feats = [None] * len(records)

    missing = [i for i, f in enumerate(feats) if f is None]
    clips = [loader.load(records[i]) for i in missing]  # serial: shared cache
    computed = parallel_map(lambda buf: featurize(buf, config), clips, threads)
    for i, feat in zip(missing, computed):
        feats[i] = feat
        if cache is not None:
            r = records[i]
            cache.store(r.source_file_id, r.clip_index, feat)
    return feats  # type: ignore[return-value]
