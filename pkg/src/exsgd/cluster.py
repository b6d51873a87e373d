"""
Simulated cluster of K synchronous workers.

Batch index streams are pure functions of (master_seed, worker, step) built on
numpy SeedSequence, so replaying any (config, t) reproduces the same batches
and worker k never touches worker k's neighbours' state.  The gradient
reduction is a plain ascending-worker-order serial mean: floating-point
determinism outranks reduction speed at desk scale, and the result is
independent of how many evaluation threads computed the inputs.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

WITH_REPLACEMENT = "with_replacement"
EPOCH_PERMUTATION = "epoch_permutation"

_BATCH_TAG = 21
_PERM_TAG = 22


@dataclass
class ClusterConfig:
    workers_K: int = 1
    local_batch_B: int = 1
    extrap_batch_b: int = None   # defaults to B
    sampling_mode: str = WITH_REPLACEMENT
    master_seed: int = 0

    def __post_init__(self):
        if self.extrap_batch_b is None:
            self.extrap_batch_b = self.local_batch_B

    def validate(self, obj=None):
        if self.workers_K < 1:
            raise ValueError("workers_K must be >= 1")
        if self.local_batch_B < 1:
            raise ValueError("local_batch_B must be >= 1")
        if not 1 <= self.extrap_batch_b <= self.local_batch_B:
            raise ValueError("extrap_batch_b must satisfy 1 <= b <= B")
        if self.sampling_mode not in (WITH_REPLACEMENT, EPOCH_PERMUTATION):
            raise ValueError(f"unknown sampling_mode {self.sampling_mode!r}")
        if obj is not None and self.local_batch_B > obj.sample_count:
            raise ValueError(
                f"local_batch_B={self.local_batch_B} exceeds sample_count={obj.sample_count}"
            )
        return self


@dataclass
class SampleBatch:
    worker: int
    step: int
    indices: np.ndarray


def _epoch_perm(master_seed, worker, epoch, n):
    rng = np.random.default_rng(
        np.random.SeedSequence((master_seed, _PERM_TAG, worker, epoch)))
    return rng.permutation(n)


def draw_batches(cfg, obj, t):
    """The K batches for step t.  Streams are independent per worker and
    replaying (cfg, t) yields identical indices."""
    if t < 0:
        raise ValueError("step t must be >= 0")
    cfg.validate(obj)
    n, b = obj.sample_count, cfg.local_batch_B
    batches = []
    for k in range(cfg.workers_K):
        if cfg.sampling_mode == WITH_REPLACEMENT:
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg.master_seed, _BATCH_TAG, k, t)))
            idx = rng.integers(0, n, size=b)
        else:
            # Position p of the concatenated per-epoch permutations; batches
            # may straddle an epoch boundary.
            positions = np.arange(t * b, (t + 1) * b)
            idx = np.empty(b, dtype=np.int64)
            for epoch in np.unique(positions // n):
                mask = positions // n == epoch
                idx[mask] = _epoch_perm(cfg.master_seed, k, int(epoch), n)[positions[mask] % n]
        batches.append(SampleBatch(worker=k, step=t, indices=idx.astype(np.int64)))
    return batches


def reduce_mean(vectors):
    """Arithmetic mean accumulated in ascending worker-index order."""
    if len(vectors) == 0:
        raise ValueError("reduce_mean of empty input")
    dim = vectors[0].shape
    acc = vectors[0].copy()
    for vec in vectors[1:]:
        if vec.shape != dim:
            raise ValueError("reduce_mean dimension mismatch")
        acc += vec
    return acc / len(vectors)


def map_workers(fn, items, threads=1):
    """Evaluate fn over items, optionally on a thread pool, preserving order.

    Per-worker evaluations are independent, so the results (and anything
    reduced from them) do not depend on the thread count.
    """
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
