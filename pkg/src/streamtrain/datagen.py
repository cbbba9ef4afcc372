"""Synthetic timestamped dataset generators for experiments and benchmarks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .storage import FileRecordSpec, SampleStore, write_mdsf


def gaussian_drift_stream(
    n_samples: int,
    feature_dim: int = 8,
    shift_points: tuple[int, ...] = (),
    separation: float = 4.0,
    shift_magnitude: float = 8.0,
    boundary_drift: float = 1.0,
    seed: int = 0,
):
    """Two unit-variance Gaussian classes whose means jump at the shift points.

    The class-separation direction is fixed for the whole stream. At every
    shift the segment center jumps by ``shift_magnitude`` orthogonally to the
    separation direction (a large covariate shift, easy to pick up in input
    space) plus ``boundary_drift`` along it (a modest decision-boundary
    displacement, so stale models degrade but remain usable). Timestamps are
    one second apart. Returns (features, labels, timestamps).
    """
    rng = np.random.default_rng(seed)
    bounds = [0, *sorted(shift_points), n_samples]
    X = np.empty((n_samples, feature_dim))
    y = rng.integers(0, 2, size=n_samples)
    direction = rng.normal(size=feature_dim)
    direction /= np.linalg.norm(direction)
    center = np.zeros(feature_dim)
    for i, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
        if i > 0:
            ortho = rng.normal(size=feature_dim)
            ortho -= (ortho @ direction) * direction
            ortho /= np.linalg.norm(ortho)
            center = center + shift_magnitude * ortho + boundary_drift * direction
        if lo >= hi:
            continue
        seg_labels = y[lo:hi]
        means = center + np.where(seg_labels[:, None] == 1, 0.5, -0.5) * separation * direction
        X[lo:hi] = means + rng.normal(size=(hi - lo, feature_dim))
    return X, y, np.arange(n_samples, dtype=np.int64)


def write_feature_dataset(
    directory,
    features: np.ndarray,
    labels: np.ndarray,
    timestamps: np.ndarray,
    dataset_id: str = "synthetic",
    records_per_file: int = 100_000,
) -> SampleStore:
    """Persist float32 feature rows as MDSF files and register them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    features32 = np.ascontiguousarray(features, dtype="<f4")
    payloads = features32.view(np.uint8).reshape(len(features32), -1)
    record_bytes = 8 + payloads.shape[1]
    store = SampleStore.create(directory / "store", dataset_id=dataset_id)
    spec = FileRecordSpec("binary_fixed_record", record_bytes=record_bytes)
    for i, start in enumerate(range(0, len(labels), records_per_file)):
        stop = min(start + records_per_file, len(labels))
        path = directory / f"part_{i:04d}.bin"
        write_mdsf(path, labels[start:stop], payloads[start:stop])
        store.register_file(
            path, spec, base_timestamp=0,
            per_sample_timestamps=np.asarray(timestamps[start:stop], dtype=np.int64),
        )
    return store


def random_record_dataset(
    directory,
    n_records: int,
    record_bytes: int = 160,
    records_per_file: int = 180_000,
    num_classes: int = 16,
    dataset_id: str = "bench",
    seed: int = 0,
) -> SampleStore:
    """Fixed-row binary dataset with random payload bytes (benchmark food)."""
    if (record_bytes - 8) % 4:
        raise ValueError("payload must hold whole float32 values")
    rng = np.random.default_rng(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    store = SampleStore.create(directory / "store", dataset_id=dataset_id)
    spec = FileRecordSpec("binary_fixed_record", record_bytes=record_bytes)
    written = 0
    file_index = 0
    while written < n_records:
        count = min(records_per_file, n_records - written)
        labels = rng.integers(0, num_classes, size=count, dtype=np.int64)
        values = rng.random(size=(count, (record_bytes - 8) // 4), dtype=np.float32)
        payloads = values.view(np.uint8).reshape(count, record_bytes - 8)
        path = directory / f"part_{file_index:04d}.bin"
        write_mdsf(path, labels, payloads)
        store.register_file(
            path, spec, base_timestamp=0,
            per_sample_timestamps=np.arange(written, written + count, dtype=np.int64),
        )
        written += count
        file_index += 1
    return store
