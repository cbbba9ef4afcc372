"""Training throughput benchmark: keyed retrieval vs sequential reads.

Measures the full training loop (data loading plus a model update per
batch), timed from the first batch request to the last update, divided by
the sample count. The keyed path streams the dataset through the
trigger-training-set machinery (partition shares, key-based storage
retrieval, prefetching); the sequential baseline iterates the underlying
files in order with no index lookups, which is the optimum a
selection-capable loader is compared against. Every configuration is
repeated and the mean samples/second reported.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .loader import Batch, LoaderConfig, get_parser, loader_stream
from .selector import TriggerTrainingSet
from .storage import MDSF_HEADER, SampleStore
from .trainer import ReferenceLearner


@dataclass
class BenchResult:
    mode: str  # keyed | sequential_baseline
    workers: int
    prefetch_partitions: int
    parallel_requests: int
    storage_threads: int
    partition_size: int
    batch_size: int
    reps: int
    samples_per_second: float


def sequential_baseline_stream(store: SampleStore, batch_size: int, dtype=np.float32):
    """Batches straight off the registered files, in file order."""
    leftovers: list[tuple[np.ndarray, np.ndarray]] = []
    pending = 0
    for file_id, entry in enumerate(store.files):
        if entry["wrapper_kind"] != "binary_fixed_record":
            raise ValueError("sequential baseline requires binary_fixed_record files")
        record_bytes = entry["record_bytes"]
        with open(entry["path"], "rb") as f:
            f.seek(MDSF_HEADER.size)
            body = f.read()
        rows = np.frombuffer(body, dtype=np.uint8).reshape(entry["record_count"], record_bytes)
        labels = rows[:, :8].copy().view("<i8").ravel()
        width = (record_bytes - 8) // 4
        features = np.ndarray(
            (entry["record_count"], width), dtype="<f4", buffer=body,
            offset=8, strides=(record_bytes, 4),
        ).astype(dtype)
        leftovers.append((labels, features))
        pending += len(labels)
        while pending >= batch_size:
            yield _take_batch(leftovers, batch_size)
            pending -= batch_size
    if pending:
        yield _take_batch(leftovers, pending)


def _take_batch(parts: list, size: int) -> Batch:
    labels, features = parts[0]
    if len(labels) >= size:  # common case: one contiguous slice
        batch = Batch(features[:size], labels[:size],
                      np.ones(size), np.zeros(size, dtype=np.uint64))
        if len(labels) == size:
            parts.pop(0)
        else:
            parts[0] = (labels[size:], features[size:])
        return batch
    labels_out, feature_out = [], []
    need = size
    while need:
        labels, features = parts[0]
        take = min(need, len(labels))
        labels_out.append(labels[:take])
        feature_out.append(features[:take])
        if take == len(labels):
            parts.pop(0)
        else:
            parts[0] = (labels[take:], features[take:])
        need -= take
    labels = np.concatenate(labels_out)
    features = np.concatenate(feature_out)
    n = len(labels)
    return Batch(features, labels, np.ones(n), np.zeros(n, dtype=np.uint64))


def _train_pass(batches, feature_dim: int, num_classes: int, learning_rate: float,
                dtype=np.float32) -> int:
    """One epoch of model updates over a batch stream; returns sample count."""
    learner = ReferenceLearner(
        np.zeros((num_classes, feature_dim), dtype), np.zeros(num_classes, dtype)
    )
    total = 0
    for batch in batches:
        learner.weighted_update(batch.features, batch.labels, batch.weights, learning_rate)
        total += len(batch)
    return total


def _dataset_dims(store: SampleStore) -> tuple[int, int]:
    entry = store.files[0]
    feature_dim = (entry["record_bytes"] - 8) // 4
    num_classes = int(store._labels.max()) + 1 if len(store) else 2
    return feature_dim, num_classes


def _limit_blas():
    """One BLAS thread during measurement; prefetch threads own the overlap."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(1)
    except ImportError:
        import contextlib

        return contextlib.nullcontext()


def measure_keyed(store, tts, cfg: LoaderConfig, parser, batch_size: int, reps: int,
                  learning_rate: float = 1e-4) -> float:
    feature_dim, num_classes = _dataset_dims(store)
    rates = []
    with _limit_blas():
        for _ in range(reps):
            start = time.perf_counter()
            total = _train_pass(
                loader_stream(tts, cfg, store, parser, batch_size),
                feature_dim, num_classes, learning_rate, dtype=parser.output_dtype,
            )
            rates.append(total / (time.perf_counter() - start))
    return float(np.mean(rates))


def measure_sequential(store, batch_size: int, reps: int,
                       learning_rate: float = 1e-4, dtype=np.float32) -> float:
    feature_dim, num_classes = _dataset_dims(store)
    rates = []
    with _limit_blas():
        for _ in range(reps):
            start = time.perf_counter()
            total = _train_pass(
                sequential_baseline_stream(store, batch_size, dtype),
                feature_dim, num_classes, learning_rate, dtype=dtype,
            )
            rates.append(total / (time.perf_counter() - start))
    return float(np.mean(rates))


def build_full_tts(store: SampleStore, out_dir, partition_size: int) -> TriggerTrainingSet:
    """Trigger training set covering every key, in key order."""
    keys = np.arange(len(store), dtype=np.uint64)
    return TriggerTrainingSet.write(
        Path(out_dir), 0, keys, np.ones(len(keys)), partition_size, writer_threads=4
    )


def run_bench(
    store: SampleStore,
    work_dir,
    workers: list[int],
    prefetch_partitions: list[int],
    parallel_requests: list[int],
    storage_threads: list[int],
    partition_size: int = 100_000,
    batch_size: int = 8192,
    reps: int = 3,
    include_baseline: bool = True,
    parser_name: str = "float32_vector_raw",
) -> list[BenchResult]:
    parser = get_parser(parser_name)
    tts = build_full_tts(store, Path(work_dir) / "tts", partition_size)
    results = []
    for w in workers:
        for pf in prefetch_partitions:
            for pr in parallel_requests:
                for st in storage_threads:
                    cfg = LoaderConfig(
                        num_workers=w,
                        prefetch_buffer_partitions=pf,
                        parallel_prefetch_requests=pr,
                        storage_threads=st,
                    )
                    rate = measure_keyed(store, tts, cfg, parser, batch_size, reps)
                    results.append(
                        BenchResult("keyed", w, pf, pr, st, partition_size, batch_size,
                                    reps, rate)
                    )
    if include_baseline:
        rate = measure_sequential(store, batch_size, reps)
        results.append(
            BenchResult("sequential_baseline", 1, 0, 0, 0, partition_size, batch_size,
                        reps, rate)
        )
    return results


def write_bench_csv(path, results: list[BenchResult]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "mode", "workers", "prefetch_partitions", "parallel_requests",
            "storage_threads", "partition_size", "batch_size", "reps",
            "samples_per_second",
        ])
        for r in results:
            writer.writerow([
                r.mode, r.workers, r.prefetch_partitions, r.parallel_requests,
                r.storage_threads, r.partition_size, r.batch_size, r.reps,
                f"{r.samples_per_second:.1f}",
            ])
    return path
