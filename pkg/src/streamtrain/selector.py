"""Trigger training set construction: windows, presampling, partitioning.

The selector tracks every sample informed for a pipeline, grouped into pools
by trigger. On trigger it applies the window policy (how many previous
trigger pools are eligible), optionally presamples, and persists the selected
(key, weight) pairs as fixed-size partitions in the ``MDTS`` binary format so
that training workers can read contiguous shares without loading whole
partitions.

``MDTS`` layout: magic ``MDTS``, version u32 LE, entry_count u32 LE, then
entry_count entries of (key u64 LE, weight f64 LE). One partition may span
several files (one per writer thread), named
``trigger_<r>_partition_<p>_<t>.mdts``.
"""

from __future__ import annotations

import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from .seeding import rng_for

MDTS_MAGIC = b"MDTS"
MDTS_VERSION = 1
MDTS_HEADER = struct.Struct("<4sII")
ENTRY_DTYPE = np.dtype([("key", "<u8"), ("weight", "<f8")])


class SelectorError(Exception):
    pass


class EmptyTriggerError(SelectorError):
    """Raised when a trigger closes over an empty window (code: empty_trigger)."""


class DuplicateSampleError(SelectorError):
    pass


@dataclass(frozen=True)
class SelectionConfig:
    """Window + presampling policy; the downsampling half lives in the trainer."""

    tail_triggers: int | None = None  # None: infinite window (all past data)
    presampling: str = "none"  # none | uniform | class_balanced | trigger_balanced
    presampling_ratio: float = 1.0
    warmup_triggers: int = 0
    partition_size: int = 1000
    writer_threads: int = 1
    backend: str = "memory"  # memory | local
    seed: int = 0

    def __post_init__(self):
        if self.tail_triggers is not None and self.tail_triggers < 0:
            raise SelectorError("tail_triggers must be >= 0 or None")
        if not 0.0 < self.presampling_ratio <= 1.0:
            raise SelectorError("presampling_ratio must be in (0, 1]")
        if self.partition_size < 1:
            raise SelectorError("partition_size must be positive")
        if self.presampling not in ("none", "uniform", "class_balanced", "trigger_balanced"):
            raise SelectorError(f"unknown presampling policy {self.presampling!r}")


# ---------------------------------------------------------------------------
# trigger sample storage


def _partition_files(directory: Path, trigger_id: int, partition: int) -> list[Path]:
    pattern = f"trigger_{trigger_id}_partition_{partition}_*.mdts"
    files = list(Path(directory).glob(pattern))
    files.sort(key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    return files


def _write_entry_file(path: Path, entries: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(MDTS_HEADER.pack(MDTS_MAGIC, MDTS_VERSION, len(entries)))
        f.write(entries.tobytes())


def _read_entry_file_header(path: Path) -> int:
    with open(path, "rb") as f:
        header = f.read(MDTS_HEADER.size)
    if len(header) < MDTS_HEADER.size:
        raise SelectorError(f"{path}: truncated header")
    magic, version, count = MDTS_HEADER.unpack(header)
    if magic != MDTS_MAGIC:
        raise SelectorError(f"{path}: bad magic {magic!r}")
    if version != MDTS_VERSION:
        raise SelectorError(f"{path}: unsupported version {version}")
    expected = MDTS_HEADER.size + count * ENTRY_DTYPE.itemsize
    if path.stat().st_size != expected:
        raise SelectorError(f"{path}: size {path.stat().st_size} != expected {expected}")
    return count


def _read_entry_range(path: Path, start: int, stop: int) -> np.ndarray:
    with open(path, "rb") as f:
        f.seek(MDTS_HEADER.size + start * ENTRY_DTYPE.itemsize)
        raw = f.read((stop - start) * ENTRY_DTYPE.itemsize)
    return np.frombuffer(raw, dtype=ENTRY_DTYPE)


def worker_share_bounds(n: int, worker_id: int, num_workers: int) -> tuple[int, int]:
    """Contiguous [start, stop) bounds; share sizes differ by at most one."""
    if not 0 <= worker_id < num_workers:
        raise SelectorError(f"worker_id {worker_id} out of range for {num_workers} workers")
    base, extra = divmod(n, num_workers)
    start = worker_id * base + min(worker_id, extra)
    stop = start + base + (1 if worker_id < extra else 0)
    return start, stop


@dataclass
class TriggerTrainingSet:
    """Handle to one persisted trigger training set."""

    trigger_id: int
    directory: Path
    partition_size: int
    partition_counts: list[int]
    total_count: int

    @property
    def num_partitions(self) -> int:
        return len(self.partition_counts)

    @classmethod
    def write(
        cls,
        directory,
        trigger_id: int,
        keys: np.ndarray,
        weights: np.ndarray,
        partition_size: int,
        writer_threads: int = 1,
    ) -> "TriggerTrainingSet":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        keys = np.asarray(keys, dtype=np.uint64)
        weights = np.asarray(weights, dtype=np.float64)
        if len(keys) != len(weights):
            raise SelectorError("keys and weights length mismatch")
        if len(keys) == 0:
            raise EmptyTriggerError("empty_trigger: no samples selected")
        entries = np.empty(len(keys), dtype=ENTRY_DTYPE)
        entries["key"] = keys
        entries["weight"] = weights
        counts = []
        jobs = []
        for p_idx, start in enumerate(range(0, len(entries), partition_size)):
            part = entries[start : start + partition_size]
            counts.append(len(part))
            chunks = [c for c in np.array_split(part, min(writer_threads, len(part))) if len(c)]
            for t_idx, chunk in enumerate(chunks):
                path = directory / f"trigger_{trigger_id}_partition_{p_idx}_{t_idx}.mdts"
                jobs.append((path, chunk))
        if writer_threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=writer_threads) as pool:
                list(pool.map(lambda j: _write_entry_file(*j), jobs))
        else:
            for job in jobs:
                _write_entry_file(*job)
        return cls(trigger_id, directory, partition_size, counts, int(len(entries)))

    @classmethod
    def load(cls, directory, trigger_id: int) -> "TriggerTrainingSet":
        directory = Path(directory)
        counts = []
        p = 0
        while True:
            files = _partition_files(directory, trigger_id, p)
            if not files:
                break
            counts.append(sum(_read_entry_file_header(f) for f in files))
            p += 1
        if not counts:
            raise SelectorError(f"no partitions for trigger {trigger_id} in {directory}")
        size = max(counts)
        return cls(trigger_id, directory, size, counts, int(sum(counts)))

    def _read_range(self, partition: int, start: int, stop: int) -> np.ndarray:
        files = _partition_files(self.directory, self.trigger_id, partition)
        pieces = []
        offset = 0
        for path in files:
            count = _read_entry_file_header(path)
            lo = max(start - offset, 0)
            hi = min(stop - offset, count)
            if lo < hi:
                pieces.append(_read_entry_range(path, lo, hi))
            offset += count
        if not pieces:
            return np.zeros(0, dtype=ENTRY_DTYPE)
        return np.concatenate(pieces)

    def read_partition(self, partition: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= partition < self.num_partitions:
            raise SelectorError(f"partition {partition} out of range")
        entries = self._read_range(partition, 0, self.partition_counts[partition])
        return entries["key"].copy(), entries["weight"].copy()

    def get_partition_share(
        self, partition: int, worker_id: int, num_workers: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Contiguous per-worker slice of a partition, straight from disk.

        The split is by entry position, so reassembly over worker ids yields
        the persisted sequence regardless of how many writer threads
        produced the files.
        """
        if not 0 <= partition < self.num_partitions:
            raise SelectorError(f"partition {partition} out of range")
        n = self.partition_counts[partition]
        start, stop = worker_share_bounds(n, worker_id, num_workers)
        entries = self._read_range(partition, start, stop)
        return entries["key"].copy(), entries["weight"].copy()


# ---------------------------------------------------------------------------
# presampling


def _balanced_quotas(sizes: np.ndarray, budget: int) -> np.ndarray:
    """Per-group quotas: floor(budget / groups) each, remainder one-by-one to
    larger groups first, capped at group size with leftovers redistributed."""
    n_groups = len(sizes)
    order = np.lexsort((np.arange(n_groups), -sizes))  # descending size, stable
    quotas = np.full(n_groups, budget // n_groups, dtype=np.int64)
    for i in range(budget % n_groups):
        quotas[order[i]] += 1
    leftover = int(np.maximum(quotas - sizes, 0).sum())
    quotas = np.minimum(quotas, sizes)
    while leftover > 0:
        progressed = False
        for g in order:
            if leftover == 0:
                break
            if quotas[g] < sizes[g]:
                quotas[g] += 1
                leftover -= 1
                progressed = True
        if not progressed:
            break
    return quotas


def presample(
    keys: np.ndarray,
    labels: np.ndarray,
    trigger_ids: np.ndarray,
    policy: str,
    ratio: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Select floor(ratio * pool) keys without a model forward pass.

    Returns (keys, weights) in ascending key order, weights all 1.0.
    """
    if not 0.0 < ratio <= 1.0:
        raise SelectorError(f"ratio {ratio} outside (0, 1]")
    keys = np.asarray(keys, dtype=np.uint64)
    budget = int(np.floor(ratio * len(keys)))
    if policy == "none" or budget == len(keys):
        selected = np.sort(keys)
        return selected, np.ones(len(selected))
    rng = rng_for(seed, "presample")
    if policy == "uniform":
        picked = rng.choice(len(keys), size=budget, replace=False)
        selected = keys[picked]
    elif policy in ("class_balanced", "trigger_balanced"):
        group_of = labels if policy == "class_balanced" else trigger_ids
        group_of = np.asarray(group_of)
        groups, inverse, sizes = np.unique(group_of, return_inverse=True, return_counts=True)
        quotas = _balanced_quotas(sizes, budget)
        chosen = []
        for g in range(len(groups)):
            members = np.nonzero(inverse == g)[0]
            take = int(quotas[g])
            if take:
                chosen.append(members[rng.choice(len(members), size=take, replace=False)])
        selected = keys[np.concatenate(chosen)] if chosen else np.zeros(0, dtype=np.uint64)
    else:
        raise SelectorError(f"unknown presampling policy {policy!r}")
    selected = np.sort(selected)
    return selected, np.ones(len(selected))


# ---------------------------------------------------------------------------
# selector state backends

POOL_DTYPE = np.dtype([("key", "<u8"), ("timestamp", "<i8"), ("label", "<i8")])


class MemoryPoolBackend:
    """Pools held as in-memory chunk lists; the indexed-table query backend."""

    def __init__(self):
        self._pools: list[list[np.ndarray]] = [[]]

    @property
    def num_pools(self) -> int:
        return len(self._pools)

    def append(self, records: np.ndarray) -> None:
        self._pools[-1].append(records)

    def start_new_pool(self) -> None:
        self._pools.append([])

    def pool(self, index: int) -> np.ndarray:
        chunks = self._pools[index]
        if not chunks:
            return np.zeros(0, dtype=POOL_DTYPE)
        return np.concatenate(chunks)


class LocalPoolBackend:
    """Append-only binary pool files on local disk, one per trigger pool."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._current = 0

    def _path(self, index: int) -> Path:
        return self.directory / f"pool_{index}.bin"

    @property
    def num_pools(self) -> int:
        return self._current + 1

    def append(self, records: np.ndarray) -> None:
        with open(self._path(self._current), "ab") as f:
            f.write(records.tobytes())

    def start_new_pool(self) -> None:
        self._current += 1

    def pool(self, index: int) -> np.ndarray:
        path = self._path(index)
        if not path.exists():
            return np.zeros(0, dtype=POOL_DTYPE)
        return np.fromfile(path, dtype=POOL_DTYPE)


class Selector:
    """Per-pipeline selection state machine.

    ``inform_samples`` feeds observed stream samples into the current trigger
    pool; ``inform_trigger`` closes the pool, applies window + presampling,
    and persists the trigger training set.
    """

    def __init__(self, config: SelectionConfig, out_dir):
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if config.backend == "memory":
            self.backend = MemoryPoolBackend()
        elif config.backend == "local":
            self.backend = LocalPoolBackend(self.out_dir / "pools")
        else:
            raise SelectorError(f"unknown backend {config.backend!r}")
        self.trigger_count = 0
        self.class_counts: dict[int, int] = {}
        self.last_window_bounds: tuple[int, int, int] | None = None  # (min ts, max ts, size)
        self._seen: set[int] = set()
        self._informed_total = 0
        self._lock = threading.Lock()

    @property
    def informed_count(self) -> int:
        return self._informed_total

    def inform_samples(self, keys, timestamps, labels) -> None:
        keys = np.asarray(keys, dtype=np.uint64)
        if len(keys) == 0:
            return
        records = np.empty(len(keys), dtype=POOL_DTYPE)
        records["key"] = keys
        records["timestamp"] = np.asarray(timestamps, dtype=np.int64)
        records["label"] = np.asarray(labels, dtype=np.int64)
        with self._lock:
            uniq, counts = np.unique(keys, return_counts=True)
            if (counts > 1).any():
                raise DuplicateSampleError(f"duplicate key in batch: {int(uniq[counts > 1][0])}")
            dup = [k for k in uniq.tolist() if k in self._seen]
            if dup:
                raise DuplicateSampleError(f"key already informed: {dup[0]}")
            self._seen.update(uniq.tolist())
            self.backend.append(records)
            self._informed_total += len(keys)
            for label, count in zip(*np.unique(records["label"], return_counts=True)):
                self.class_counts[int(label)] = self.class_counts.get(int(label), 0) + int(count)

    def _window_records(self) -> tuple[np.ndarray, np.ndarray]:
        """Pools of the last (tail_triggers + 1) triggers, with pool ids."""
        current = self.backend.num_pools - 1
        if self.config.tail_triggers is None:
            first = 0
        else:
            first = max(0, current - self.config.tail_triggers)
        parts, ids = [], []
        for r in range(first, current + 1):
            pool = self.backend.pool(r)
            parts.append(pool)
            ids.append(np.full(len(pool), r, dtype=np.int64))
        records = np.concatenate(parts) if parts else np.zeros(0, dtype=POOL_DTYPE)
        return records, (np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64))

    def inform_trigger(self) -> TriggerTrainingSet:
        records, pool_ids = self._window_records()
        if len(records) == 0:
            raise EmptyTriggerError("empty_trigger: no informed samples in window")
        self.last_window_bounds = (
            int(records["timestamp"].min()),
            int(records["timestamp"].max()),
            len(records),
        )
        trigger_id = self.trigger_count
        if trigger_id < self.config.warmup_triggers or self.config.presampling == "none":
            selected = np.sort(records["key"])
            weights = np.ones(len(selected))
        else:
            selected, weights = presample(
                records["key"],
                records["label"],
                pool_ids,
                self.config.presampling,
                self.config.presampling_ratio,
                seed=self.config.seed + trigger_id,
            )
        tts = TriggerTrainingSet.write(
            self.out_dir,
            trigger_id,
            selected,
            weights,
            self.config.partition_size,
            self.config.writer_threads,
        )
        self.trigger_count += 1
        self.backend.start_new_pool()
        return tts
