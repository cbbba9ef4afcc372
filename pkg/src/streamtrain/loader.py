"""Training data loader: per-worker partition shares, prefetching, batching.

Every worker owns an equal contiguous share of each trigger-training-set
partition. A worker turns its shares into a flat sample stream (optionally
shuffled per epoch) and the loader yields fixed-size batches round-robin
across workers. With ``prefetch_buffer_partitions`` > 0 each worker keeps
that many partition fetches in flight ahead of consumption, issued by
``parallel_prefetch_requests`` concurrent requests, so storage reads overlap
with batch consumption. Partition results are always consumed in partition
order, which keeps the yielded sample sequence deterministic regardless of
fetch completion order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .seeding import rng_for
from .storage import DEFAULT_BUFFER_BYTES, StorageError, UnknownKeyError


class LoaderError(Exception):
    pass


@dataclass(frozen=True)
class LoaderConfig:
    num_workers: int = 1
    prefetch_buffer_partitions: int = 0
    parallel_prefetch_requests: int = 1
    storage_threads: int = 1
    buffer_bytes: int = DEFAULT_BUFFER_BYTES

    def __post_init__(self):
        if self.num_workers < 1:
            raise LoaderError("num_workers must be >= 1")
        if self.prefetch_buffer_partitions < 0:
            raise LoaderError("prefetch_buffer_partitions must be >= 0")
        if self.parallel_prefetch_requests < 1:
            raise LoaderError("parallel_prefetch_requests must be >= 1")


@dataclass
class Batch:
    features: np.ndarray  # (n, feature_dim) float64
    labels: np.ndarray  # (n,) int64
    weights: np.ndarray  # (n,) float64
    keys: np.ndarray  # (n,) uint64
    worker_id: int = 0

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# bytes parsers


class BytesParser:
    """Turns raw payload bytes into a feature vector."""

    name = "abstract"
    # element dtype for the typed-gather fast path over fixed binary records;
    # None means the parser only handles whole payload byte strings
    element_dtype: str | None = None
    # dtype of the feature tensors handed to the training loop
    output_dtype = np.float64

    def parse(self, payload: bytes) -> np.ndarray:
        raise NotImplementedError

    def parse_matrix(self, payload_matrix: np.ndarray) -> np.ndarray | None:
        """Vectorized fast path over fixed-width payload rows; None opts out."""
        return None


class Float32VectorParser(BytesParser):
    """Payload is a little-endian float32 vector (the reference format)."""

    name = "float32_vector"
    element_dtype = "<f4"

    def parse(self, payload: bytes) -> np.ndarray:
        return np.frombuffer(payload, dtype="<f4").astype(np.float64)

    def parse_matrix(self, payload_matrix: np.ndarray) -> np.ndarray:
        n, width = payload_matrix.shape
        return (
            np.ascontiguousarray(payload_matrix)
            .view("<f4")
            .reshape(n, width // 4)
            .astype(np.float64)
        )


class Uint8VectorParser(BytesParser):
    """Each payload byte is one feature in [0, 255]."""

    name = "uint8_vector"
    element_dtype = "u1"

    def parse(self, payload: bytes) -> np.ndarray:
        return np.frombuffer(payload, dtype=np.uint8).astype(np.float64)

    def parse_matrix(self, payload_matrix: np.ndarray) -> np.ndarray:
        return payload_matrix.astype(np.float64)


class Float32VectorRawParser(Float32VectorParser):
    """float32 payloads kept in float32, for memory-lean training loops."""

    name = "float32_vector_raw"
    output_dtype = np.float32

    def parse(self, payload: bytes) -> np.ndarray:
        return np.frombuffer(payload, dtype="<f4").copy()

    def parse_matrix(self, payload_matrix: np.ndarray) -> np.ndarray:
        n, width = payload_matrix.shape
        return (
            np.ascontiguousarray(payload_matrix).view("<f4").reshape(n, width // 4).copy()
        )


class CsvNumericParser(BytesParser):
    """Comma-separated decimal payloads, e.g. from csv-wrapped files."""

    name = "csv_numeric"

    def parse(self, payload: bytes) -> np.ndarray:
        return np.array([float(x) for x in payload.split(b",")], dtype=np.float64)


PARSERS: dict[str, BytesParser] = {
    p.name: p
    for p in (
        Float32VectorParser(),
        Float32VectorRawParser(),
        Uint8VectorParser(),
        CsvNumericParser(),
    )
}


def get_parser(name: str) -> BytesParser:
    if name not in PARSERS:
        raise LoaderError(f"unknown bytes parser {name!r}; have {sorted(PARSERS)}")
    return PARSERS[name]


def fetch_share_arrays(store, keys, parser: BytesParser, storage_threads: int = 1):
    """Fetch payloads for ``keys`` (request order) and parse to features."""
    keys = np.asarray(keys, dtype=np.uint64)
    if parser.element_dtype is not None:
        try:
            labels, typed = store.gather_typed_payloads(keys, parser.element_dtype)
        except UnknownKeyError:
            raise
        except StorageError:
            pass  # mixed wrappers or widths: fall through to the slower paths
        else:
            if typed.dtype == parser.output_dtype:
                return typed, labels
            return typed.astype(parser.output_dtype), labels
    payloads = None
    labels = None
    try:
        labels, payload_matrix = store.get_sample_arrays(keys)
    except UnknownKeyError:
        raise
    except StorageError:
        pass  # mixed wrappers: fall back to the generic buffer path
    else:
        fast = parser.parse_matrix(payload_matrix)
        if fast is not None:
            return fast, labels
        payloads = [payload_matrix[i].tobytes() for i in range(len(keys))]
    if payloads is None:
        position = {int(k): i for i, k in enumerate(keys)}
        labels = np.empty(len(keys), dtype=np.int64)
        payloads = [b""] * len(keys)
        for buf in store.get_samples_by_keys(keys, threads=storage_threads):
            for key, label, payload in buf:
                i = position[key]
                labels[i] = label
                payloads[i] = payload
    features = np.stack([parser.parse(p) for p in payloads]) if payloads else np.zeros((0, 0))
    return features, labels


# ---------------------------------------------------------------------------
# worker streams


class _WorkerStream:
    """One worker's fetched partition shares, consumed in partition order."""

    def __init__(self, tts, store, parser, cfg: LoaderConfig, worker_id: int,
                 partition_order, share_perms):
        self.tts = tts
        self.store = store
        self.parser = parser
        self.cfg = cfg
        self.worker_id = worker_id
        self.partition_order = partition_order
        self.share_perms = share_perms

    def _fetch(self, partition: int):
        keys, weights = self.tts.get_partition_share(
            partition, self.worker_id, self.cfg.num_workers
        )
        if len(keys) == 0:
            return None
        perm = self.share_perms.get(partition)
        if perm is not None:
            keys, weights = keys[perm], weights[perm]
        features, labels = fetch_share_arrays(
            self.store, keys, self.parser, self.cfg.storage_threads
        )
        return features, labels, weights, keys

    def shares(self):
        prefetch = self.cfg.prefetch_buffer_partitions
        if prefetch == 0:
            for p in self.partition_order:
                share = self._fetch(p)
                if share is not None:
                    yield share
            return
        pool = ThreadPoolExecutor(
            max_workers=self.cfg.parallel_prefetch_requests,
            thread_name_prefix=f"prefetch-w{self.worker_id}",
        )
        try:
            futures: dict[int, object] = {}
            submitted = 0
            for pos in range(len(self.partition_order)):
                while submitted < len(self.partition_order) and submitted <= pos + prefetch:
                    futures[submitted] = pool.submit(
                        self._fetch, self.partition_order[submitted]
                    )
                    submitted += 1
                share = futures.pop(pos).result()
                if share is not None:
                    yield share
        finally:
            pool.shutdown(wait=False, cancel_futures=True)

    def batches(self, batch_size: int):
        parts: list = []
        count = 0
        for share in self.shares():
            parts.append(share)
            count += len(share[3])
            while count >= batch_size:
                yield self._assemble(parts, batch_size)
                parts = [p for p in parts if len(p[3])]
                count = sum(len(p[3]) for p in parts)
        if count:
            yield self._assemble(parts, count)

    def _assemble(self, parts: list, size: int) -> Batch:
        taken = []
        need = size
        for i, (features, labels, weights, keys) in enumerate(parts):
            take = min(need, len(keys))
            taken.append((features[:take], labels[:take], weights[:take], keys[:take]))
            parts[i] = (features[take:], labels[take:], weights[take:], keys[take:])
            need -= take
            if need == 0:
                break
        if len(taken) == 1:  # common case: the batch is one contiguous slice
            features, labels, weights, keys = taken[0]
            return Batch(features, labels, weights, keys, worker_id=self.worker_id)
        return Batch(
            features=np.concatenate([t[0] for t in taken]),
            labels=np.concatenate([t[1] for t in taken]),
            weights=np.concatenate([t[2] for t in taken]),
            keys=np.concatenate([t[3] for t in taken]),
            worker_id=self.worker_id,
        )


def loader_stream(
    tts,
    cfg: LoaderConfig,
    store,
    parser: BytesParser,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
):
    """Yield training batches for one epoch, round-robin across workers.

    With ``shuffle`` the per-worker partition visit order and the sample
    order inside each share are permuted with an epoch-derived seed. The
    multiset of yielded keys always equals the trigger training set exactly.
    """
    if batch_size < 1:
        raise LoaderError("batch_size must be >= 1")
    n_parts = tts.num_partitions
    workers = []
    for w in range(cfg.num_workers):
        order = list(range(n_parts))
        share_perms: dict[int, np.ndarray] = {}
        if shuffle:
            rng = rng_for(seed, f"loader:{epoch}:{w}")
            order = rng.permutation(n_parts).tolist()
            for p in range(n_parts):
                start, stop = _share_size(tts, p, w, cfg.num_workers)
                share_perms[p] = rng.permutation(stop - start)
        workers.append(_WorkerStream(tts, store, parser, cfg, w, order, share_perms))
    iterators = [w.batches(batch_size) for w in workers]
    active = list(range(len(iterators)))
    while active:
        still = []
        for w in active:
            try:
                yield next(iterators[w])
                still.append(w)
            except StopIteration:
                pass
        active = still


def _share_size(tts, partition: int, worker_id: int, num_workers: int):
    from .selector import worker_share_bounds

    return worker_share_bounds(tts.partition_counts[partition], worker_id, num_workers)
