"""Sample storage: file registration, key-addressed retrieval, stream replay.

Samples live in their original data files; the store only keeps an index
mapping each dense 64-bit key to (file, byte offset, label, timestamp).
Three file wrappers are supported:

* ``binary_fixed_record``: the ``MDSF`` fixed-row binary format. Layout is a
  16-byte header (magic ``MDSF``, version u32 LE, record_bytes u32 LE,
  record_count u32 LE) followed by ``record_count`` records, each an i64 LE
  label and ``record_bytes - 8`` payload bytes.
* ``csv``: UTF-8 comma-separated rows, optional header row; one column holds
  the signed decimal label and the remaining columns (joined by commas) are
  the payload, byte for byte.
* ``single_sample``: the whole file is one payload; label and timestamp are
  supplied at registration.

Retrieval of arbitrary key sets is parallelized over thread shares; within a
share, keys are grouped by file so that each file is opened exactly once.
"""

from __future__ import annotations

import json
import mmap
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from queue import Queue
from typing import Iterator, Sequence

import numpy as np

from .seeding import derive_seed

MDSF_MAGIC = b"MDSF"
MDSF_VERSION = 1
MDSF_HEADER = struct.Struct("<4sIII")  # magic, version, record_bytes, record_count

DEFAULT_BUFFER_BYTES = 8 * 1024 * 1024

_U64 = np.uint64
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class StorageError(Exception):
    pass


class ParseError(StorageError):
    """Malformed data file; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: {message} (at byte offset {offset})")


class DuplicateFileError(StorageError):
    pass


class UnknownKeyError(StorageError):
    def __init__(self, key: int):
        self.key = int(key)
        super().__init__(f"unknown sample key {key}")


@dataclass(frozen=True)
class Sample:
    key: int
    timestamp: int
    label: int
    payload: bytes


@dataclass(frozen=True)
class FileRecordSpec:
    """How to extract samples from one registered file."""

    wrapper_kind: str  # binary_fixed_record | csv | single_sample
    record_bytes: int | None = None  # binary only
    label_column: int | None = None  # csv only
    has_header: bool = False  # csv only
    label: int = -1  # single_sample only

    def __post_init__(self):
        kinds = ("binary_fixed_record", "csv", "single_sample")
        if self.wrapper_kind not in kinds:
            raise StorageError(f"unknown wrapper_kind {self.wrapper_kind!r}")
        if self.wrapper_kind == "binary_fixed_record":
            if self.record_bytes is None or self.record_bytes < 9:
                raise StorageError("binary_fixed_record requires record_bytes >= 9")
        if self.wrapper_kind == "csv" and self.label_column is None:
            raise StorageError("csv requires label_column")


@dataclass(frozen=True)
class StreamBatch:
    """Ordered slice of the replayed stream; timestamps are non-decreasing."""

    keys: np.ndarray
    timestamps: np.ndarray
    labels: np.ndarray
    watermark: int

    def __len__(self) -> int:
        return len(self.keys)

    def rows(self) -> Iterator[tuple[int, int, int]]:
        for k, t, y in zip(self.keys, self.timestamps, self.labels):
            yield int(k), int(t), int(y)


def write_mdsf(path, labels: Sequence[int], payloads: Sequence[bytes] | np.ndarray) -> None:
    """Write an ``MDSF`` file. All payloads must share one length."""
    labels = np.asarray(labels, dtype="<i8")
    if isinstance(payloads, np.ndarray):
        if payloads.ndim != 2 or payloads.dtype != np.uint8:
            raise StorageError("payload matrix must be 2-D uint8")
        payload_matrix = payloads
    else:
        if len(payloads) != len(labels):
            raise StorageError("labels and payloads length mismatch")
        if payloads:
            width = len(payloads[0])
            if any(len(p) != width for p in payloads):
                raise StorageError("payloads must all have the same length")
            payload_matrix = np.frombuffer(b"".join(payloads), dtype=np.uint8)
            payload_matrix = payload_matrix.reshape(len(payloads), width)
        else:
            payload_matrix = np.zeros((0, 1), dtype=np.uint8)
    record_bytes = 8 + payload_matrix.shape[1]
    count = len(labels)
    records = np.empty((count, record_bytes), dtype=np.uint8)
    records[:, :8] = labels.view(np.uint8).reshape(count, 8)
    records[:, 8:] = payload_matrix
    with open(path, "wb") as f:
        f.write(MDSF_HEADER.pack(MDSF_MAGIC, MDSF_VERSION, record_bytes, count))
        f.write(records.tobytes())


def _read_mdsf_header(path) -> tuple[int, int]:
    with open(path, "rb") as f:
        header = f.read(MDSF_HEADER.size)
    if len(header) < MDSF_HEADER.size:
        raise ParseError(path, len(header), "truncated header")
    magic, version, record_bytes, count = MDSF_HEADER.unpack(header)
    if magic != MDSF_MAGIC:
        raise ParseError(path, 0, f"bad magic {magic!r}, expected {MDSF_MAGIC!r}")
    if version != MDSF_VERSION:
        raise ParseError(path, 4, f"unsupported version {version}")
    if record_bytes < 9:
        raise ParseError(path, 8, f"record_bytes {record_bytes} < 9")
    return record_bytes, count


def _parse_csv_rows(path, label_column: int, has_header: bool):
    """Return (row offsets, labels, line lengths) for the data rows of a CSV."""
    raw = Path(path).read_bytes()
    offsets, labels = [], []
    pos = 0
    first = True
    while pos < len(raw):
        nl = raw.find(b"\n", pos)
        end = len(raw) if nl < 0 else nl
        line = raw[pos:end]
        if line.endswith(b"\r"):
            line = line[:-1]
        if line:
            if first and has_header:
                first = False
                pos = end + 1
                continue
            first = False
            fields = line.split(b",")
            if label_column >= len(fields):
                raise ParseError(path, pos, f"row has {len(fields)} fields, label_column={label_column}")
            try:
                label = int(fields[label_column])
            except ValueError:
                raise ParseError(path, pos, f"label field {fields[label_column]!r} is not an integer") from None
            offsets.append(pos)
            labels.append(label)
        pos = end + 1
    return offsets, labels


def _csv_payload_from_line(line: bytes, label_column: int) -> bytes:
    if line.endswith(b"\n"):
        line = line[:-1]
    if line.endswith(b"\r"):
        line = line[:-1]
    fields = line.split(b",")
    del fields[label_column]
    return b",".join(fields)


class SampleStore:
    """Indexed store over registered data files.

    Keys are dense unsigned integers assigned in registration order. The
    index (file id, byte offset, label, timestamp per key) persists next to a
    JSON manifest in ``store_dir``. Registration is single-writer; retrieval
    is safe for concurrent readers.
    """

    INDEX_FILE = "index.npz"
    MANIFEST_FILE = "manifest.json"

    def __init__(self, store_dir, dataset_id: str, _loading: bool = False):
        self.store_dir = Path(store_dir)
        self.dataset_id = dataset_id
        self.files: list[dict] = []  # {path, wrapper_kind, record_bytes, label_column, has_header}
        self._file_ids = np.zeros(0, dtype=np.int32)
        self._offsets = np.zeros(0, dtype=np.int64)
        self._labels = np.zeros(0, dtype=np.int64)
        self._timestamps = np.zeros(0, dtype=np.int64)
        self._registered_paths: set[str] = set()
        self._lock = threading.Lock()
        self.file_opens = 0
        if not _loading:
            self.store_dir.mkdir(parents=True, exist_ok=True)
            self._save()

    # -- persistence ------------------------------------------------------

    @classmethod
    def create(cls, store_dir, dataset_id: str) -> "SampleStore":
        store_dir = Path(store_dir)
        if (store_dir / cls.MANIFEST_FILE).exists():
            raise StorageError(f"store already exists at {store_dir}")
        return cls(store_dir, dataset_id)

    @classmethod
    def open(cls, store_dir) -> "SampleStore":
        store_dir = Path(store_dir)
        manifest_path = store_dir / cls.MANIFEST_FILE
        if not manifest_path.exists():
            raise StorageError(f"no store manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        store = cls(store_dir, manifest["dataset_id"], _loading=True)
        store.files = manifest["files"]
        store._registered_paths = {f["path"] for f in store.files}
        with np.load(store_dir / cls.INDEX_FILE) as idx:
            store._file_ids = idx["file_ids"]
            store._offsets = idx["offsets"]
            store._labels = idx["labels"]
            store._timestamps = idx["timestamps"]
        return store

    def _save(self) -> None:
        manifest = {"dataset_id": self.dataset_id, "files": self.files}
        (self.store_dir / self.MANIFEST_FILE).write_text(json.dumps(manifest, indent=2))
        np.savez(
            self.store_dir / self.INDEX_FILE,
            file_ids=self._file_ids,
            offsets=self._offsets,
            labels=self._labels,
            timestamps=self._timestamps,
        )

    # -- registration -----------------------------------------------------

    def __len__(self) -> int:
        return len(self._file_ids)

    def register_file(
        self,
        path,
        spec: FileRecordSpec,
        base_timestamp: int,
        per_sample_timestamps: Sequence[int] | None = None,
    ) -> np.ndarray:
        """Index every sample in ``path``; returns the newly assigned keys.

        Timestamps are ``base_timestamp`` plus the optional per-sample
        offsets (one per extracted sample, in file order).
        """
        path = Path(path).resolve()
        if not path.exists():
            raise StorageError(f"file not found: {path}")
        if str(path) in self._registered_paths:
            raise DuplicateFileError(f"file already registered: {path}")

        if spec.wrapper_kind == "binary_fixed_record":
            record_bytes, count = _read_mdsf_header(path)
            if record_bytes != spec.record_bytes:
                raise ParseError(
                    path, 8,
                    f"header record_bytes {record_bytes} != spec record_bytes {spec.record_bytes}",
                )
            expected = MDSF_HEADER.size + record_bytes * count
            actual = path.stat().st_size
            if actual != expected:
                raise ParseError(path, min(actual, expected), f"file size {actual} != expected {expected}")
            offsets = MDSF_HEADER.size + record_bytes * np.arange(count, dtype=np.int64)
            if count:
                with open(path, "rb") as f:
                    f.read(MDSF_HEADER.size)
                    body = f.read()
                rows = np.frombuffer(body, dtype=np.uint8).reshape(count, record_bytes)
                labels = rows[:, :8].copy().view("<i8").ravel().astype(np.int64)
            else:
                labels = np.zeros(0, dtype=np.int64)
        elif spec.wrapper_kind == "csv":
            row_offsets, row_labels = _parse_csv_rows(path, spec.label_column, spec.has_header)
            offsets = np.asarray(row_offsets, dtype=np.int64)
            labels = np.asarray(row_labels, dtype=np.int64)
            count = len(offsets)
        else:  # single_sample
            offsets = np.zeros(1, dtype=np.int64)
            labels = np.asarray([spec.label], dtype=np.int64)
            count = 1

        if per_sample_timestamps is not None:
            ts_off = np.asarray(per_sample_timestamps, dtype=np.int64)
            if len(ts_off) != count:
                raise StorageError(
                    f"per_sample_timestamps has {len(ts_off)} entries, file has {count} samples"
                )
            timestamps = base_timestamp + ts_off
        else:
            timestamps = np.full(count, base_timestamp, dtype=np.int64)

        file_id = len(self.files)
        entry = {
            "path": str(path),
            "wrapper_kind": spec.wrapper_kind,
            "record_bytes": spec.record_bytes,
            "label_column": spec.label_column,
            "has_header": spec.has_header,
            "record_count": count,
        }
        first_key = len(self._file_ids)
        self.files.append(entry)
        self._registered_paths.add(str(path))
        self._file_ids = np.concatenate([self._file_ids, np.full(count, file_id, dtype=np.int32)])
        self._offsets = np.concatenate([self._offsets, offsets])
        self._labels = np.concatenate([self._labels, labels])
        self._timestamps = np.concatenate([self._timestamps, timestamps])
        self._save()
        return np.arange(first_key, first_key + count, dtype=np.uint64)

    # -- retrieval --------------------------------------------------------

    def _check_keys(self, keys: np.ndarray) -> None:
        if len(keys) == 0:
            return
        bad = (keys >= len(self)) | (keys < 0)
        if bad.any():
            raise UnknownKeyError(int(np.asarray(keys)[bad][0]))

    def _count_open(self) -> None:
        with self._lock:
            self.file_opens += 1

    def reset_stats(self) -> None:
        with self._lock:
            self.file_opens = 0

    def _read_file_records(self, file_id: int, keys: np.ndarray) -> list[tuple[int, int, bytes]]:
        """Read the given keys from one file; opens the file exactly once."""
        entry = self.files[file_id]
        path = entry["path"]
        self._count_open()
        kind = entry["wrapper_kind"]
        out: list[tuple[int, int, bytes]] = []
        if kind == "binary_fixed_record":
            record_bytes = entry["record_bytes"]
            offsets = self._offsets[keys]
            lo = int(offsets.min())
            hi = int(offsets.max()) + record_bytes
            with open(path, "rb") as f:
                # A spanning range read amortizes better once a decent share
                # of it is requested; sparse requests seek per record.
                if len(keys) * record_bytes * 4 >= hi - lo:
                    f.seek(lo)
                    body = f.read(hi - lo)
                    rows = np.frombuffer(body, dtype=np.uint8).reshape(-1, record_bytes)
                    picked = rows[(offsets - lo) // record_bytes]
                    labels = picked[:, :8].copy().view("<i8").ravel()
                    for i, key in enumerate(keys):
                        out.append((int(key), int(labels[i]), picked[i, 8:].tobytes()))
                else:
                    for key, off in zip(keys, offsets):
                        f.seek(int(off))
                        rec = f.read(record_bytes)
                        label = struct.unpack("<q", rec[:8])[0]
                        out.append((int(key), label, rec[8:]))
        elif kind == "csv":
            with open(path, "rb") as f:
                for key in keys:
                    f.seek(int(self._offsets[key]))
                    line = f.readline()
                    payload = _csv_payload_from_line(line, entry["label_column"])
                    out.append((int(key), int(self._labels[key]), payload))
        else:  # single_sample
            payload = Path(path).read_bytes()
            for key in keys:
                out.append((int(key), int(self._labels[key]), payload))
        return out

    def _share_buffers(self, share: np.ndarray, buffer_bytes: int):
        """Yield response buffers for one thread share, grouped by file."""
        order = np.argsort(self._file_ids[share], kind="stable")
        grouped = share[order]
        file_ids = self._file_ids[grouped]
        buf: list[tuple[int, int, bytes]] = []
        buf_bytes = 0
        start = 0
        while start < len(grouped):
            fid = int(file_ids[start])
            stop = start
            while stop < len(grouped) and file_ids[stop] == fid:
                stop += 1
            for row in self._read_file_records(fid, grouped[start:stop]):
                buf.append(row)
                buf_bytes += len(row[2])
                if buf_bytes >= buffer_bytes:
                    yield buf
                    buf = []
                    buf_bytes = 0
            start = stop
        if buf:
            yield buf

    def get_samples_by_keys(
        self,
        keys: Sequence[int] | np.ndarray,
        threads: int = 1,
        buffer_bytes: int = DEFAULT_BUFFER_BYTES,
    ) -> Iterator[list[tuple[int, int, bytes]]]:
        """Stream response buffers of (key, label, payload) for a key set.

        The request is split into ``threads`` contiguous shares retrieved in
        parallel; each share groups its keys by file. A buffer is emitted
        once its payload bytes reach ``buffer_bytes`` or the share ends.
        """
        if threads < 1:
            raise StorageError("threads must be >= 1")
        keys = np.asarray(keys, dtype=np.int64)
        self._check_keys(keys)
        if len(keys) == 0:
            return
        if threads == 1:
            yield from self._share_buffers(keys, buffer_bytes)
            return
        shares = [s for s in np.array_split(keys, threads) if len(s)]
        done = object()
        q: Queue = Queue()

        def work(share):
            try:
                for buf in self._share_buffers(share, buffer_bytes):
                    q.put(buf)
            except BaseException as exc:  # surface worker errors to the consumer
                q.put(exc)
            finally:
                q.put(done)

        with ThreadPoolExecutor(max_workers=len(shares)) as pool:
            for share in shares:
                pool.submit(work, share)
            finished = 0
            while finished < len(shares):
                item = q.get()
                if item is done:
                    finished += 1
                elif isinstance(item, BaseException):
                    raise item
                else:
                    yield item

    def get_sample_arrays(self, keys: Sequence[int] | np.ndarray):
        """Fast path for fixed-record binary data: (labels, payload matrix).

        Equivalent to concatenating ``get_samples_by_keys`` output in request
        order; only valid when every requested sample lives in
        ``binary_fixed_record`` files sharing one record size.
        """
        keys = np.asarray(keys, dtype=np.int64)
        self._check_keys(keys)
        if len(keys) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 0), dtype=np.uint8)
        file_ids = self._file_ids[keys]
        record_bytes = None
        for fid in np.unique(file_ids):
            entry = self.files[int(fid)]
            if entry["wrapper_kind"] != "binary_fixed_record":
                raise StorageError("get_sample_arrays requires binary_fixed_record files")
            if record_bytes is None:
                record_bytes = entry["record_bytes"]
            elif entry["record_bytes"] != record_bytes:
                raise StorageError("mixed record sizes in array retrieval")
        out = np.empty((len(keys), record_bytes), dtype=np.uint8)
        order = np.argsort(file_ids, kind="stable")
        sorted_keys = keys[order]
        sorted_fids = file_ids[order]
        start = 0
        while start < len(sorted_keys):
            fid = int(sorted_fids[start])
            stop = start
            while stop < len(sorted_keys) and sorted_fids[stop] == fid:
                stop += 1
            entry = self.files[fid]
            offsets = self._offsets[sorted_keys[start:stop]]
            lo = int(offsets.min())
            hi = int(offsets.max()) + record_bytes
            self._count_open()
            with open(entry["path"], "rb") as f:
                f.seek(lo)
                body = f.read(hi - lo)
            rows = np.frombuffer(body, dtype=np.uint8).reshape(-1, record_bytes)
            out[order[start:stop]] = rows[(offsets - lo) // record_bytes]
            start = stop
        labels = out[:, :8].copy().view("<i8").ravel()
        return labels, out[:, 8:]

    def gather_typed_payloads(self, keys, element_dtype="<f4"):
        """Labels (from the index) plus payload regions as typed rows.

        Fast path for fixed-record binary files whose payloads are arrays of
        one element type: each file body is viewed as a strided matrix of
        ``element_dtype`` and the requested records are gathered in a single
        pass, in request order.
        """
        keys = np.asarray(keys, dtype=np.int64)
        self._check_keys(keys)
        dtype = np.dtype(element_dtype)
        if len(keys) == 0:
            return np.zeros(0, dtype=np.int64), np.zeros((0, 0), dtype=dtype)
        file_ids = self._file_ids[keys]
        width = None
        for fid in np.unique(file_ids):
            entry = self.files[int(fid)]
            if entry["wrapper_kind"] != "binary_fixed_record":
                raise StorageError("gather_typed_payloads requires binary_fixed_record files")
            payload_bytes = entry["record_bytes"] - 8
            if payload_bytes % dtype.itemsize:
                raise StorageError(
                    f"payload size {payload_bytes} is not a multiple of {dtype.itemsize}"
                )
            w = payload_bytes // dtype.itemsize
            if width is None:
                width = w
            elif w != width:
                raise StorageError("mixed payload widths in typed gather")
        out = np.empty((len(keys), width), dtype=dtype)
        order = np.argsort(file_ids, kind="stable")
        sorted_keys = keys[order]
        sorted_fids = file_ids[order]
        start = 0
        while start < len(sorted_keys):
            fid = int(sorted_fids[start])
            stop = start
            while stop < len(sorted_keys) and sorted_fids[stop] == fid:
                stop += 1
            entry = self.files[fid]
            record_bytes = entry["record_bytes"]
            offsets = self._offsets[sorted_keys[start:stop]]
            self._count_open()
            with open(entry["path"], "rb") as f:
                try:
                    # map the file and gather straight from the page cache
                    mm = mmap.mmap(f.fileno(), 0, prot=mmap.PROT_READ)
                except (OSError, ValueError):
                    lo = int(offsets.min())
                    hi = int(offsets.max()) + record_bytes
                    f.seek(lo)
                    body = f.read(hi - lo)
                    view = np.ndarray(
                        ((hi - lo) // record_bytes, width), dtype=dtype, buffer=body,
                        offset=8, strides=(record_bytes, dtype.itemsize),
                    )
                    out[order[start:stop]] = view[(offsets - lo) // record_bytes]
                else:
                    view = np.ndarray(
                        (entry["record_count"], width), dtype=dtype, buffer=mm,
                        offset=MDSF_HEADER.size + 8, strides=(record_bytes, dtype.itemsize),
                    )
                    indices = (offsets - MDSF_HEADER.size) // record_bytes
                    first = int(indices[0])
                    if len(indices) > 1 and indices[-1] - first == len(indices) - 1 and (
                        np.diff(indices) == 1
                    ).all():
                        # contiguous run: plain strided copy beats a gather
                        out[order[start:stop]] = view[first : first + len(indices)]
                    else:
                        out[order[start:stop]] = view[indices]
                    del view
                    mm.close()
            start = stop
        return self._labels[keys].copy(), out

    # -- stream views -----------------------------------------------------

    def labels_for(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        self._check_keys(keys)
        return self._labels[keys]

    def timestamps_for(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        self._check_keys(keys)
        return self._timestamps[keys]

    def replay_order(self) -> np.ndarray:
        """All keys sorted by (timestamp, key): the simulated arrival order."""
        keys = np.arange(len(self), dtype=np.int64)
        return keys[np.lexsort((keys, self._timestamps))]

    def replay(self, batch_size: int) -> Iterator[StreamBatch]:
        """Replay every registered sample once, in timestamp order."""
        if len(self) == 0:
            raise StorageError("cannot replay an empty store")
        if batch_size < 1:
            raise StorageError("batch_size must be >= 1")
        order = self.replay_order()
        for start in range(0, len(order), batch_size):
            chunk = order[start : start + batch_size]
            ts = self._timestamps[chunk]
            yield StreamBatch(
                keys=chunk.astype(np.uint64),
                timestamps=ts,
                labels=self._labels[chunk],
                watermark=int(ts[-1]),
            )

    def split_stream(self, eval_fraction: float, scheme: str, seed: int):
        """Partition all keys into (train, eval) sets; deterministic per seed."""
        if not 0.0 < eval_fraction < 1.0:
            raise StorageError(f"eval_fraction {eval_fraction} outside (0, 1)")
        if len(self) == 0:
            raise StorageError("cannot split an empty store")
        if scheme == "every_kth":
            # Positions where the running count floor(i * fraction) increments;
            # guarantees an eval share within 1 of fraction * N.
            order = self.replay_order()
            i = np.arange(1, len(order) + 1, dtype=np.float64)
            eval_mask = np.floor(i * eval_fraction) > np.floor((i - 1) * eval_fraction)
            eval_keys = order[eval_mask]
            train_keys = order[~eval_mask]
        elif scheme == "hash_modulo":
            keys = np.arange(len(self), dtype=np.uint64)
            mixed = _splitmix64(keys ^ _U64(derive_seed(seed, "split_stream")))
            threshold = _U64(int(eval_fraction * 2**64))
            eval_mask = mixed < threshold
            eval_keys = keys[eval_mask].astype(np.int64)
            train_keys = keys[~eval_mask].astype(np.int64)
        else:
            raise StorageError(f"unknown split scheme {scheme!r}")
        return np.sort(train_keys).astype(np.uint64), np.sort(eval_keys).astype(np.uint64)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + _U64(0x9E3779B97F4A7C15)) & _MASK64
    x = ((x ^ (x >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)) & _MASK64
    x = ((x ^ (x >> _U64(27))) * _U64(0x94D049BB133111EB)) & _MASK64
    return x ^ (x >> _U64(31))
