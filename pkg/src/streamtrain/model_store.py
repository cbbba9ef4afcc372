"""Model snapshot storage with full and incremental (delta) artifacts.

Weights are serialized in the ``MDMW`` format: magic ``MDMW``, version
u32 LE, rank u32 LE, one u32 LE per dimension, then the values row-major as
IEEE-754 binary64 LE. Every k-th stored model is a full snapshot; the others
are deltas against the immediately preceding model using either a bitwise
xor of the 8-byte words or an arithmetic subtraction.

Subtraction deltas are not generally invertible in floating point
(``base + (a - base)`` may round), so the delta carries a 1-bit-per-word
correction mask plus the exact bit patterns of the words where re-adding the
difference would not reproduce the original; loads are therefore bit-exact
for both operators.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MDMW_MAGIC = b"MDMW"
MDMW_VERSION = 1

_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _crc64_table():
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        crc = _TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


class ModelStoreError(Exception):
    pass


class ChecksumError(ModelStoreError):
    pass


class BrokenChainError(ModelStoreError):
    pass


def serialize_weights(weights: np.ndarray) -> bytes:
    weights = np.ascontiguousarray(weights, dtype="<f8")
    header = MDMW_MAGIC + struct.pack("<II", MDMW_VERSION, weights.ndim)
    header += struct.pack(f"<{weights.ndim}I", *weights.shape)
    return header + weights.tobytes()


def deserialize_weights(data: bytes) -> np.ndarray:
    if data[:4] != MDMW_MAGIC:
        raise ModelStoreError(f"bad magic {data[:4]!r}")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != MDMW_VERSION:
        raise ModelStoreError(f"unsupported version {version}")
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    body_start = 12 + 4 * rank
    expected = int(np.prod(dims)) * 8
    body = data[body_start : body_start + expected]
    if len(body) != expected:
        raise ModelStoreError("truncated weight body")
    return np.frombuffer(body, dtype="<f8").reshape(dims).copy()


def _split_header(data: bytes) -> tuple[bytes, np.ndarray]:
    rank = struct.unpack_from("<I", data, 8)[0]
    body_start = 12 + 4 * rank
    words = np.frombuffer(data[body_start:], dtype="<u8")
    return data[:body_start], words


@dataclass(frozen=True)
class ModelArtifact:
    model_id: int
    kind: str  # full | delta
    base_id: int | None
    operator: str | None  # xor | subtract
    checksum: int
    filename: str


class ModelStore:
    """Append-only store; every ``full_every``-th model is a full snapshot."""

    MANIFEST = "models.json"

    def __init__(self, directory, full_every: int = 1, operator: str = "xor"):
        if full_every < 1:
            raise ModelStoreError("full_every must be >= 1")
        if operator not in ("xor", "subtract"):
            raise ModelStoreError(f"unknown delta operator {operator!r}")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.full_every = full_every
        self.operator = operator
        self.artifacts: list[ModelArtifact] = []
        self._last_serialized: bytes | None = None

    def _manifest_path(self) -> Path:
        return self.directory / self.MANIFEST

    def _save_manifest(self) -> None:
        records = [
            {
                "model_id": a.model_id,
                "kind": a.kind,
                "base_id": a.base_id,
                "operator": a.operator,
                "checksum": f"{a.checksum:016x}",
                "filename": a.filename,
            }
            for a in self.artifacts
        ]
        self._manifest_path().write_text(json.dumps(records, indent=2))

    @classmethod
    def open(cls, directory) -> "ModelStore":
        store = cls(directory)
        records = json.loads((Path(directory) / cls.MANIFEST).read_text())
        store.artifacts = [
            ModelArtifact(
                r["model_id"], r["kind"], r["base_id"], r["operator"],
                int(r["checksum"], 16), r["filename"],
            )
            for r in records
        ]
        return store

    def _delta_payload(self, serialized: bytes, base: bytes) -> bytes:
        header, words = _split_header(serialized)
        base_header, base_words = _split_header(base)
        if header != base_header:
            raise ModelStoreError("shape mismatch against base model")
        if self.operator == "xor":
            return header + (words ^ base_words).tobytes()
        new_vals = words.view("<f8")
        base_vals = base_words.view("<f8")
        # overflow/rounding here is fine: affected words land in the
        # correction mask and are restored from their exact bit patterns
        with np.errstate(over="ignore", invalid="ignore"):
            diff = new_vals - base_vals
            recon = base_vals + diff
        bad = recon.view("<u8") != words
        mask = np.packbits(bad.astype(np.uint8))
        corrections = words[bad]
        return (
            header
            + diff.astype("<f8").tobytes()
            + mask.tobytes()
            + corrections.tobytes()
        )

    def _apply_delta(self, payload: bytes, base: bytes, operator: str) -> bytes:
        base_header, base_words = _split_header(base)
        rank = struct.unpack_from("<I", payload, 8)[0]
        body_start = 12 + 4 * rank
        header = payload[:body_start]
        if header != base_header:
            raise ModelStoreError("shape mismatch while applying delta")
        n = len(base_words)
        body = np.frombuffer(payload[body_start : body_start + 8 * n], dtype="<u8")
        if operator == "xor":
            return header + (body ^ base_words).tobytes()
        mask_bytes = (n + 7) // 8
        mask_off = body_start + 8 * n
        bad = np.unpackbits(
            np.frombuffer(payload[mask_off : mask_off + mask_bytes], dtype=np.uint8)
        )[:n].astype(bool)
        corrections = np.frombuffer(payload[mask_off + mask_bytes :], dtype="<u8")
        with np.errstate(over="ignore", invalid="ignore"):
            recon = (base_words.view("<f8") + body.view("<f8")).view("<u8").copy()
        recon[bad] = corrections
        return header + recon.tobytes()

    def store(self, weights: np.ndarray) -> ModelArtifact:
        model_id = len(self.artifacts)
        serialized = serialize_weights(weights)
        if model_id % self.full_every == 0 or self._last_serialized is None:
            kind, base_id, operator = "full", None, None
            payload = serialized
        else:
            kind, base_id, operator = "delta", model_id - 1, self.operator
            payload = self._delta_payload(serialized, self._last_serialized)
        filename = f"model_{model_id}.{kind}"
        (self.directory / filename).write_bytes(payload)
        artifact = ModelArtifact(model_id, kind, base_id, operator, crc64(payload), filename)
        self.artifacts.append(artifact)
        self._last_serialized = serialized
        self._save_manifest()
        return artifact

    def _payload(self, artifact: ModelArtifact) -> bytes:
        path = self.directory / artifact.filename
        if not path.exists():
            raise BrokenChainError(f"missing artifact file {path}")
        payload = path.read_bytes()
        if crc64(payload) != artifact.checksum:
            raise ChecksumError(f"checksum mismatch for model {artifact.model_id}")
        return payload

    def load(self, model_id: int) -> np.ndarray:
        """Reconstruct a model bit-exactly from its delta chain."""
        if not 0 <= model_id < len(self.artifacts):
            raise ModelStoreError(f"unknown model id {model_id}")
        chain = []
        current = self.artifacts[model_id]
        while current.kind == "delta":
            chain.append(current)
            if current.base_id is None or current.base_id < 0:
                raise BrokenChainError(f"delta {current.model_id} has no base")
            current = self.artifacts[current.base_id]
        serialized = self._payload(current)
        for artifact in reversed(chain):
            serialized = self._apply_delta(self._payload(artifact), serialized, artifact.operator)
        return deserialize_weights(serialized)
