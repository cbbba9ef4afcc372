import numpy as np

from streamtrain.selector import TriggerTrainingSet
from streamtrain.storage import FileRecordSpec, SampleStore, write_mdsf


def feature_payloads(X: np.ndarray) -> np.ndarray:
    """Rows of float32 feature vectors as a uint8 payload matrix."""
    X32 = np.ascontiguousarray(X, dtype="<f4")
    return X32.view(np.uint8).reshape(len(X), X.shape[1] * 4)


def build_feature_store(directory, X, labels, timestamps, files=1, dataset_id="synthetic"):
    """Write float32 feature vectors into MDSF files and register them."""
    directory.mkdir(parents=True, exist_ok=True)
    store = SampleStore.create(directory / "store", dataset_id=dataset_id)
    payloads = feature_payloads(np.asarray(X))
    labels = np.asarray(labels, dtype=np.int64)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    record_bytes = 8 + payloads.shape[1]
    bounds = np.linspace(0, len(labels), files + 1).astype(int)
    keys = []
    for i in range(files):
        lo, hi = bounds[i], bounds[i + 1]
        if lo == hi:
            continue
        path = directory / f"data_{i}.bin"
        write_mdsf(path, labels[lo:hi], payloads[lo:hi])
        keys.append(
            store.register_file(
                path,
                FileRecordSpec("binary_fixed_record", record_bytes=record_bytes),
                base_timestamp=0,
                per_sample_timestamps=timestamps[lo:hi],
            )
        )
    return store, np.concatenate(keys)


def build_tts(directory, keys, partition_size=1000, weights=None, trigger_id=0, writer_threads=1):
    keys = np.asarray(keys, dtype=np.uint64)
    if weights is None:
        weights = np.ones(len(keys))
    return TriggerTrainingSet.write(
        directory, trigger_id, keys, weights, partition_size, writer_threads
    )
