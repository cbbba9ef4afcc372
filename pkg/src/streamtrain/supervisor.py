"""Pipeline execution: replay the stream, fire triggers, train, store, log.

Triggering decisions keep per-sample semantics even though the stream is
replayed in batches: every policy is a state machine consuming one sample at
a time, so trigger positions never depend on the replay batch size. On each
trigger the supervisor closes the selector window at the triggering sample
(inclusive), trains on the resulting trigger training set (finetuning from
the previous model or from a fresh zero initialization), persists the model,
and resumes the batch with the updated model in context.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .drift import DriftConfig, DriftDetector, embed
from .evaluator import IntervalSpec, Metric
from .loader import fetch_share_arrays, get_parser
from .model_store import ModelStore
from .seeding import derive_seed
from .selector import SelectionConfig, Selector
from .storage import SampleStore, StreamBatch
from .trainer import (
    DownsamplingConfig,
    ReferenceLearner,
    TrainingConfig,
    train_on_trigger,
)


class SupervisorError(Exception):
    pass


# ---------------------------------------------------------------------------
# trigger policies


@dataclass(frozen=True)
class AmountPolicy:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise SupervisorError("amount trigger needs n >= 1")


@dataclass(frozen=True)
class TimePolicy:
    interval_seconds: int

    def __post_init__(self):
        if self.interval_seconds <= 0:
            raise SupervisorError("time trigger needs a positive interval")


@dataclass(frozen=True)
class PerformancePolicy:
    metric: str = "accuracy"
    threshold: float = 0.8
    window_size: int = 250
    warmup_samples: int = 0
    min_interval_seconds: int = 0

    def __post_init__(self):
        if self.metric != "accuracy":
            raise SupervisorError("performance trigger supports the accuracy metric")
        if not 0.0 < self.threshold < 1.0:
            raise SupervisorError("performance threshold must be in (0, 1)")


@dataclass(frozen=True)
class DriftPolicy:
    drift: DriftConfig = field(default_factory=DriftConfig)
    warmup_samples: int = 0
    warmup_interval_seconds: int = 0  # trigger cadence while warming up


TriggerPolicy = AmountPolicy | TimePolicy | PerformancePolicy | DriftPolicy


@dataclass
class SupervisorContext:
    latest_model: ReferenceLearner | None = None


class _AmountState:
    needs_features = False
    cause = "amount"

    def __init__(self, policy: AmountPolicy):
        self.n = policy.n
        self.count = 0

    def observe(self, key, ts, label, feature_row, ctx) -> int:
        self.count += 1
        return 1 if self.count % self.n == 0 else 0

    def on_trigger(self, ts, ctx) -> None:
        pass


class _TimeState:
    needs_features = False
    cause = "time"

    def __init__(self, policy: TimePolicy):
        self.interval = policy.interval_seconds
        self.last_trigger_time: int | None = None

    def observe(self, key, ts, label, feature_row, ctx) -> int:
        if self.last_trigger_time is None:
            self.last_trigger_time = ts
        fires = 0
        # multi-interval gaps emit one trigger point per passed boundary
        while ts >= self.last_trigger_time + self.interval:
            fires += 1
            self.last_trigger_time += self.interval
        return fires

    def on_trigger(self, ts, ctx) -> None:
        pass


class _PerformanceState:
    needs_features = True
    cause = "performance"

    def __init__(self, policy: PerformancePolicy):
        self.policy = policy
        self.window: deque = deque(maxlen=policy.window_size)
        self.global_count = 0
        self.last_trigger_time: int | None = None

    def observe(self, key, ts, label, feature_row, ctx) -> int:
        self.global_count += 1
        model = ctx.latest_model
        if model is not None and label >= 0:
            predicted = int(np.argmax(model.logits(feature_row[None, :])[0]))
            self.window.append(1.0 if predicted == label else 0.0)
        if self.global_count <= self.policy.warmup_samples:
            return 0
        if (
            self.last_trigger_time is not None
            and ts < self.last_trigger_time + self.policy.min_interval_seconds
        ):
            return 0
        if model is None:
            return 1  # no deployed model yet: bootstrap one
        if len(self.window) == self.policy.window_size:
            if float(np.mean(self.window)) < self.policy.threshold:
                return 1
        return 0

    def on_trigger(self, ts, ctx) -> None:
        self.last_trigger_time = ts
        self.window.clear()  # rolling accuracy restarts for the new model


class _DriftState:
    needs_features = True

    def __init__(self, policy: DriftPolicy):
        self.policy = policy
        self.detector = DriftDetector(policy.drift)
        self.global_count = 0
        self.last_warmup_trigger_time: int | None = None
        self.cause = "drift"

    def observe(self, key, ts, label, feature_row, ctx) -> int:
        self.global_count += 1
        if self.policy.drift.embedding == "raw_features":
            embedded = feature_row
        else:
            embedded = embed(ctx.latest_model, feature_row[None, :])[0]
        _, fired = self.detector.observe(embedded, ts)
        if self.global_count <= self.policy.warmup_samples:
            # during warmup scores accumulate but triggers follow a time cadence
            self.cause = "drift_warmup"
            if self.policy.warmup_interval_seconds <= 0:
                return 0
            if self.last_warmup_trigger_time is None:
                self.last_warmup_trigger_time = ts
            if ts >= self.last_warmup_trigger_time + self.policy.warmup_interval_seconds:
                self.last_warmup_trigger_time = ts
                return 1
            return 0
        self.cause = "drift"
        return 1 if fired else 0

    def on_trigger(self, ts, ctx) -> None:
        self.detector.snapshot_reference()


def build_policy_state(policy: TriggerPolicy):
    if isinstance(policy, AmountPolicy):
        return _AmountState(policy)
    if isinstance(policy, TimePolicy):
        return _TimeState(policy)
    if isinstance(policy, PerformancePolicy):
        return _PerformanceState(policy)
    if isinstance(policy, DriftPolicy):
        return _DriftState(policy)
    raise SupervisorError(f"unknown trigger policy {policy!r}")


def evaluate_trigger_policy(
    state, batch: StreamBatch, ctx: SupervisorContext, features: np.ndarray | None = None
) -> list[int]:
    """Batch-local indices of triggering samples, in per-sample order.

    A sample can appear more than once when a time policy crosses several
    interval boundaries at once.
    """
    out: list[int] = []
    for i, (key, ts, label) in enumerate(batch.rows()):
        row = features[i] if features is not None else None
        fires = state.observe(key, ts, label, row, ctx)
        out.extend([i] * fires)
    return out


# ---------------------------------------------------------------------------
# pipeline configuration and execution


@dataclass(frozen=True)
class PipelineConfig:
    pipeline_id: str
    feature_dim: int
    num_classes: int
    dataset_id: str
    bytes_parser: str = "float32_vector"
    eval_fraction: float = 0.25
    split_scheme: str = "every_kth"
    replay_batch_size: int = 256
    trigger: TriggerPolicy = field(default_factory=lambda: AmountPolicy(1000))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    downsampling: DownsamplingConfig = field(default_factory=DownsamplingConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    model_full_every: int = 1
    model_delta_operator: str = "xor"
    interval_spec: IntervalSpec = field(default_factory=lambda: IntervalSpec("tumbling", 86400))
    metrics: tuple[Metric, ...] = (Metric("accuracy"),)
    skip_policy: str = "skip_gaps"
    seed: int = 0


@dataclass
class ModelRecord:
    model_id: int
    trigger_id: int
    t_start: int
    t_end: int
    learner: ReferenceLearner


@dataclass
class TriggerLogEntry:
    trigger_index: int
    cause: str
    global_sample_index: int
    sample_key: int
    timestamp: int
    window_size: int
    selected_count: int
    num_partitions: int
    epochs: int
    samples_trained: int
    t_start: int
    t_end: int
    model_id: int
    wall_time_seconds: float


@dataclass
class PipelineRun:
    pipeline_id: str
    seed: int
    models: list[ModelRecord] = field(default_factory=list)
    triggers: list[TriggerLogEntry] = field(default_factory=list)
    train_keys: np.ndarray | None = None
    eval_keys: np.ndarray | None = None
    wall_clock_seconds: float = 0.0
    status: str = "ok"

    @property
    def num_triggers(self) -> int:
        return len(self.models)

    @property
    def samples_trained(self) -> int:
        return sum(t.samples_trained for t in self.triggers)

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        out = {
            "pipeline_id": self.pipeline_id,
            "seed": self.seed,
            "status": self.status,
            "costs": {
                "num_triggers": self.num_triggers,
                "samples_trained": self.samples_trained,
            },
            "triggers": [
                {
                    "trigger_index": t.trigger_index,
                    "cause": t.cause,
                    "global_sample_index": t.global_sample_index,
                    "sample_key": t.sample_key,
                    "timestamp": t.timestamp,
                    "window_size": t.window_size,
                    "selected_count": t.selected_count,
                    "num_partitions": t.num_partitions,
                    "epochs": t.epochs,
                    "samples_trained": t.samples_trained,
                    "t_start": t.t_start,
                    "t_end": t.t_end,
                    "model_id": t.model_id,
                }
                for t in self.triggers
            ],
            "models": [
                {
                    "model_id": m.model_id,
                    "trigger_id": m.trigger_id,
                    "t_start": m.t_start,
                    "t_end": m.t_end,
                }
                for m in self.models
            ],
        }
        if include_wall_clock:
            out["costs"]["wall_clock_seconds"] = self.wall_clock_seconds
            for entry, t in zip(out["triggers"], self.triggers):
                entry["wall_time_seconds"] = t.wall_time_seconds
        return out


def pipeline_cost(run: PipelineRun, kind: str) -> float:
    if kind == "num_triggers":
        return float(run.num_triggers)
    if kind == "samples_trained":
        return float(run.samples_trained)
    if kind == "wall_clock_seconds":
        return run.wall_clock_seconds
    raise SupervisorError(f"unknown cost kind {kind!r}")


def run_pipeline(
    config: PipelineConfig, store: SampleStore, out_dir, mode: str = "experiment"
) -> PipelineRun:
    """Execute one pipeline over the replayed train split (experiment mode)."""
    if mode != "experiment":
        raise SupervisorError("only experiment mode is supported")
    if store.dataset_id != config.dataset_id:
        raise SupervisorError(
            f"config expects dataset {config.dataset_id!r}, store has {store.dataset_id!r}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    train_keys, eval_keys = store.split_stream(
        config.eval_fraction, config.split_scheme, seed=derive_seed(config.seed, "split")
    )
    train_mask = np.zeros(len(store), dtype=bool)
    train_mask[train_keys.astype(np.int64)] = True

    selection = SelectionConfig(
        tail_triggers=config.selection.tail_triggers,
        presampling=config.selection.presampling,
        presampling_ratio=config.selection.presampling_ratio,
        warmup_triggers=config.selection.warmup_triggers,
        partition_size=config.selection.partition_size,
        writer_threads=config.selection.writer_threads,
        backend=config.selection.backend,
        seed=derive_seed(config.seed, "selector"),
    )
    selector = Selector(selection, out_dir / "trigger_sets")
    model_store = ModelStore(
        out_dir / "models", config.model_full_every, config.model_delta_operator
    )
    parser = get_parser(config.bytes_parser)
    state = build_policy_state(config.trigger)
    ctx = SupervisorContext()
    run = PipelineRun(config.pipeline_id, config.seed, train_keys=train_keys, eval_keys=eval_keys)
    global_index = 0

    def handle_trigger(cause: str, sample_index: int, key: int, ts: int) -> None:
        trigger_started = time.perf_counter()
        trigger_id = selector.trigger_count
        try:
            tts = selector.inform_trigger()
        except Exception as exc:
            raise SupervisorError(f"trigger {trigger_id} at sample {sample_index}: {exc}") from exc
        window_min, _, window_size = selector.last_window_bounds
        if config.training.use_previous_model and ctx.latest_model is not None:
            learner = ctx.latest_model.copy()
        else:
            learner = ReferenceLearner.zeros(config.feature_dim, config.num_classes)
        try:
            result = train_on_trigger(
                learner, tts, store, config.training, config.downsampling, parser,
                seed=derive_seed(config.seed, f"trainer:{trigger_id}"),
                time_bounds=(window_min, ts),
            )
        except Exception as exc:
            raise SupervisorError(f"trigger {trigger_id} at sample {sample_index}: {exc}") from exc
        artifact = model_store.store(result.learner.pack())
        record = ModelRecord(artifact.model_id, trigger_id, result.t_start, result.t_end,
                             result.learner.copy())
        run.models.append(record)
        run.triggers.append(
            TriggerLogEntry(
                trigger_index=trigger_id,
                cause=cause,
                global_sample_index=sample_index,
                sample_key=key,
                timestamp=ts,
                window_size=window_size,
                selected_count=tts.total_count,
                num_partitions=tts.num_partitions,
                epochs=config.training.epochs_per_trigger,
                samples_trained=result.total_visits,
                t_start=result.t_start,
                t_end=result.t_end,
                model_id=artifact.model_id,
                wall_time_seconds=time.perf_counter() - trigger_started,
            )
        )
        ctx.latest_model = result.learner
        state.on_trigger(ts, ctx)

    for batch in store.replay(config.replay_batch_size):
        keep = train_mask[batch.keys.astype(np.int64)]
        if not keep.any():
            continue
        keys = batch.keys[keep]
        timestamps = batch.timestamps[keep]
        labels = batch.labels[keep]
        features = None
        if state.needs_features:
            features, _ = fetch_share_arrays(store, keys, parser)
        pending_start = 0
        for i in range(len(keys)):
            row = features[i] if features is not None else None
            fires = state.observe(int(keys[i]), int(timestamps[i]), int(labels[i]), row, ctx)
            if fires >= 1:
                selector.inform_samples(
                    keys[pending_start : i + 1],
                    timestamps[pending_start : i + 1],
                    labels[pending_start : i + 1],
                )
                pending_start = i + 1
                # several boundary crossings at one sample train once
                handle_trigger(state.cause, global_index + i, int(keys[i]), int(timestamps[i]))
        if pending_start < len(keys):
            selector.inform_samples(
                keys[pending_start:], timestamps[pending_start:], labels[pending_start:]
            )
        global_index += len(keys)

    run.wall_clock_seconds = time.perf_counter() - started
    if not run.models:
        run.status = "no_triggers"
    return run
