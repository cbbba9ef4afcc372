"""Declarative pipeline configuration: schema, validation, normalization.

Documents are YAML key/value trees. Parsing fills in every default and
returns both the structured pipeline configuration and a normalized document
(the fixed point of parse/dump). Validation is exhaustive: unknown keys are
rejected by path and all violations are reported together, not just the
first one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import yaml

from .drift import DriftConfig, PercentileDecision, ThresholdDecision
from .evaluator import IntervalSpec, Metric
from .loader import LoaderConfig, PARSERS
from .selector import SelectionConfig
from .supervisor import (
    AmountPolicy,
    DriftPolicy,
    PerformancePolicy,
    PipelineConfig,
    TimePolicy,
)
from .trainer import DownsamplingConfig, TrainingConfig


class ConfigError(Exception):
    """Carries every violation found in a document."""

    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))


_REQUIRED = object()


@dataclass(frozen=True)
class _Field:
    kind: str  # int | float | str | bool | int_or_null | float_or_str | metrics
    default: Any = _REQUIRED
    choices: tuple | None = None
    minimum: float | None = None
    exclusive_min: float | None = None
    maximum: float | None = None
    max_inclusive: bool = True


SCHEMA: dict = {
    "pipeline_id": _Field("str", default="pipeline"),
    "seed": _Field("int", default=0, minimum=0),
    "model": {
        "feature_dim": _Field("int", minimum=1),
        "num_classes": _Field("int", minimum=2),
    },
    "data": {
        "dataset_id": _Field("str"),
        "bytes_parser": _Field("str", default="float32_vector", choices=tuple(sorted(PARSERS))),
        "replay_batch_size": _Field("int", default=256, minimum=1),
        "split": {
            "eval_fraction": _Field("float", default=0.25, exclusive_min=0.0, maximum=1.0,
                                    max_inclusive=False),
            "scheme": _Field("str", default="every_kth", choices=("every_kth", "hash_modulo")),
        },
    },
    "trigger": {
        "id": _Field("str", choices=(
            "DataAmountTrigger", "TimeTrigger", "PerformanceTrigger", "DataDriftTrigger",
        )),
        "num_samples": _Field("int", default=0, minimum=0),
        "every_seconds": _Field("int", default=0, minimum=0),
        "performance": {
            "metric": _Field("str", default="accuracy", choices=("accuracy",)),
            "threshold": _Field("float", default=0.8, exclusive_min=0.0, maximum=1.0,
                                max_inclusive=False),
            "window_size": _Field("int", default=250, minimum=1),
            "warmup_samples": _Field("int", default=0, minimum=0),
            "min_interval_seconds": _Field("int", default=0, minimum=0),
        },
        "drift": {
            "detection_interval": _Field("int", default=250, minimum=1),
            "window_size": _Field("int", default=500, minimum=2),
            "window_unit": _Field("str", default="samples", choices=("samples", "seconds")),
            "kernel_bandwidth": _Field("float_or_str", default="median_heuristic"),
            "embedding": _Field("str", default="model_logits",
                                choices=("model_logits", "raw_features")),
            "use_pca": _Field("bool", default=False),
            "pca_dims": _Field("int", default=2, minimum=1),
            "warmup_samples": _Field("int", default=0, minimum=0),
            "warmup_interval_seconds": _Field("int", default=0, minimum=0),
            "decision": {
                "id": _Field("str", default="percentile", choices=("threshold", "percentile")),
                "threshold": _Field("float", default=0.05),
                "history_len": _Field("int", default=15, minimum=1),
                "percentile": _Field("float", default=0.05, exclusive_min=0.0, maximum=1.0,
                                     max_inclusive=False),
            },
        },
    },
    "training": {
        "batch_size": _Field("int", default=64, minimum=1),
        "epochs_per_trigger": _Field("int", default=1, minimum=1),
        "learning_rate": _Field("float", default=0.1, exclusive_min=0.0),
        "use_previous_model": _Field("bool", default=True),
        "shuffle": _Field("bool", default=False),
        "dataloader": {
            "num_workers": _Field("int", default=1, minimum=1),
            "prefetch_buffer_partitions": _Field("int", default=0, minimum=0),
            "parallel_prefetch_requests": _Field("int", default=1, minimum=1),
            "storage_threads": _Field("int", default=1, minimum=1),
        },
        "selection_strategy": {
            "tail_triggers": _Field("int_or_null", default=None, minimum=0),
            "presampling": _Field("str", default="none", choices=(
                "none", "uniform", "class_balanced", "trigger_balanced",
            )),
            "presampling_ratio": _Field("float", default=1.0, exclusive_min=0.0, maximum=1.0),
            "warmup_triggers": _Field("int", default=0, minimum=0),
            "partition_size": _Field("int", default=1000, minimum=1),
            "writer_threads": _Field("int", default=1, minimum=1),
            "storage_backend": _Field("str", default="memory", choices=("memory", "local")),
            "downsampling": {
                "policy": _Field("str", default="none", choices=(
                    "none", "loss", "grad_norm", "margin", "least_confidence",
                    "entropy", "rs2_with_replacement", "rs2_without_replacement",
                )),
                "ratio": _Field("float", default=1.0, exclusive_min=0.0, maximum=1.0),
                "mode": _Field("str", default="StB", choices=("StB", "BtS")),
                "stb_refresh_every_epochs": _Field("int", default=1, minimum=1),
            },
        },
    },
    "model_storage": {
        "full_model_strategy": {
            "full_every": _Field("int", default=1, minimum=1),
        },
        "incremental_model_strategy": {
            "operator": _Field("str", default="xor", choices=("xor", "subtract")),
        },
    },
    "evaluation": {
        "intervals": {
            "kind": _Field("str", default="tumbling", choices=("tumbling", "sliding")),
            "length_seconds": _Field("int", minimum=1),
            "stride_seconds": _Field("int_or_null", default=None, minimum=1),
            "anchor": _Field("str", default="start", choices=("start", "center")),
        },
        "metrics": _Field("metrics", default=["accuracy"]),
        "skip_policy": _Field("str", default="skip_gaps",
                              choices=("skip_gaps", "after_first_common_trigger")),
    },
}


def _check_scalar(field: _Field, value, path: str, errors: list[str]):
    kind = field.kind
    if kind == "int_or_null" and value is None:
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            errors.append(f"{path}: expected a boolean, got {value!r}")
        return value
    if kind in ("int", "int_or_null"):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return value
        value = float(value)
    if kind == "str" and not isinstance(value, str):
        errors.append(f"{path}: expected a string, got {value!r}")
        return value
    if kind == "float_or_str":
        if isinstance(value, str):
            if value != "median_heuristic":
                errors.append(f"{path}: expected a number or 'median_heuristic', got {value!r}")
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number or 'median_heuristic', got {value!r}")
            return value
        value = float(value)
        if value <= 0:
            errors.append(f"{path}: bandwidth must be positive, got {value}")
        return value
    if kind == "metrics":
        return _check_metrics(value, path, errors)
    if field.choices is not None and value not in field.choices:
        errors.append(f"{path}: {value!r} not one of {list(field.choices)}")
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if field.minimum is not None and value < field.minimum:
            errors.append(f"{path}: {value} below minimum {field.minimum}")
        if field.exclusive_min is not None and value <= field.exclusive_min:
            errors.append(f"{path}: {value} must be > {field.exclusive_min}")
        if field.maximum is not None:
            if field.max_inclusive and value > field.maximum:
                errors.append(f"{path}: {value} above maximum {field.maximum}")
            if not field.max_inclusive and value >= field.maximum:
                errors.append(f"{path}: {value} must be < {field.maximum}")
    return value


def _check_metrics(value, path: str, errors: list[str]):
    if not isinstance(value, list) or not value:
        errors.append(f"{path}: expected a non-empty list of metrics")
        return ["accuracy"]
    normalized = []
    for i, item in enumerate(value):
        if isinstance(item, str):
            if item not in ("accuracy", "weighted_f1"):
                errors.append(f"{path}[{i}]: {item!r} is not a known metric name")
            normalized.append(item)
        elif isinstance(item, dict):
            unknown = set(item) - {"name", "k"}
            if unknown:
                errors.append(f"{path}[{i}]: unknown metric keys {sorted(unknown)}")
            name = item.get("name")
            if name != "top_k_accuracy":
                errors.append(f"{path}[{i}]: only top_k_accuracy takes parameters")
            k = item.get("k")
            if not isinstance(k, int) or isinstance(k, bool) or k < 1:
                errors.append(f"{path}[{i}]: top_k_accuracy needs integer k >= 1")
            normalized.append({"name": "top_k_accuracy", "k": k})
        else:
            errors.append(f"{path}[{i}]: expected a metric name or mapping")
    return normalized


def _walk(doc: dict, schema: dict, path: str, errors: list[str]) -> dict:
    out: dict = {}
    if not isinstance(doc, dict):
        errors.append(f"{path or '<root>'}: expected a mapping, got {doc!r}")
        doc = {}
    for key in doc:
        if key not in schema:
            errors.append(f"{_join(path, key)}: unknown key")
    for key, spec in schema.items():
        sub_path = _join(path, key)
        if isinstance(spec, dict):
            out[key] = _walk(doc.get(key, {}), spec, sub_path, errors)
        else:
            if key in doc:
                out[key] = _check_scalar(spec, doc[key], sub_path, errors)
            elif spec.default is _REQUIRED:
                errors.append(f"{sub_path}: required key is missing")
                out[key] = None
            else:
                out[key] = spec.default
    return out


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _cross_checks(doc: dict, errors: list[str]) -> None:
    trigger = doc["trigger"]
    if trigger["id"] == "DataAmountTrigger" and trigger["num_samples"] < 1:
        errors.append("trigger.num_samples: DataAmountTrigger needs num_samples >= 1")
    if trigger["id"] == "TimeTrigger" and trigger["every_seconds"] < 1:
        errors.append("trigger.every_seconds: TimeTrigger needs every_seconds >= 1")
    intervals = doc["evaluation"]["intervals"]
    if intervals["kind"] == "sliding" and intervals["stride_seconds"] is None:
        errors.append("evaluation.intervals.stride_seconds: required for sliding windows")
    down = doc["training"]["selection_strategy"]["downsampling"]
    if down["policy"].startswith("rs2") and down["mode"] != "StB":
        errors.append("training.selection_strategy.downsampling.mode: rs2 policies are StB-only")
    model = doc["model"]
    for item in doc["evaluation"]["metrics"]:
        if isinstance(item, dict) and isinstance(model.get("num_classes"), int):
            if isinstance(item.get("k"), int) and item["k"] > model["num_classes"]:
                errors.append(
                    f"evaluation.metrics: top_k_accuracy k={item['k']} exceeds "
                    f"model.num_classes={model['num_classes']}"
                )


def parse_config(document: str | dict) -> tuple[PipelineConfig, dict]:
    """Validate a document and return (pipeline config, normalized tree)."""
    if isinstance(document, str):
        try:
            doc = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise ConfigError([f"document is not valid YAML: {exc}"]) from None
    else:
        doc = document
    if doc is None:
        doc = {}
    errors: list[str] = []
    normalized = _walk(doc, SCHEMA, "", errors)
    if not errors:
        _cross_checks(normalized, errors)
    if errors:
        raise ConfigError(errors)
    return _build(normalized), normalized


def dump_config(normalized: dict) -> str:
    return yaml.safe_dump(normalized, sort_keys=True)


def _build_trigger(doc: dict):
    trigger = doc["trigger"]
    if trigger["id"] == "DataAmountTrigger":
        return AmountPolicy(trigger["num_samples"])
    if trigger["id"] == "TimeTrigger":
        return TimePolicy(trigger["every_seconds"])
    if trigger["id"] == "PerformanceTrigger":
        p = trigger["performance"]
        return PerformancePolicy(
            metric=p["metric"],
            threshold=p["threshold"],
            window_size=p["window_size"],
            warmup_samples=p["warmup_samples"],
            min_interval_seconds=p["min_interval_seconds"],
        )
    d = trigger["drift"]
    if d["decision"]["id"] == "threshold":
        decision = ThresholdDecision(d["decision"]["threshold"])
    else:
        decision = PercentileDecision(d["decision"]["history_len"], d["decision"]["percentile"])
    return DriftPolicy(
        drift=DriftConfig(
            detection_interval=d["detection_interval"],
            window_size=d["window_size"],
            window_unit=d["window_unit"],
            kernel_bandwidth=d["kernel_bandwidth"],
            decision=decision,
            use_pca=d["use_pca"],
            pca_dims=d["pca_dims"],
            embedding=d["embedding"],
        ),
        warmup_samples=d["warmup_samples"],
        warmup_interval_seconds=d["warmup_interval_seconds"],
    )


def _build(doc: dict) -> PipelineConfig:
    training = doc["training"]
    strategy = training["selection_strategy"]
    down = strategy["downsampling"]
    loader = training["dataloader"]
    intervals = doc["evaluation"]["intervals"]
    metrics = []
    for item in doc["evaluation"]["metrics"]:
        if isinstance(item, str):
            metrics.append(Metric(item))
        else:
            metrics.append(Metric("top_k_accuracy", k=item["k"]))
    return PipelineConfig(
        pipeline_id=doc["pipeline_id"],
        feature_dim=doc["model"]["feature_dim"],
        num_classes=doc["model"]["num_classes"],
        dataset_id=doc["data"]["dataset_id"],
        bytes_parser=doc["data"]["bytes_parser"],
        eval_fraction=doc["data"]["split"]["eval_fraction"],
        split_scheme=doc["data"]["split"]["scheme"],
        replay_batch_size=doc["data"]["replay_batch_size"],
        trigger=_build_trigger(doc),
        training=TrainingConfig(
            batch_size=training["batch_size"],
            epochs_per_trigger=training["epochs_per_trigger"],
            learning_rate=training["learning_rate"],
            use_previous_model=training["use_previous_model"],
            shuffle=training["shuffle"],
            loader=LoaderConfig(
                num_workers=loader["num_workers"],
                prefetch_buffer_partitions=loader["prefetch_buffer_partitions"],
                parallel_prefetch_requests=loader["parallel_prefetch_requests"],
                storage_threads=loader["storage_threads"],
            ),
        ),
        downsampling=DownsamplingConfig(
            policy=down["policy"],
            ratio=down["ratio"],
            mode=down["mode"],
            stb_refresh_every_epochs=down["stb_refresh_every_epochs"],
            seed=doc["seed"],
        ),
        selection=SelectionConfig(
            tail_triggers=strategy["tail_triggers"],
            presampling=strategy["presampling"],
            presampling_ratio=strategy["presampling_ratio"],
            warmup_triggers=strategy["warmup_triggers"],
            partition_size=strategy["partition_size"],
            writer_threads=strategy["writer_threads"],
            backend=strategy["storage_backend"],
            seed=doc["seed"],
        ),
        model_full_every=doc["model_storage"]["full_model_strategy"]["full_every"],
        model_delta_operator=doc["model_storage"]["incremental_model_strategy"]["operator"],
        interval_spec=IntervalSpec(
            kind=intervals["kind"],
            length=intervals["length_seconds"],
            stride=intervals["stride_seconds"],
            anchor=intervals["anchor"],
        ),
        metrics=tuple(metrics),
        skip_policy=doc["evaluation"]["skip_policy"],
        seed=doc["seed"],
    )
