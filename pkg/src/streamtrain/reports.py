"""Report emission and verification for pipeline runs.

A finished run produces four artifact kinds in its output directory:

* ``run.json``: full provenance (normalized config, trigger log, model
  records, composite series per metric/variant, costs).
* ``matrix_<metric>.csv``: the models x intervals evaluation matrix; masked
  cells (no eval data in the interval) stay empty.
* ``composite_<variant>.csv``: interval anchors, the mapped model index, and
  one composite-score column per metric.
* ``score.json``: pipeline scores per metric/variant plus cost measures.

All numbers are written with ``repr`` so reports are byte-stable across runs
with the same seed; wall-clock fields are the only nondeterministic values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluator import (
    EvaluationMatrix,
    EvaluatorError,
    build_matrix,
    composite_mapping,
    composite_series,
    first_defined_index,
    generate_intervals,
    pipeline_score,
)
from .loader import fetch_share_arrays, get_parser
from .supervisor import PipelineConfig, PipelineRun

COMPOSITE_VARIANTS = ("currently_active", "currently_trained")


class ReportError(Exception):
    pass


@dataclass
class RunEvaluation:
    intervals: list
    matrices: dict[str, EvaluationMatrix]
    mappings: dict[str, list]
    series: dict[str, dict[str, list]]
    scores: dict[str, dict[str, float | None]]


def evaluate_run(run: PipelineRun, store, config: PipelineConfig) -> RunEvaluation:
    """Score every model over the eval split and derive composite results."""
    if not run.models:
        raise ReportError("run produced no models to evaluate")
    parser = get_parser(config.bytes_parser)
    eval_keys = run.eval_keys
    features, labels = fetch_share_arrays(store, eval_keys, parser)
    timestamps = store.timestamps_for(eval_keys)
    order = np.argsort(timestamps, kind="stable")
    features, labels, timestamps = features[order], labels[order], timestamps[order]
    t0, t1 = int(timestamps.min()), int(timestamps.max()) + 1
    intervals = generate_intervals(config.interval_spec, t0, t1)
    models = [record.learner for record in run.models]
    ends = [record.t_end for record in run.models]
    matrices, series, scores = {}, {}, {}
    mappings = {
        variant: composite_mapping(ends, intervals, variant)
        for variant in COMPOSITE_VARIANTS
    }
    for metric in config.metrics:
        matrix = build_matrix(models, intervals, features, labels, timestamps, metric)
        matrices[metric.metric_id] = matrix
        series[metric.metric_id] = {}
        scores[metric.metric_id] = {}
        for variant in COMPOSITE_VARIANTS:
            lam = composite_series(matrix, mappings[variant])
            series[metric.metric_id][variant] = lam
            try:
                cutoff = None
                if config.skip_policy == "after_first_common_trigger":
                    cutoff = first_defined_index(lam)
                value = pipeline_score(lam, config.skip_policy, cutoff)
            except EvaluatorError:
                value = None
            scores[metric.metric_id][variant] = value
    return RunEvaluation(intervals, matrices, mappings, series, scores)


# ---------------------------------------------------------------------------
# writing


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def run_report_dict(run: PipelineRun, evaluation: RunEvaluation | None,
                    normalized_config: dict, include_wall_clock: bool = True) -> dict:
    doc = run.to_dict(include_wall_clock=include_wall_clock)
    doc["config"] = normalized_config
    doc["eval_context"] = {
        "dataset_id": normalized_config["data"]["dataset_id"],
        "split": normalized_config["data"]["split"],
        "intervals": normalized_config["evaluation"]["intervals"],
        "seed": normalized_config["seed"],
    }
    if evaluation is not None:
        doc["intervals"] = [
            {"start": iv.start, "anchor": iv.anchor, "end": iv.end}
            for iv in evaluation.intervals
        ]
        doc["series"] = evaluation.series
        doc["scores"] = evaluation.scores
        doc["composite_mappings"] = evaluation.mappings
    return doc


def write_reports(out_dir, run: PipelineRun, evaluation: RunEvaluation | None,
                  normalized_config: dict) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    run_doc = run_report_dict(run, evaluation, normalized_config)
    run_path = out_dir / "run.json"
    run_path.write_text(json.dumps(run_doc, indent=2, sort_keys=True))
    written.append(run_path)
    if evaluation is None:
        return written

    anchors = [iv.anchor for iv in evaluation.intervals]
    for metric_id, matrix in evaluation.matrices.items():
        path = out_dir / f"matrix_{metric_id}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["model_id"] + [f"anchor_{a}" for a in anchors])
            for i in range(matrix.shape[0]):
                row = [str(i)] + [
                    _fmt(float(matrix.scores[i, j]) if matrix.defined[i, j] else None)
                    for j in range(matrix.shape[1])
                ]
                writer.writerow(row)
        written.append(path)

    metric_ids = list(evaluation.matrices)
    for variant in COMPOSITE_VARIANTS:
        path = out_dir / f"composite_{variant}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["interval_index", "anchor", "model_index"]
                + [f"score_{m}" for m in metric_ids]
            )
            for j, anchor in enumerate(anchors):
                mapped = evaluation.mappings[variant][j]
                writer.writerow(
                    [str(j), str(anchor), "" if mapped is None else str(mapped)]
                    + [_fmt(evaluation.series[m][variant][j]) for m in metric_ids]
                )
        written.append(path)

    score_doc = {
        "pipeline_id": run.pipeline_id,
        "skip_policy": normalized_config["evaluation"]["skip_policy"],
        "scores": evaluation.scores,
        "costs": {
            "num_triggers": run.num_triggers,
            "samples_trained": run.samples_trained,
            "wall_clock_seconds": run.wall_clock_seconds,
        },
    }
    score_path = out_dir / "score.json"
    score_path.write_text(json.dumps(score_doc, indent=2, sort_keys=True))
    written.append(score_path)
    return written


# ---------------------------------------------------------------------------
# checking


def _check_csv(path: Path, problems: list[str]) -> None:
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as exc:
        problems.append(f"{path.name}: unreadable ({exc})")
        return
    if not rows:
        problems.append(f"{path.name}: empty file")
        return
    width = len(rows[0])
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            problems.append(f"{path.name}: row {i} has {len(row)} cells, header has {width}")
        for cell in row[1:]:
            if cell == "":
                continue
            try:
                float(cell)
            except ValueError:
                problems.append(f"{path.name}: row {i} holds non-numeric cell {cell!r}")
                break


def check_report_dir(out_dir) -> list[str]:
    """Schema round-trip over every report file; returns found problems."""
    out_dir = Path(out_dir)
    problems: list[str] = []
    run_path = out_dir / "run.json"
    if not run_path.exists():
        return [f"{run_path} does not exist"]
    try:
        doc = json.loads(run_path.read_text())
    except json.JSONDecodeError as exc:
        return [f"run.json: invalid JSON ({exc})"]
    for key in ("pipeline_id", "seed", "status", "costs", "triggers", "models",
                "config", "eval_context"):
        if key not in doc:
            problems.append(f"run.json: missing key {key!r}")
    if doc.get("status") == "ok":
        if "series" not in doc:
            problems.append("run.json: finished run lacks composite series")
        n_models = len(doc.get("models", []))
        for path in sorted(out_dir.glob("matrix_*.csv")):
            _check_csv(path, problems)
            with open(path, newline="") as f:
                rows = list(csv.reader(f))
            if len(rows) - 1 != n_models:
                problems.append(
                    f"{path.name}: {len(rows) - 1} data rows but run has {n_models} models"
                )
        if not list(out_dir.glob("matrix_*.csv")):
            problems.append("no matrix_<metric>.csv files found")
        for variant in COMPOSITE_VARIANTS:
            path = out_dir / f"composite_{variant}.csv"
            if not path.exists():
                problems.append(f"{path.name}: missing")
            else:
                _check_csv(path, problems)
        score_path = out_dir / "score.json"
        if not score_path.exists():
            problems.append("score.json: missing")
        else:
            try:
                score_doc = json.loads(score_path.read_text())
                for key in ("pipeline_id", "scores", "costs"):
                    if key not in score_doc:
                        problems.append(f"score.json: missing key {key!r}")
            except json.JSONDecodeError as exc:
                problems.append(f"score.json: invalid JSON ({exc})")
    return problems


def load_run_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "run.json"
    doc = json.loads(path.read_text())
    for key in ("pipeline_id", "eval_context", "series", "costs"):
        if key not in doc:
            raise ReportError(f"{path}: not a finished run report (missing {key!r})")
    return doc


def write_feasible_set(out_path, points) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["pipeline_id", "score", "cost", "pareto_optimal"])
        for p in points:
            writer.writerow([p.pipeline_id, repr(p.score), repr(p.cost),
                             "true" if p.pareto_optimal else "false"])
    return out_path
