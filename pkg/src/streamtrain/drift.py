"""Embedding-space drift detection over reference/current stream windows.

Drift scores are squared maximum mean discrepancy (MMD) values between the
embeddings of a reference window (snapshot of the current window at the last
trigger) and the sliding current window. The estimator is the biased
V-statistic with a Gaussian RBF kernel,

    MMD^2 = mean(k(X, X)) + mean(k(Y, Y)) - 2 mean(k(X, Y)),

clamped at zero, so identical windows score exactly 0. Kernel means are
accumulated with ``math.fsum``, which makes scores exactly invariant to row
permutations. Scores turn into trigger decisions either by a fixed threshold
or by a percentile rule over a bounded history of recent scores.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for


class DriftError(Exception):
    pass


@dataclass(frozen=True)
class ThresholdDecision:
    threshold: float


@dataclass(frozen=True)
class PercentileDecision:
    """Trigger when a score is an outlier among recently observed scores."""

    history_len: int = 15
    percentile: float = 0.05


@dataclass(frozen=True)
class DriftConfig:
    detection_interval: int = 250  # samples between drift evaluations
    window_size: int = 500
    window_unit: str = "samples"  # samples | seconds
    kernel_bandwidth: float | str = "median_heuristic"
    decision: ThresholdDecision | PercentileDecision = field(
        default_factory=PercentileDecision
    )
    use_pca: bool = False
    pca_dims: int = 2
    # model_logits embeds through the latest model (images/text stand-in);
    # raw_features scores the feature vectors directly (tabular data)
    embedding: str = "model_logits"

    def __post_init__(self):
        if self.detection_interval < 1:
            raise DriftError("detection_interval must be >= 1")
        if self.window_size < 2:
            raise DriftError("window_size must be >= 2")
        if self.window_unit not in ("samples", "seconds"):
            raise DriftError(f"unknown window_unit {self.window_unit!r}")
        if self.embedding not in ("model_logits", "raw_features"):
            raise DriftError(f"unknown embedding space {self.embedding!r}")


def embed(model, features: np.ndarray) -> np.ndarray:
    """Latent representation used for drift scoring: the model's logits.

    Before any model has been trained the raw features pass through.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if model is None:
        return features
    return model.logits(features)


def pca_fit_project(X: np.ndarray, dims: int) -> np.ndarray:
    """Center X and project onto the top eigenvectors of its covariance.

    Eigenpairs come from an iterated power method with deflation (tolerance
    1e-10, at most 10^4 iterations per component). Component signs are fixed
    so each vector's largest-magnitude coordinate is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DriftError("pca needs a 2-D matrix with at least 2 rows")
    n, d = X.shape
    if dims > d:
        raise DriftError(f"dims {dims} exceeds feature dimension {d}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    scale = max(float(np.trace(cov)), 1.0)
    components = np.zeros((dims, d))
    for c in range(dims):
        v = rng_for(0, f"pca_init:{c}").normal(size=d)
        v /= np.linalg.norm(v)
        eigenvalue = 0.0
        for _ in range(10_000):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-14 * scale:
                eigenvalue = 0.0
                break
            w /= norm
            done = np.linalg.norm(w - np.sign(w @ v) * v) < 1e-10
            v = w
            eigenvalue = norm
            if done:
                break
        if eigenvalue <= 1e-10 * scale:
            raise DriftError(f"matrix rank {c} is below requested dims {dims}")
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0:
            v = -v
        components[c] = v
        cov = cov - eigenvalue * np.outer(v, v)
    return centered @ components.T


def _pairwise_sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    aa = (A * A).sum(axis=1)[:, None]
    bb = (B * B).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (A @ B.T), 0.0)


def median_heuristic_bandwidth(X: np.ndarray, Y: np.ndarray) -> float:
    """Median pairwise distance over the pooled windows; 1.0 if degenerate."""
    pooled = np.vstack([X, Y])
    sq = _pairwise_sq_dists(pooled, pooled)
    upper = np.sqrt(sq[np.triu_indices(len(pooled), k=1)])
    h = float(np.median(upper))
    return h if h > 0 else 1.0


def mmd2(X: np.ndarray, Y: np.ndarray, bandwidth: float | str = "median_heuristic") -> float:
    """Biased V-statistic MMD^2 between two windows, >= 0."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if len(X) < 2 or len(Y) < 2:
        raise DriftError("windows need at least 2 rows each")
    if X.shape[1] != Y.shape[1]:
        raise DriftError("window dimensionality mismatch")
    if bandwidth == "median_heuristic":
        h = median_heuristic_bandwidth(X, Y)
    else:
        h = float(bandwidth)
        if h <= 0:
            raise DriftError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * h * h)
    k_xx = np.exp(-gamma * _pairwise_sq_dists(X, X))
    k_yy = np.exp(-gamma * _pairwise_sq_dists(Y, Y))
    k_xy = np.exp(-gamma * _pairwise_sq_dists(X, Y))
    mean_xx = math.fsum(k_xx.ravel().tolist()) / k_xx.size
    mean_yy = math.fsum(k_yy.ravel().tolist()) / k_yy.size
    mean_xy = math.fsum(k_xy.ravel().tolist()) / k_xy.size
    return max(mean_xx + mean_yy - 2.0 * mean_xy, 0.0)


def decide(
    history: deque, new_score: float, decision: ThresholdDecision | PercentileDecision
) -> bool:
    """Binary trigger decision; percentile histories are updated in place.

    The percentile rule fires only once the history is full, when the new
    score strictly exceeds the value at index ceil((1 - p) * (n - 1)) of the
    ascending-sorted history; the score is recorded after the decision.
    """
    if isinstance(decision, ThresholdDecision):
        return new_score > decision.threshold
    fired = False
    n = len(history)
    if n >= decision.history_len:
        ordered = sorted(history)
        idx = math.ceil((1.0 - decision.percentile) * (n - 1))
        fired = new_score > ordered[idx]
    history.append(new_score)
    return fired


class StreamWindow:
    """Bounded window of embedding rows, by sample count or time span."""

    def __init__(self, size: int, unit: str = "samples"):
        self.size = size
        self.unit = unit
        self._rows: deque = deque()
        self._ts: deque = deque()

    def __len__(self) -> int:
        return len(self._rows)

    def push(self, row: np.ndarray, timestamp: int) -> None:
        self._rows.append(np.asarray(row, dtype=np.float64))
        self._ts.append(int(timestamp))
        if self.unit == "samples":
            while len(self._rows) > self.size:
                self._rows.popleft()
                self._ts.popleft()
        else:
            while self._ts and self._ts[0] <= timestamp - self.size:
                self._rows.popleft()
                self._ts.popleft()

    @property
    def full(self) -> bool:
        if self.unit == "samples":
            return len(self._rows) >= self.size
        return len(self._rows) >= 2 and self._ts[-1] - self._ts[0] >= self.size - 1

    def array(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, 0))
        return np.stack(self._rows)


class DriftDetector:
    """Reference/current windows plus score history for one pipeline.

    ``observe`` feeds one embedded sample; every ``detection_interval``
    samples it computes a drift score (once a reference exists) and runs the
    decision policy. ``snapshot_reference`` freezes the current window as the
    new reference, which the caller invokes on every trigger.
    """

    def __init__(self, config: DriftConfig):
        self.config = config
        self.current = StreamWindow(config.window_size, config.window_unit)
        self.reference: np.ndarray | None = None
        history_len = (
            config.decision.history_len
            if isinstance(config.decision, PercentileDecision)
            else 1
        )
        self.score_history: deque = deque(maxlen=history_len)
        self.samples_since_eval = 0
        self.last_score: float | None = None
        self._dim: int | None = None

    def snapshot_reference(self) -> None:
        if len(self.current) >= 2:
            self.reference = self.current.array()

    def _score(self) -> float:
        ref, cur = self.reference, self.current.array()
        if self.config.use_pca:
            pooled = pca_fit_project(np.vstack([ref, cur]), self.config.pca_dims)
            ref, cur = pooled[: len(ref)], pooled[len(ref) :]
        return mmd2(ref, cur, self.config.kernel_bandwidth)

    def observe(self, embedded_row: np.ndarray, timestamp: int) -> tuple[bool, bool]:
        """Returns (evaluated, fired). Evaluation points sit at fixed stream
        positions (every ``detection_interval`` observed samples); points
        reached before a reference window exists are skipped."""
        embedded_row = np.asarray(embedded_row, dtype=np.float64)
        if self._dim is not None and embedded_row.shape[-1] != self._dim:
            # embedding space changed (first model appeared): restart windows
            self.current = StreamWindow(self.config.window_size, self.config.window_unit)
            self.reference = None
        self._dim = int(embedded_row.shape[-1])
        self.current.push(embedded_row, timestamp)
        if self.reference is None and self.current.full:
            # bootstrap: the first full window doubles as the initial reference
            self.snapshot_reference()
        self.samples_since_eval += 1
        if self.samples_since_eval < self.config.detection_interval:
            return False, False
        self.samples_since_eval = 0
        if self.reference is None or len(self.current) < 2:
            return False, False
        score = self._score()
        self.last_score = score
        fired = decide(self.score_history, score, self.config.decision)
        return True, fired
