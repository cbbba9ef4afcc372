"""Per-trigger training: weighted SGD on a multinomial logistic learner.

The reference learner is a softmax classifier over feature vectors. Its
closed-form per-sample loss and last-layer gradient make every supported
downsampling score exact and auditable: loss, gradient norm, margin, least
confidence, entropy, and the two RS2 random-subset variants.

Downsampling runs in one of two modes. Batch-then-sample (BtS) scores each
incoming batch and keeps a subset, accumulating selected samples until a
full training batch is formed. Sample-then-batch (StB) first scores the
whole trigger training set in a forward pass, then trains on the selected
subset; the selection is refreshed every ``stb_refresh_every_epochs``.
Either way each epoch contributes exactly ``floor(ratio * N)``
gradient-visits, the per-epoch budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .loader import LoaderConfig, fetch_share_arrays, loader_stream
from .seeding import derive_seed, rng_for

SCORE_POLICIES = ("loss", "grad_norm", "margin", "least_confidence", "entropy")
RS2_POLICIES = ("rs2_with_replacement", "rs2_without_replacement")

# lower score = more valuable for these policies; the rest select high scores
LOW_FIRST = ("margin", "least_confidence")


class TrainerError(Exception):
    pass


class DivergedError(TrainerError):
    """Raised when a batch loss stops being finite (code: diverged)."""


@dataclass
class ReferenceLearner:
    """Multinomial logistic regression with explicit weight matrix and bias."""

    weights: np.ndarray  # (num_classes, feature_dim)
    bias: np.ndarray  # (num_classes,)

    @classmethod
    def zeros(cls, feature_dim: int, num_classes: int) -> "ReferenceLearner":
        return cls(np.zeros((num_classes, feature_dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ReferenceLearner":
        return ReferenceLearner(self.weights.copy(), self.bias.copy())

    def logits(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        if features.shape[1] != self.feature_dim:
            raise TrainerError(
                f"feature dim {features.shape[1]} != learner dim {self.feature_dim}"
            )
        return features @ self.weights.T + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        z = self.logits(features)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def loss_per_sample(self, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        z = self.logits(features)
        self._check_labels(labels)
        zmax = z.max(axis=1, keepdims=True)
        lse = (zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1)))
        return lse - z[np.arange(len(z)), labels]

    def _check_labels(self, labels: np.ndarray) -> None:
        labels = np.asarray(labels)
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            bad = labels[(labels < 0) | (labels >= self.num_classes)][0]
            raise TrainerError(f"label {bad} outside [0, {self.num_classes})")

    def weighted_update(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        sample_weights: np.ndarray,
        learning_rate: float,
    ) -> float:
        """One weighted gradient step; returns the mean weighted batch loss.

        The step is lr * sum_i(w_i * grad_i) / sum_i(w_i): weights multiply
        per-sample gradients and the total is normalized by the weight mass.
        """
        self._check_labels(labels)
        z = self.logits(features)
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        ez_sum = ez.sum(axis=1, keepdims=True)
        rows = np.arange(len(labels))
        losses = (zmax[:, 0] + np.log(ez_sum[:, 0])) - z[rows, labels]
        w = np.asarray(sample_weights, dtype=np.float64)
        total = w.sum()
        if total <= 0:
            raise TrainerError("batch weight mass must be positive")
        delta = ez / ez_sum
        delta[rows, labels] -= 1.0
        delta *= w[:, None]
        self.weights -= learning_rate * (delta.T @ features) / total
        self.bias -= learning_rate * delta.sum(axis=0) / total
        batch_loss = float((losses * w).sum() / total)
        if not np.isfinite(batch_loss) or not np.isfinite(self.weights).all():
            raise DivergedError("diverged: non-finite loss or weights")
        return batch_loss

    def pack(self) -> np.ndarray:
        """Weights and bias as one (num_classes, feature_dim + 1) matrix."""
        return np.hstack([self.weights, self.bias[:, None]])

    @classmethod
    def unpack(cls, packed: np.ndarray) -> "ReferenceLearner":
        return cls(packed[:, :-1].copy(), packed[:, -1].copy())


def compute_scores(
    learner: ReferenceLearner,
    features: np.ndarray,
    labels: np.ndarray | None,
    policy: str,
) -> np.ndarray:
    """Per-sample downsampling scores from the learner's forward pass."""
    if policy == "loss":
        return learner.loss_per_sample(features, labels)
    if policy == "grad_norm":
        # gradient of the cross-entropy wrt the last layer factorizes into
        # ||p - onehot(y)|| * ||[x; 1]||
        learner._check_labels(labels)
        delta = learner.predict_proba(features)
        delta[np.arange(len(labels)), labels] -= 1.0
        x_norm = np.sqrt((np.atleast_2d(features) ** 2).sum(axis=1) + 1.0)
        return np.linalg.norm(delta, axis=1) * x_norm
    probs = learner.predict_proba(features)
    if policy == "margin":
        part = np.partition(probs, probs.shape[1] - 2, axis=1)
        return part[:, -1] - part[:, -2]
    if policy == "least_confidence":
        return probs.max(axis=1)
    if policy == "entropy":
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(probs > 0, probs * np.log(probs), 0.0)
        return -terms.sum(axis=1)
    raise TrainerError(f"unknown scoring policy {policy!r}")


def _top_k(scores: np.ndarray, k: int, low_first: bool) -> np.ndarray:
    idx = np.arange(len(scores))
    order = np.lexsort((idx, scores if low_first else -scores))
    return np.sort(order[:k])


def _proportional_without_replacement(
    scores: np.ndarray, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Successive sampling proportional to score; importance weights 1/(N p)."""
    n = len(scores)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.min() < 0:
        raise TrainerError("scores must be non-negative for proportional sampling")
    total = scores.sum()
    base_probs = np.full(n, 1.0 / n) if total <= 0 else scores / total
    remaining = scores.copy() if total > 0 else np.ones(n)
    alive = np.ones(n, dtype=bool)
    picked = np.empty(k, dtype=np.int64)
    for j in range(k):
        mass = remaining[alive].sum()
        if mass <= 0:
            # residual zero-score samples: fall back to uniform among them
            remaining[alive] = 1.0
            mass = remaining[alive].sum()
        probs = np.where(alive, remaining, 0.0) / mass
        choice = rng.choice(n, p=probs)
        picked[j] = choice
        alive[choice] = False
        remaining[choice] = 0.0
    picked = np.sort(picked)
    weights = 1.0 / (n * base_probs[picked])
    return picked, weights


def downsample_bts(
    scores: np.ndarray,
    policy: str,
    ratio: float,
    seed: int,
    budget: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Select indices from one scored batch; returns (indices, weights).

    ``budget`` overrides floor(ratio * n) so a training loop can hit an exact
    per-epoch sample budget across uneven batches.
    """
    if not 0.0 < ratio <= 1.0:
        raise TrainerError(f"ratio {ratio} outside (0, 1]")
    if policy in RS2_POLICIES:
        raise TrainerError(f"{policy} runs in StB mode only")
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    k = int(np.floor(ratio * n)) if budget is None else min(budget, n)
    if k >= n:
        return np.arange(n), np.ones(n)
    if policy in ("loss", "grad_norm"):
        rng = rng_for(seed, "downsample_bts")
        return _proportional_without_replacement(scores, k, rng)
    if policy in ("margin", "least_confidence", "entropy"):
        picked = _top_k(scores, k, low_first=policy in LOW_FIRST)
        return picked, np.ones(k)
    raise TrainerError(f"unknown downsampling policy {policy!r}")


def downsample_stb(
    scores: np.ndarray, policy: str, ratio: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Score-based selection over the whole pool (StB sampling phase)."""
    return downsample_bts(scores, policy, ratio, seed)


class Rs2Sampler:
    """RS2 random-subset selection with a per-epoch budget.

    Without replacement, epoch subsets are drawn from a shuffled queue of the
    pool so no key repeats until every key has been seen; the queue reshuffles
    once exhausted. With replacement, every epoch is an independent uniform
    draw.
    """

    def __init__(self, pool_size: int, ratio: float, with_replacement: bool, seed: int):
        if not 0.0 < ratio <= 1.0:
            raise TrainerError(f"ratio {ratio} outside (0, 1]")
        self.pool_size = pool_size
        self.budget = int(np.floor(ratio * pool_size))
        self.with_replacement = with_replacement
        self._rng = rng_for(seed, "rs2")
        self._queue: list[int] = []

    def epoch_indices(self) -> np.ndarray:
        if self.with_replacement:
            return np.sort(self._rng.integers(0, self.pool_size, size=self.budget))
        picked: list[int] = []
        while len(picked) < self.budget:
            if not self._queue:
                fresh = self._rng.permutation(self.pool_size).tolist()
                taken = set(picked)
                self._queue = [i for i in fresh if i not in taken]
            picked.append(self._queue.pop())
        return np.sort(np.asarray(picked, dtype=np.int64))


@dataclass(frozen=True)
class DownsamplingConfig:
    policy: str = "none"
    ratio: float = 1.0
    mode: str = "StB"  # StB | BtS
    stb_refresh_every_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.policy not in ("none",) + SCORE_POLICIES + RS2_POLICIES:
            raise TrainerError(f"unknown downsampling policy {self.policy!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise TrainerError("downsampling ratio must be in (0, 1]")
        if self.mode not in ("StB", "BtS"):
            raise TrainerError(f"unknown downsampling mode {self.mode!r}")
        if self.policy in RS2_POLICIES and self.mode != "StB":
            raise TrainerError("rs2 policies re-partition the pool per epoch: StB only")
        if self.stb_refresh_every_epochs < 1:
            raise TrainerError("stb_refresh_every_epochs must be >= 1")


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 64
    epochs_per_trigger: int = 1
    learning_rate: float = 0.1
    use_previous_model: bool = True
    shuffle: bool = False
    loader: LoaderConfig = field(default_factory=LoaderConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs_per_trigger < 1:
            raise TrainerError("batch_size and epochs_per_trigger must be positive")


@dataclass
class TrainResult:
    learner: ReferenceLearner
    t_start: int
    t_end: int
    per_epoch_visits: list[int]
    total_visits: int
    final_loss: float


def _epoch_budgets(counts: np.ndarray, ratio: float) -> np.ndarray:
    """Per-batch budgets that telescope to exactly floor(ratio * N)."""
    cum = np.cumsum(counts)
    targets = np.floor(ratio * cum).astype(np.int64)
    return np.diff(np.concatenate([[0], targets]))


def train_on_trigger(
    learner: ReferenceLearner,
    tts,
    store,
    training: TrainingConfig,
    downsampling: DownsamplingConfig,
    parser,
    seed: int = 0,
    time_bounds: tuple[int, int] | None = None,
) -> TrainResult:
    """Run the per-trigger training loop over a trigger training set.

    ``time_bounds`` lets the caller pin the training-data interval (window
    start, triggering timestamp); otherwise the min/max timestamps of the
    trained keys are used.
    """
    if tts.total_count == 0:
        raise TrainerError("trigger training set is empty")
    cfg = training
    down = downsampling
    per_epoch_visits: list[int] = []
    final_loss = float("nan")

    def loader(epoch: int):
        return loader_stream(
            tts, cfg.loader, store, parser, cfg.batch_size,
            shuffle=cfg.shuffle, seed=seed, epoch=epoch,
        )

    if down.policy == "none" or (down.ratio >= 1.0 and down.policy not in RS2_POLICIES):
        for epoch in range(cfg.epochs_per_trigger):
            visits = 0
            for batch in loader(epoch):
                final_loss = learner.weighted_update(
                    batch.features, batch.labels, batch.weights, cfg.learning_rate
                )
                visits += len(batch.labels)
            per_epoch_visits.append(visits)
    elif down.mode == "BtS":
        for epoch in range(cfg.epochs_per_trigger):
            visits = 0
            acc: list = []
            acc_count = 0
            seen = 0
            batch_index = 0
            for batch in loader(epoch):
                scores = compute_scores(learner, batch.features, batch.labels, down.policy)
                seen_next = seen + len(batch.labels)
                budget = int(np.floor(down.ratio * seen_next) - np.floor(down.ratio * seen))
                seen = seen_next
                idx, w = downsample_bts(
                    scores, down.policy, down.ratio,
                    seed=derive_seed(down.seed, f"bts:{epoch}:{batch_index}"),
                    budget=budget,
                )
                batch_index += 1
                if len(idx) == 0:
                    continue
                acc.append(
                    (batch.features[idx], batch.labels[idx], batch.weights[idx] * w)
                )
                acc_count += len(idx)
                if acc_count >= cfg.batch_size:
                    final_loss = _update_from_parts(learner, acc, cfg.learning_rate)
                    visits += acc_count
                    acc, acc_count = [], 0
            if acc:
                final_loss = _update_from_parts(learner, acc, cfg.learning_rate)
                visits += acc_count
            per_epoch_visits.append(visits)
    else:  # StB
        pool = _materialize_pool(tts, store, cfg.loader, parser)
        rs2 = None
        if down.policy in RS2_POLICIES:
            rs2 = Rs2Sampler(
                len(pool.labels), down.ratio,
                with_replacement=down.policy == "rs2_with_replacement",
                seed=down.seed,
            )
        selected = None
        for epoch in range(cfg.epochs_per_trigger):
            if rs2 is not None:
                idx = rs2.epoch_indices()
                selected = (idx, np.ones(len(idx)))
            elif selected is None or epoch % down.stb_refresh_every_epochs == 0:
                scores = compute_scores(learner, pool.features, pool.labels, down.policy)
                selected = downsample_stb(
                    scores, down.policy, down.ratio,
                    seed=derive_seed(down.seed, f"stb:{epoch}"),
                )
            idx, down_w = selected
            order = np.arange(len(idx))
            if cfg.shuffle:
                order = rng_for(seed, f"stb_shuffle:{epoch}").permutation(len(idx))
            visits = 0
            for start in range(0, len(order), cfg.batch_size):
                rows = order[start : start + cfg.batch_size]
                final_loss = learner.weighted_update(
                    pool.features[idx[rows]],
                    pool.labels[idx[rows]],
                    pool.weights[idx[rows]] * down_w[rows],
                    cfg.learning_rate,
                )
                visits += len(rows)
            per_epoch_visits.append(visits)

    if time_bounds is not None:
        t_start, t_end = time_bounds
    else:
        trained_keys = np.concatenate(
            [tts.read_partition(p)[0] for p in range(tts.num_partitions)]
        )
        ts = store.timestamps_for(trained_keys)
        t_start, t_end = int(ts.min()), int(ts.max())
    return TrainResult(
        learner=learner,
        t_start=t_start,
        t_end=t_end,
        per_epoch_visits=per_epoch_visits,
        total_visits=int(sum(per_epoch_visits)),
        final_loss=final_loss,
    )


def _update_from_parts(learner, parts, learning_rate: float) -> float:
    features = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    weights = np.concatenate([p[2] for p in parts])
    return learner.weighted_update(features, labels, weights, learning_rate)


@dataclass
class _Pool:
    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    keys: np.ndarray


def _materialize_pool(tts, store, loader_cfg, parser) -> _Pool:
    """Fetch the whole trigger training set once (StB scoring passes)."""
    keys, weights = [], []
    for p in range(tts.num_partitions):
        k, w = tts.read_partition(p)
        keys.append(k)
        weights.append(w)
    keys = np.concatenate(keys)
    weights = np.concatenate(weights)
    features, labels = fetch_share_arrays(store, keys, parser, loader_cfg.storage_threads)
    return _Pool(features, labels, weights, keys)
