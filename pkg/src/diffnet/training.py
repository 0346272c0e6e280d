"""Pairwise ranking training: negative sampling, user-grouped batches, Adam."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .evaluation import EvalConfig, evaluate
from .model import RankingModel
from .numkernel import AdamState, adam_step, derive_seed, log_sigmoid, make_rng, sigmoid

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""

    def __init__(self, message: str, diagnostics: dict[str, np.ndarray]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 512
    neg_samples_per_pos: int = 10
    reg: float = 0.001
    max_epochs: int = 100
    early_stop_patience: int = 10
    rng_seed: int = 0
    # "epoch" draws negatives once per epoch, "batch" redraws them for every batch
    negative_resampling: str = "epoch"
    val_negatives: int = 1000

    def __post_init__(self) -> None:
        if self.neg_samples_per_pos < 1:
            raise ValueError("neg_samples_per_pos must be >= 1")
        if self.reg < 0:
            raise ValueError("reg must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ValueError("batch_size and early_stop_patience must be >= 1, max_epochs >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.negative_resampling not in ("epoch", "batch"):
            raise ValueError("negative_resampling must be 'epoch' or 'batch'")


@dataclass
class TrainPairs:
    """Parallel arrays of ``(user, positive, negative)`` triples, grouped by user."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return int(self.users.size)


def _draw_negatives(
    rng: np.random.Generator, users: np.ndarray, num_items: int, positive_keys: np.ndarray
) -> np.ndarray:
    # rejection sampling: redraw until no candidate is one of the user's positives
    neg = rng.integers(0, num_items, size=users.size)
    todo = np.arange(users.size)
    while todo.size:
        keys = users[todo] * num_items + neg[todo]
        loc = np.minimum(np.searchsorted(positive_keys, keys), max(positive_keys.size - 1, 0))
        bad = positive_keys[loc] == keys if positive_keys.size else np.zeros(todo.size, bool)
        todo = todo[bad]
        neg[todo] = rng.integers(0, num_items, size=todo.size)
    return neg


def _positive_keys(train: Dataset) -> np.ndarray:
    users, items = train.pairs()
    return np.sort(users * train.num_items + items)


def sample_pairs(
    train: Dataset,
    epoch_seed: int,
    neg_samples_per_pos: int = 10,
    *,
    shuffle_users: bool = True,
) -> TrainPairs:
    """One epoch of training triples.

    Every training positive appears ``neg_samples_per_pos`` times, each
    time with an independently drawn item the user has no positive for.
    Users are visited in a seeded random order; all of a user's triples are
    contiguous.
    """
    rng = np.random.default_rng(epoch_seed)
    counts = train.interaction_counts
    full = counts >= train.num_items
    if np.any(full):
        logger.warning("sample_pairs: %d user(s) rated every item and are skipped", int(full.sum()))
    order = rng.permutation(train.num_users) if shuffle_users else np.arange(train.num_users)
    order = order[(counts[order] > 0) & ~full[order]]

    if order.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return TrainPairs(empty, empty.copy(), empty.copy())
    pos = np.concatenate([train.interactions[a] for a in order])
    users = np.repeat(order, counts[order])
    users = np.repeat(users, neg_samples_per_pos)
    pos = np.repeat(pos, neg_samples_per_pos)
    neg = _draw_negatives(rng, users, train.num_items, _positive_keys(train))
    return TrainPairs(users=users, pos=pos, neg=neg)


def make_batches(users: np.ndarray, batch_size: int) -> list[slice]:
    """Cut a user-grouped pair stream into batches without splitting any user.

    Whole user groups are added while they fit; a group larger than
    ``batch_size`` becomes its own oversized batch.
    """
    users = np.asarray(users)
    if users.size == 0:
        return []
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
    ends = np.r_[starts[1:], users.size]
    batches: list[slice] = []
    cur_start, cur_len = 0, 0
    for s, e in zip(starts, ends):
        n = e - s
        if n > batch_size:
            logger.warning("make_batches: user %d has %d pairs (> batch size %d)", users[s], n, batch_size)
        if cur_len and cur_len + n > batch_size:
            batches.append(slice(cur_start, s))
            cur_start, cur_len = s, 0
        cur_len += n
    batches.append(slice(cur_start, users.size))
    return batches


def pairwise_loss(
    pos_scores: np.ndarray,
    neg_scores: np.ndarray,
    params: dict[str, np.ndarray] | None = None,
    reg: float = 0.0,
    regularized: tuple[str, ...] = ("P", "Q"),
) -> tuple[float, np.ndarray]:
    """``sum(-ln sigmoid(pos - neg)) + reg * sum of squared Frobenius norms``.

    Returns the loss and ``dloss/d(pos - neg)`` per pair.
    """
    diff = np.asarray(pos_scores) - np.asarray(neg_scores)
    loss = float(-log_sigmoid(diff).sum())
    if params is not None and reg:
        loss += reg * sum(float(np.sum(params[k] ** 2)) for k in regularized if k in params)
    return loss, -sigmoid(-diff)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    val_hr: float
    val_ndcg: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.mean_loss!r}\t{self.val_hr!r}\t{self.val_ndcg!r}"


@dataclass
class TrainState:
    """Everything needed to resume training at an epoch boundary."""

    adam: AdamState
    epoch: int = 0
    best_score: float = -np.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    best_params: dict[str, np.ndarray] | None = None
    best_bn: list[tuple[np.ndarray, np.ndarray]] | None = None
    log: list[EpochRecord] = field(default_factory=list)
    stopped: bool = False


def _snapshot(model: RankingModel) -> tuple[dict[str, np.ndarray], list[tuple[np.ndarray, np.ndarray]]]:
    params = {k: v.copy() for k, v in model.params.items()}
    bn = [(s.running_mean.copy(), s.running_var.copy()) for s in model.bn_states]
    return params, bn


def restore(model: RankingModel, params: dict[str, np.ndarray], bn: list[tuple[np.ndarray, np.ndarray]]) -> None:
    for k, v in params.items():
        model.params[k][...] = v
    for s, (mean, var) in zip(model.bn_states, bn):
        s.running_mean = mean.copy()
        s.running_var = var.copy()
    model.mark_updated()


def train_step(
    model: RankingModel,
    users: np.ndarray,
    pos: np.ndarray,
    neg: np.ndarray,
    config: TrainConfig,
    adam: AdamState,
) -> float:
    """Forward, loss, backward and one Adam update on a single batch."""
    trace = model.forward(training=True)
    both_users = np.concatenate([users, users])
    scores = model.pair_scores(trace, both_users, np.concatenate([pos, neg]))
    s_pos, s_neg = scores[: users.size], scores[users.size :]
    loss, ddiff = pairwise_loss(s_pos, s_neg, model.params, config.reg, model.regularized)
    if not np.isfinite(loss):
        raise TrainingDiverged(
            "loss is not finite",
            {"users": users, "pos": pos, "neg": neg, "pos_scores": s_pos, "neg_scores": s_neg},
        )
    grads = model.backward(trace, both_users, np.concatenate([pos, neg]), np.concatenate([ddiff, -ddiff]))
    for name in model.regularized:
        grads[name] += 2.0 * config.reg * model.params[name]
    adam_step(model.params, grads, adam)
    model.mark_updated()
    return loss


def train(
    model: RankingModel,
    train_data: Dataset,
    validation: Dataset | None = None,
    config: TrainConfig = TrainConfig(),
    *,
    state: TrainState | None = None,
    log_path: str | os.PathLike | None = None,
    diagnostic_path: str | os.PathLike | None = None,
    on_epoch=None,
) -> TrainState:
    """Fit ``model`` with mini-batch Adam on the pairwise ranking loss.

    After each epoch the validation NDCG@10 is measured; training stops
    after ``early_stop_patience`` epochs without improvement, and the best
    parameters are written back into the model. Pass a previous ``state``
    to resume. ``on_epoch(state)`` is called after every epoch.
    """
    if state is None:
        state = TrainState(adam=AdamState(learning_rate=config.learning_rate))
    use_val = validation is not None and validation.num_interactions > 0
    val_cfg = EvalConfig(
        top_n=(10,),
        num_sampled_negatives=config.val_negatives,
        num_repetitions=1,
        rng_seed=derive_seed(config.rng_seed, "validation"),
    )
    log_fh = open(log_path, "a", encoding="utf-8") if log_path is not None else None
    try:
        while state.epoch < config.max_epochs and not state.stopped:
            epoch = state.epoch
            pairs = sample_pairs(
                train_data, derive_seed(config.rng_seed, "sampling", epoch), config.neg_samples_per_pos
            )
            total = 0.0
            for b, sl in enumerate(make_batches(pairs.users, config.batch_size)):
                users, pos, neg = pairs.users[sl], pairs.pos[sl], pairs.neg[sl]
                if config.negative_resampling == "batch" and b:
                    rng = make_rng(config.rng_seed, "sampling", epoch, b)
                    neg = _draw_negatives(rng, users, train_data.num_items, _positive_keys(train_data))
                try:
                    total += train_step(model, users, pos, neg, config, state.adam)
                except TrainingDiverged as exc:
                    exc.diagnostics.update(epoch=np.array(epoch + 1), batch=np.array(b))
                    if diagnostic_path is not None:
                        np.savez(diagnostic_path, **exc.diagnostics)
                    raise
            mean_loss = total / max(len(pairs), 1)

            hr = ndcg = float("nan")
            if use_val:
                res = evaluate(model, validation, val_cfg, exclude=(train_data,))
                hr, ndcg = res.hr_at(10), res.ndcg_at(10)
            record = EpochRecord(epoch + 1, mean_loss, hr, ndcg)
            state.log.append(record)
            state.epoch = epoch + 1
            logger.info("epoch %d loss %.6f val hr@10 %.4f ndcg@10 %.4f", *record.__dict__.values())
            if log_fh is not None:
                log_fh.write(record.line() + "\n")
                log_fh.flush()

            score = ndcg if use_val else -mean_loss
            if not use_val or score > state.best_score:
                state.best_score = score
                state.best_epoch = epoch + 1
                state.bad_epochs = 0
                state.best_params, state.best_bn = _snapshot(model)
            else:
                state.bad_epochs += 1
                if state.bad_epochs >= config.early_stop_patience:
                    state.stopped = True
            if on_epoch is not None:
                on_epoch(state)
    finally:
        if log_fh is not None:
            log_fh.close()

    if state.best_params is not None:
        restore(model, state.best_params, state.best_bn or [])
    return state
