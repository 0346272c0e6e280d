"""Sampled top-N evaluation: HR@N and NDCG@N against random unrated items.

For every user with held-out positives, the positives are ranked together
with a fresh sample of items the user has not interacted with in any
split. Scores are sorted descending with ties going to the smaller item id.
Per-user values are averaged over users, then over repetitions.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .numkernel import make_rng

Scorer = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EvalConfig:
    top_n: tuple[int, ...] = (5, 10, 15)
    num_sampled_negatives: int = 1000
    num_repetitions: int = 10
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.top_n or min(self.top_n) < 1:
            raise ValueError("top_n must hold positive cutoffs")
        if self.num_sampled_negatives < 0 or self.num_repetitions < 1:
            raise ValueError("need num_sampled_negatives >= 0 and num_repetitions >= 1")


def rank_positions(scores: np.ndarray, positives: np.ndarray, negatives: np.ndarray) -> np.ndarray:
    """1-based rank of each positive within ``positives`` + ``negatives``.

    ``scores`` is indexed by item id.
    """
    cand = np.concatenate([np.asarray(positives, np.int64), np.asarray(negatives, np.int64)])
    order = np.lexsort((cand, -scores[cand]))
    rank = np.empty(cand.size, dtype=np.int64)
    rank[order] = np.arange(1, cand.size + 1)
    return rank[: len(positives)]


# DCG sums use math.fsum so the result does not depend on summation order
def ideal_dcg(num_positives: int, n: int) -> float:
    return math.fsum(1.0 / math.log2(r + 1) for r in range(1, min(num_positives, n) + 1))


def hit_ndcg(ranks: np.ndarray, n: int) -> tuple[int, float]:
    """Hit count and normalized DCG at cutoff ``n`` for one user's positive ranks."""
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        return 0, 0.0
    top = ranks[ranks <= n]
    dcg = math.fsum(1.0 / math.log2(int(r) + 1) for r in top)
    return int(top.size), dcg / ideal_dcg(ranks.size, n)


def rank_user(
    scores: np.ndarray, positives: np.ndarray, negatives: np.ndarray, n: int
) -> tuple[int, float]:
    """Number of test positives in the top ``n`` and the user's NDCG@n."""
    return hit_ndcg(rank_positions(scores, positives, negatives), n)


def sample_negatives(
    rng: np.random.Generator, num_items: int, known: np.ndarray, k: int
) -> np.ndarray:
    """Up to ``k`` distinct items outside ``known`` (all of them if fewer remain)."""
    pool = np.setdiff1d(np.arange(num_items, dtype=np.int64), known, assume_unique=False)
    if k >= pool.size:
        return pool
    return np.sort(rng.choice(pool, size=k, replace=False))


@dataclass
class RankingResult:
    """Per-user HR/NDCG for every repetition and cutoff.

    ``hr`` and ``ndcg`` have shape ``(repetitions, len(top_n), len(users))``.
    """

    top_n: tuple[int, ...]
    users: np.ndarray
    ranks: list[list[np.ndarray]]
    hr: np.ndarray
    ndcg: np.ndarray
    bucket_of: np.ndarray | None = None
    bucket_names: tuple[str, ...] = ()

    def _values(self, metric: str) -> np.ndarray:
        if metric == "hr":
            return self.hr
        if metric == "ndcg":
            return self.ndcg
        raise ValueError(f"unknown metric {metric!r}")

    def per_repetition(self, metric: str, n: int, bucket: str | None = None) -> np.ndarray:
        vals = self._values(metric)[:, self.top_n.index(n), :]
        if bucket is not None:
            if self.bucket_of is None:
                raise ValueError("no bucket assignment was supplied")
            vals = vals[:, self.bucket_of == self.bucket_names.index(bucket)]
        if vals.shape[1] == 0:
            return np.full(vals.shape[0], np.nan)
        return vals.mean(axis=1)

    def mean(self, metric: str, n: int, bucket: str | None = None) -> float:
        return float(self.per_repetition(metric, n, bucket).mean())

    def hr_at(self, n: int) -> float:
        return self.mean("hr", n)

    def ndcg_at(self, n: int) -> float:
        return self.mean("ndcg", n)

    def rows(self, model: str) -> list[tuple[str, str, int, str, str, float]]:
        """``(model, metric, N, scope, repetition, value)`` tuples for a results file."""
        scopes: list[str | None] = [None, *self.bucket_names] if self.bucket_of is not None else [None]
        out = []
        for metric in ("hr", "ndcg"):
            for n in self.top_n:
                for scope in scopes:
                    reps = self.per_repetition(metric, n, scope)
                    label = "overall" if scope is None else scope
                    for r, val in enumerate(reps):
                        out.append((model, metric, n, label, str(r), float(val)))
                    out.append((model, metric, n, label, "mean", float(reps.mean())))
        return out


def _as_scorer(model) -> Scorer:
    if hasattr(model, "score_users"):
        return model.score_users
    if callable(model):
        return model
    raise TypeError("model must be callable or expose score_users(users)")


def evaluate(
    model,
    test: Dataset,
    config: EvalConfig = EvalConfig(),
    *,
    exclude: Sequence[Dataset] = (),
    bucket_of: np.ndarray | None = None,
    bucket_names: Sequence[str] = (),
    chunk_size: int = 1024,
) -> RankingResult:
    """Run the sampled ranking protocol over every user with test positives.

    ``model`` is either a callable mapping a user-id array to a
    ``(len(users), N)`` score matrix, or an object with ``score_users``.
    Items that are positives in ``test`` or in any dataset in ``exclude``
    are never drawn as negatives. ``bucket_of`` assigns every user (by id)
    to one of ``bucket_names`` for per-sparsity breakdowns.
    """
    scorer = _as_scorer(model)
    users = np.flatnonzero(test.interaction_counts > 0)
    R, T = config.num_repetitions, len(config.top_n)
    hr = np.zeros((R, T, users.size))
    ndcg = np.zeros((R, T, users.size))
    ranks: list[list[np.ndarray]] = [[None] * users.size for _ in range(R)]  # type: ignore[list-item]

    for start in range(0, users.size, chunk_size):
        block = users[start : start + chunk_size]
        scores = np.asarray(scorer(block))
        for row, a in enumerate(block):
            col = start + row
            pos = test.interactions[a]
            known = np.concatenate([pos, *(d.interactions[a] for d in exclude)])
            for r in range(R):
                rng = make_rng(config.rng_seed, "eval", r, int(a))
                neg = sample_negatives(rng, test.num_items, known, config.num_sampled_negatives)
                rk = rank_positions(scores[row], pos, neg)
                ranks[r][col] = rk
                for t, n in enumerate(config.top_n):
                    hits, nd = hit_ndcg(rk, n)
                    hr[r, t, col] = hits / pos.size
                    ndcg[r, t, col] = nd

    buckets = None
    if bucket_of is not None:
        buckets = np.asarray(bucket_of)[users]
    return RankingResult(
        top_n=tuple(config.top_n),
        users=users,
        ranks=ranks,
        hr=hr,
        ndcg=ndcg,
        bucket_of=buckets,
        bucket_names=tuple(bucket_names),
    )


def write_results(
    path: str | os.PathLike, rows: Sequence[tuple], digest: str | None = None
) -> None:
    """Tab-separated results table; ``digest`` identifies the producing config."""
    with open(path, "w", encoding="utf-8") as fh:
        if digest is not None:
            fh.write(f"# config_digest\t{digest}\n")
        fh.write("model\tmetric\tN\tscope\trepetition\tvalue\n")
        for model, metric, n, scope, rep, value in rows:
            fh.write(f"{model}\t{metric}\t{n}\t{scope}\t{rep}\t{value!r}\n")
