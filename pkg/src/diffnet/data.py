"""Implicit-feedback datasets with a directed trust graph and optional features.

Text formats (UTF-8, tab separated):

* ratings: ``<user_id>\\t<item_id>`` per line
* trust: ``<truster_id>\\t<trustee_id>`` per line (truster trusts trustee)
* features: header ``<dim>\\t<count>``, then ``<id>\\t<v1>,<v2>,...``
* split manifest: ``<user_id>\\t<item_id>\\t<train|validation|test>``

Ids in files are arbitrary strings. They are densified to ``0..M-1`` and
``0..N-1`` by sorting (numerically when every id is an integer), and the
original ids are kept on the :class:`Dataset`.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "validation", "test")


class DataFormatError(ValueError):
    """Malformed or inconsistent input file."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable interaction data plus social graph and features.

    ``interactions[a]`` is the sorted array of items user ``a`` likes and
    ``trust_out[a]`` the sorted array of users ``a`` trusts. Feature
    matrices hold one column per entity.
    """

    num_users: int
    num_items: int
    interactions: tuple[np.ndarray, ...]
    trust_out: tuple[np.ndarray, ...]
    user_features: np.ndarray | None = None
    item_features: np.ndarray | None = None
    user_ids: tuple[str, ...] = field(default=())
    item_ids: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        M, N = self.num_users, self.num_items
        if len(self.interactions) != M or len(self.trust_out) != M:
            raise ValueError("interactions and trust_out need one entry per user")
        for a, items in enumerate(self.interactions):
            if items.size and (items[0] < 0 or items[-1] >= N or np.any(np.diff(items) <= 0)):
                raise ValueError(f"user {a}: item ids must be sorted, unique and < {N}")
        for a, nbrs in enumerate(self.trust_out):
            if nbrs.size and (nbrs[0] < 0 or nbrs[-1] >= M or np.any(np.diff(nbrs) <= 0)):
                raise ValueError(f"user {a}: trusted ids must be sorted, unique and < {M}")
            if np.any(nbrs == a):
                raise ValueError(f"user {a} trusts itself")
        if self.user_features is not None and self.user_features.shape[1] != M:
            raise ValueError(f"user features have {self.user_features.shape[1]} columns, expected {M}")
        if self.item_features is not None and self.item_features.shape[1] != N:
            raise ValueError(f"item features have {self.item_features.shape[1]} columns, expected {N}")
        if not self.user_ids:
            object.__setattr__(self, "user_ids", tuple(str(i) for i in range(M)))
        if not self.item_ids:
            object.__setattr__(self, "item_ids", tuple(str(i) for i in range(N)))
        if len(self.user_ids) != M or len(self.item_ids) != N:
            raise ValueError("id maps do not match entity counts")

    @classmethod
    def from_pairs(
        cls,
        num_users: int,
        num_items: int,
        users: Sequence[int],
        items: Sequence[int],
        trust_src: Sequence[int] = (),
        trust_dst: Sequence[int] = (),
        **kwargs,
    ) -> "Dataset":
        """Build a dataset from parallel id arrays (duplicates are merged)."""
        return cls(
            num_users=num_users,
            num_items=num_items,
            interactions=_group(num_users, users, items),
            trust_out=_group(num_users, trust_src, trust_dst),
            **kwargs,
        )

    @property
    def num_interactions(self) -> int:
        return int(sum(len(x) for x in self.interactions))

    @property
    def num_edges(self) -> int:
        return int(sum(len(x) for x in self.trust_out))

    @cached_property
    def interaction_counts(self) -> np.ndarray:
        return np.array([len(x) for x in self.interactions], dtype=np.int64)

    @cached_property
    def interaction_matrix(self) -> sp.csr_matrix:
        """Binary ``(M, N)`` CSR matrix of positives."""
        return _csr(self.interactions, self.num_items)

    @cached_property
    def trust_matrix(self) -> sp.csr_matrix:
        """Binary ``(M, M)`` CSR matrix with ``[a, b] = 1`` when ``a`` trusts ``b``."""
        return _csr(self.trust_out, self.num_users)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All ``(user, item)`` positives as two parallel arrays."""
        counts = self.interaction_counts
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), counts)
        items = np.concatenate(self.interactions) if self.num_interactions else np.zeros(0, np.int64)
        return users, items.astype(np.int64)

    def with_interactions(self, interactions: Sequence[np.ndarray]) -> "Dataset":
        """Same users, items, graph and features with a different positive set."""
        return replace(self, interactions=tuple(np.asarray(x, dtype=np.int64) for x in interactions))

    def equals(self, other: "Dataset") -> bool:
        if (self.num_users, self.num_items) != (other.num_users, other.num_items):
            return False
        if self.user_ids != other.user_ids or self.item_ids != other.item_ids:
            return False
        for mine, theirs in ((self.interactions, other.interactions), (self.trust_out, other.trust_out)):
            if any(not np.array_equal(x, y) for x, y in zip(mine, theirs)):
                return False
        for x, y in ((self.user_features, other.user_features), (self.item_features, other.item_features)):
            if (x is None) != (y is None):
                return False
            if x is not None and not np.array_equal(x, y):
                return False
        return True


def _group(n: int, keys: Sequence[int], values: Sequence[int]) -> tuple[np.ndarray, ...]:
    keys = np.asarray(keys, dtype=np.int64)
    values = np.asarray(values, dtype=np.int64)
    if keys.shape != values.shape:
        raise ValueError("parallel id arrays differ in length")
    if keys.size and (keys.min() < 0 or keys.max() >= n):
        raise ValueError("id out of range")
    order = np.lexsort((values, keys))
    keys, values = keys[order], values[order]
    if keys.size:
        keep = np.ones(keys.size, dtype=bool)
        keep[1:] = (np.diff(keys) != 0) | (np.diff(values) != 0)
        keys, values = keys[keep], values[keep]
    bounds = np.searchsorted(keys, np.arange(n + 1))
    return tuple(values[bounds[a] : bounds[a + 1]].copy() for a in range(n))


def _csr(rows: Sequence[np.ndarray], ncols: int) -> sp.csr_matrix:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.concatenate(rows).astype(np.int64) if indptr[-1] else np.zeros(0, np.int64)
    data = np.ones(indices.size)
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), ncols))


# ---------------------------------------------------------------------------
# Loading and saving
# ---------------------------------------------------------------------------


def _read_pairs(path: str | os.PathLike, what: str) -> list[tuple[str, str, int]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataFormatError(f"{path}:{lineno}: expected '<id>\\t<id>' in {what} file, got {line!r}")
            out.append((parts[0], parts[1], lineno))
    return out


def _read_features(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        try:
            dim, count = int(header[0]), int(header[1])
            if len(header) != 2:
                raise ValueError
        except (ValueError, IndexError):
            raise DataFormatError(f"{path}:1: expected '<dim>\\t<count>' header") from None
        rows: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected '<id>\\t<v1>,<v2>,...'")
            try:
                values = np.array([float(v) for v in parts[1].split(",")]) if dim else np.zeros(0)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad float in feature vector") from None
            if values.size != dim:
                raise DataFormatError(f"{path}:{lineno}: feature dimension {values.size} != header dim {dim}")
            if parts[0] in rows:
                raise DataFormatError(f"{path}:{lineno}: duplicate feature row for id {parts[0]!r}")
            rows[parts[0]] = values
    if len(rows) != count:
        raise DataFormatError(f"{path}: header announces {count} rows, found {len(rows)}")
    return rows


def _dense_order(ids: Iterable[str]) -> list[str]:
    ids = set(ids)
    try:
        return sorted(ids, key=int)
    except ValueError:
        return sorted(ids)


def _feature_matrix(rows: dict[str, np.ndarray], order: Sequence[str], path) -> np.ndarray:
    missing = [i for i in order if i not in rows]
    if missing:
        raise DataFormatError(f"{path}: no feature row for {len(missing)} id(s), e.g. {missing[0]!r}")
    dim = len(next(iter(rows.values()))) if rows else 0
    mat = np.zeros((dim, len(order)))
    for col, key in enumerate(order):
        mat[:, col] = rows[key]
    return mat


def load_dataset(
    ratings_path: str | os.PathLike,
    trust_path: str | os.PathLike,
    user_feat_path: str | os.PathLike | None = None,
    item_feat_path: str | os.PathLike | None = None,
    *,
    undirected_trust: bool = False,
) -> Dataset:
    """Read the text formats described in the module docstring.

    Duplicate ratings and trust edges are dropped with a warning, as are
    self-loops. With ``undirected_trust`` every link is stored in both
    directions.
    """
    ratings = _read_pairs(ratings_path, "ratings")
    trust = _read_pairs(trust_path, "trust")
    ufeat = _read_features(user_feat_path) if user_feat_path else None
    ifeat = _read_features(item_feat_path) if item_feat_path else None

    user_keys = {u for u, _, _ in ratings} | {u for u, _, _ in trust} | {v for _, v, _ in trust}
    item_keys = {i for _, i, _ in ratings}
    if ufeat is not None:
        user_keys |= set(ufeat)
    if ifeat is not None:
        item_keys |= set(ifeat)
    user_order = _dense_order(user_keys)
    item_order = _dense_order(item_keys)
    uidx = {k: n for n, k in enumerate(user_order)}
    iidx = {k: n for n, k in enumerate(item_order)}

    seen: set[tuple[int, int]] = set()
    users, items = [], []
    for u, i, lineno in ratings:
        key = (uidx[u], iidx[i])
        if key in seen:
            logger.warning("%s:%d: duplicate rating (%s, %s) ignored", ratings_path, lineno, u, i)
            continue
        seen.add(key)
        users.append(key[0])
        items.append(key[1])

    edges: set[tuple[int, int]] = set()
    src, dst = [], []
    for u, v, lineno in trust:
        a, b = uidx[u], uidx[v]
        if a == b:
            logger.warning("%s:%d: self-loop on %s ignored", trust_path, lineno, u)
            continue
        for e in ((a, b), (b, a)) if undirected_trust else ((a, b),):
            if e in edges:
                if e == (a, b):
                    logger.warning("%s:%d: duplicate trust edge (%s, %s) ignored", trust_path, lineno, u, v)
                continue
            edges.add(e)
            src.append(e[0])
            dst.append(e[1])

    return Dataset.from_pairs(
        len(user_order),
        len(item_order),
        users,
        items,
        src,
        dst,
        user_features=_feature_matrix(ufeat, user_order, user_feat_path) if ufeat is not None else None,
        item_features=_feature_matrix(ifeat, item_order, item_feat_path) if ifeat is not None else None,
        user_ids=tuple(user_order),
        item_ids=tuple(item_order),
    )


def _write_features(path: Path, mat: np.ndarray, ids: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{mat.shape[0]}\t{mat.shape[1]}\n")
        for col, key in enumerate(ids):
            fh.write(key + "\t" + ",".join(repr(float(v)) for v in mat[:, col]) + "\n")


def save_dataset(dataset: Dataset, directory: str | os.PathLike) -> dict[str, Path]:
    """Write ``dataset`` as ``ratings.tsv``, ``trust.tsv`` and feature files.

    Floats are written with ``repr`` so :func:`load_dataset` reads back the
    identical bits. Returns the written paths keyed by
    ``ratings``/``trust``/``user_features``/``item_features``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"ratings": directory / "ratings.tsv", "trust": directory / "trust.tsv"}
    uid, iid = dataset.user_ids, dataset.item_ids
    with open(paths["ratings"], "w", encoding="utf-8") as fh:
        for a, items in enumerate(dataset.interactions):
            fh.writelines(f"{uid[a]}\t{iid[i]}\n" for i in items)
    with open(paths["trust"], "w", encoding="utf-8") as fh:
        for a, nbrs in enumerate(dataset.trust_out):
            fh.writelines(f"{uid[a]}\t{uid[b]}\n" for b in nbrs)
    if dataset.user_features is not None:
        paths["user_features"] = directory / "user_features.txt"
        _write_features(paths["user_features"], dataset.user_features, uid)
    if dataset.item_features is not None:
        paths["item_features"] = directory / "item_features.txt"
        _write_features(paths["item_features"], dataset.item_features, iid)
    return paths


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Fractions of all interactions held out for test and validation.

    The default validation share of 0.09 is 10% of the 90% left after the
    test draw.
    """

    test_fraction: float = 0.1
    validation_fraction: float = 0.09
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.test_fraction + self.validation_fraction >= 1:
            raise ValueError("test_fraction + validation_fraction must be < 1")


def _quota(counts: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Largest-remainder allocation of ``round(fraction * total)`` across users."""
    if fraction == 0:
        return np.zeros_like(counts)
    exact = fraction * counts
    base = np.floor(exact + 1e-9).astype(np.int64)
    frac = np.where(exact - base > 1e-9, exact - base, 0.0)
    extra = int(round(fraction * counts.sum())) - int(base.sum())
    perm = rng.permutation(counts.size)
    order = perm[np.argsort(-frac[perm], kind="stable")]
    winners = order[: max(extra, 0)]
    winners = winners[frac[winners] > 0]
    base[winners] += 1
    return base


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Partition the interactions into train, validation and test sets.

    Each user contributes ``floor`` or ``ceil`` of their share, with the
    global totals hitting ``round(fraction * total)``. A user who would be
    left with no training positive gets validation (then test) items
    moved back into train.
    """
    rng = np.random.default_rng(spec.rng_seed)
    counts = dataset.interaction_counts
    n_test = _quota(counts, spec.test_fraction, rng)
    n_val = _quota(counts, spec.validation_fraction, rng)

    over = np.flatnonzero((counts > 0) & (n_test + n_val > counts - 1))
    for a in over:
        while n_test[a] + n_val[a] > counts[a] - 1:
            if n_val[a]:
                n_val[a] -= 1
            else:
                n_test[a] -= 1
    if over.size:
        logger.warning("split: %d user(s) kept extra interactions in train to retain a positive", over.size)

    train, val, test = [], [], []
    for a, items in enumerate(dataset.interactions):
        shuffled = items[rng.permutation(items.size)]
        t, v = n_test[a], n_val[a]
        test.append(np.sort(shuffled[:t]))
        val.append(np.sort(shuffled[t : t + v]))
        train.append(np.sort(shuffled[t + v :]))
    return dataset.with_interactions(train), dataset.with_interactions(val), dataset.with_interactions(test)


def write_split_manifest(path: str | os.PathLike, train: Dataset, validation: Dataset, test: Dataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tag, part in zip(SPLIT_TAGS, (train, validation, test)):
            for a, items in enumerate(part.interactions):
                fh.writelines(f"{part.user_ids[a]}\t{part.item_ids[i]}\t{tag}\n" for i in items)


def read_split_manifest(path: str | os.PathLike, dataset: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    """Rebuild the three splits of ``dataset`` from a manifest file."""
    uidx = {k: n for n, k in enumerate(dataset.user_ids)}
    iidx = {k: n for n, k in enumerate(dataset.item_ids)}
    buckets: dict[str, tuple[list[int], list[int]]] = {t: ([], []) for t in SPLIT_TAGS}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in buckets:
                raise DataFormatError(f"{path}:{lineno}: expected '<user>\\t<item>\\t<split>'")
            try:
                buckets[parts[2]][0].append(uidx[parts[0]])
                buckets[parts[2]][1].append(iidx[parts[1]])
            except KeyError as exc:
                raise DataFormatError(f"{path}:{lineno}: unknown id {exc.args[0]!r}") from None
    out = tuple(
        dataset.with_interactions(_group(dataset.num_users, *buckets[t])) for t in SPLIT_TAGS
    )
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Sparsity buckets
# ---------------------------------------------------------------------------


def bucket_users(train: Dataset, boundaries: Sequence[int]) -> np.ndarray:
    """Index of the half-open ``[lo, hi)`` training-count interval of each user."""
    b = np.asarray(boundaries, dtype=np.int64)
    if b.size and np.any(np.diff(b) <= 0):
        raise ValueError("bucket boundaries must be strictly increasing")
    idx = np.searchsorted(b, train.interaction_counts, side="right")
    if b.size and b[0] == 0:
        idx -= 1
    return idx


def bucket_labels(boundaries: Sequence[int]) -> list[str]:
    edges = [int(x) for x in boundaries]
    if not edges or edges[0] != 0:
        edges = [0] + edges
    labels = [f"[{lo},{hi})" for lo, hi in zip(edges, edges[1:])]
    labels.append(f"[{edges[-1]},∞)")
    return labels


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 200
    num_items: int = 500
    avg_degree: float = 8.0
    homophily_strength: float = 0.8
    latent_dim: int = 32
    positives_per_user: int = 20
    feature_noise: float = 1.0
    num_communities: int = 10
    community_affinity: float = 0.9
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_users < 2 or self.num_items < 1:
            raise ValueError("need at least 2 users and 1 item")
        if not 1 <= self.avg_degree < self.num_users:
            raise ValueError("avg_degree must lie in [1, num_users)")
        if not 0 <= self.homophily_strength <= 1:
            raise ValueError("homophily_strength must lie in [0, 1]")
        if not 1 <= self.positives_per_user <= self.num_items:
            raise ValueError("positives_per_user must lie in [1, num_items]")
        if self.latent_dim < 1 or self.feature_noise < 0:
            raise ValueError("latent_dim must be >= 1 and feature_noise >= 0")
        if not 1 <= self.num_communities <= self.num_users:
            raise ValueError("num_communities must lie in [1, num_users]")
        if not 0 <= self.community_affinity <= 1:
            raise ValueError("community_affinity must lie in [0, 1]")


@dataclass(frozen=True)
class SynthTruth:
    """Planted quantities behind a synthetic dataset (rows are entities)."""

    user_vectors: np.ndarray
    item_vectors: np.ndarray


def _preferential_edges(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Directed preferential attachment, biased towards the source's own community.

    A fraction ``community_affinity`` of each user's attachment weight goes to
    members of its community; within each side, weight is proportional to
    in-degree + 1. One community gives plain preferential attachment.
    """
    M, C = cfg.num_users, cfg.num_communities
    community = rng.integers(0, C, M) if C > 1 else np.zeros(M, dtype=np.int64)
    sizes = np.bincount(community, minlength=C)
    indeg = np.zeros(M)
    src, dst = [], []
    outdeg = np.minimum(1 + rng.poisson(cfg.avg_degree - 1.0, size=M), M - 1)
    for a in rng.permutation(M):
        w = indeg + 1.0
        if C > 1:
            same = community == community[a]
            inside = cfg.community_affinity / max(sizes[community[a]] - 1, 1)
            outside = (1.0 - cfg.community_affinity) / max(M - sizes[community[a]], 1)
            w = w * np.where(same, inside, outside)
        w[a] = 0.0
        k = min(int(outdeg[a]), int(np.count_nonzero(w)))
        targets = rng.choice(M, size=k, replace=False, p=w / w.sum())
        indeg[targets] += 1
        src.extend([a] * len(targets))
        dst.extend(targets.tolist())
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


def _planted_user_vectors(
    trust: sp.csr_matrix, h: float, noise: np.ndarray
) -> np.ndarray:
    # fixed point of z = h * mean(z over trusted) + (1 - h) * noise
    deg = np.asarray(trust.sum(axis=1)).ravel()
    A = sp.diags(1.0 / np.maximum(deg, 1.0)) @ trust
    B = (sp.identity(trust.shape[0], format="csc") - h * A).tocsc()
    if h < 1.0:
        return (1.0 - h) * spla.splu(B).solve(noise)
    # h == 1: project the noise onto the null space of (I - A)
    Bd = B.toarray()
    return noise - np.linalg.pinv(Bd, rcond=1e-10) @ (Bd @ noise)


def synthesize_with_truth(config: SynthConfig) -> tuple[Dataset, SynthTruth]:
    """Generate a homophilous social dataset and return the planted vectors too."""
    rng = np.random.default_rng(config.rng_seed)
    M, N, L = config.num_users, config.num_items, config.latent_dim
    src, dst = _preferential_edges(config, rng)
    trust = _group(M, src, dst)
    trust_mat = _csr(trust, M)

    z = _planted_user_vectors(trust_mat, config.homophily_strength, rng.standard_normal((M, L)))
    scale = z.std()
    if scale > 0:
        z = z / scale
    w = rng.standard_normal((N, L))

    scores = z @ w.T
    k = config.positives_per_user
    # top-k per user, ties broken by item id
    order = np.argsort(-scores, axis=1, kind="stable")
    positives = [np.sort(order[a, :k]) for a in range(M)]

    x = (z + config.feature_noise * rng.standard_normal(z.shape)).T.copy()
    y = (w + config.feature_noise * rng.standard_normal(w.shape)).T.copy()
    dataset = Dataset(
        num_users=M,
        num_items=N,
        interactions=tuple(p.astype(np.int64) for p in positives),
        trust_out=trust,
        user_features=x,
        item_features=y,
    )
    return dataset, SynthTruth(user_vectors=z, item_vectors=w)


def synthesize(config: SynthConfig) -> Dataset:
    """Synthetic dataset with planted social homophily.

    Users get a directed preferential-attachment trust graph (every user
    trusts at least one other). Each planted preference vector is the
    ``homophily_strength``-weighted mean of the trusted users' vectors plus
    independent noise; positives are each user's top-scoring items under
    the planted vectors, and features are noisy copies of those vectors.
    """
    return synthesize_with_truth(config)[0]


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return np.einsum("ij,ij->i", a, b) / np.maximum(na * nb, np.finfo(float).tiny)
