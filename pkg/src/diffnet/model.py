"""DiffNet: feature fusion, layer-wise social influence diffusion, prediction.

A forward pass runs over the whole user population at once, since every
user's layer-``k`` embedding may feed a trusted neighbour's layer ``k+1``.
Shapes follow the column-per-entity convention: user matrices are
``(D, M)`` and item matrices ``(D, N)``.

The backward pass is written out by hand. :meth:`RankingModel.backward`
takes ``dL/dscore`` for a batch of ``(user, item)`` pairs and returns a
gradient for every entry in ``model.params``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .data import Dataset
from .numkernel import (
    ACTIVATIONS,
    BatchNormCache,
    BatchNormState,
    activate,
    activation_grad,
    batchnorm_apply,
    batchnorm_backward,
)

POOLINGS = ("average", "max")
EMPTY_POLICIES = ("zero_vector", "self_copy")


class StaleTraceError(RuntimeError):
    """A trace was used after the parameters that produced it changed."""


def mean_matrix(rows: Sequence[np.ndarray], ncols: int) -> sp.csr_matrix:
    """CSR matrix whose row ``a`` averages over the ids in ``rows[a]`` (empty rows stay zero)."""
    counts = np.array([len(r) for r in rows], dtype=np.int64)
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(counts)
    indices = np.concatenate(rows).astype(np.int64) if indptr[-1] else np.zeros(0, np.int64)
    data = np.repeat(1.0 / np.maximum(counts, 1), counts)
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), ncols))


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def aggregate_neighbors(
    h: np.ndarray,
    trusted: Sequence[int],
    pooling: str = "average",
    empty_policy: str = "zero_vector",
    user: int | None = None,
) -> np.ndarray:
    """Pool the columns of ``h`` listed in ``trusted`` into one vector.

    ``user`` is only consulted for the ``self_copy`` policy on an empty set.
    """
    trusted = np.asarray(trusted, dtype=np.int64)
    if trusted.size == 0:
        if empty_policy == "self_copy":
            if user is None:
                raise ValueError("self_copy policy needs the user's own index")
            return h[:, user].copy()
        return np.zeros(h.shape[0], dtype=h.dtype)
    block = h[:, trusted]
    if pooling == "average":
        return block.mean(axis=1)
    if pooling == "max":
        return block.max(axis=1)
    raise ValueError(f"unknown pooling {pooling!r}")


# ---------------------------------------------------------------------------
# Shared machinery for inner-product models
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    """Final user vectors ``u`` (D, M), item vectors ``v`` (D, N) and version."""

    u: np.ndarray
    v: np.ndarray
    version: int


class RankingModel:
    """Common surface of every model the training loop can drive.

    Subclasses fill ``params`` and implement :meth:`forward` and
    :meth:`_backward_from_vectors`.
    """

    kind = "base"
    params: dict[str, np.ndarray]
    regularized: tuple[str, ...] = ()

    def __init__(self) -> None:
        self.version = 0
        self._cached: Trace | None = None

    @property
    def bn_states(self) -> list[BatchNormState]:
        return []

    def mark_updated(self) -> None:
        """Call after mutating ``params``; invalidates outstanding traces."""
        self.version += 1
        self._cached = None

    def forward(self, training: bool = False, update_stats: bool = True) -> Trace:
        raise NotImplementedError

    def _check(self, trace: Trace) -> None:
        if trace.version != self.version:
            raise StaleTraceError(
                f"trace from parameter version {trace.version}, model is at {self.version}"
            )

    def pair_scores(self, trace: Trace, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        self._check(trace)
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        return np.einsum("dk,dk->k", trace.v[:, items], trace.u[:, users])

    def predict(self, a: int, i: int, trace: Trace | None = None) -> float:
        """Preference score of user ``a`` for item ``i``."""
        trace = trace if trace is not None else self.inference_trace()
        M, N = trace.u.shape[1], trace.v.shape[1]
        if not (0 <= a < M and 0 <= i < N):
            raise IndexError(f"unknown user {a} or item {i}")
        return float(self.pair_scores(trace, np.array([a]), np.array([i]))[0])

    def inference_trace(self) -> Trace:
        if self._cached is None or self._cached.version != self.version:
            self._cached = self.forward(training=False)
        return self._cached

    def score_users(self, users: np.ndarray | None = None) -> np.ndarray:
        """Scores against every item, one row per requested user."""
        trace = self.inference_trace()
        u = trace.u if users is None else trace.u[:, np.asarray(users, dtype=np.int64)]
        return u.T @ trace.v

    def backward(
        self, trace: Trace, users: np.ndarray, items: np.ndarray, dscores: np.ndarray
    ) -> dict[str, np.ndarray]:
        """Gradients of ``sum(dscores * score(users, items))`` w.r.t. every parameter."""
        self._check(trace)
        M, N = trace.u.shape[1], trace.v.shape[1]
        G = sp.csr_matrix(
            (np.asarray(dscores, dtype=trace.u.dtype), (np.asarray(users), np.asarray(items))),
            shape=(M, N),
        )
        du = np.asarray(G @ trace.v.T).T
        dv = np.asarray(G.T @ trace.u.T).T
        return self._backward_from_vectors(trace, du, dv)

    def _backward_from_vectors(self, trace: Trace, du: np.ndarray, dv: np.ndarray) -> dict[str, np.ndarray]:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# DiffNet
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffNetConfig:
    """Architecture switches.

    With a feature flag off and ``bypass_featureless_fusion`` set, the
    corresponding fusion layer disappears entirely (``h0 = p`` or ``v = q``);
    with it unset, the fusion layer still transforms the free embedding.
    """

    embed_dim: int = 64
    diffusion_depth: int = 2
    pooling: str = "average"
    fusion_activation: str = "sigmoid"
    item_fusion_activation: str | None = None
    diffusion_activations: str | tuple[str, ...] = "relu"
    use_user_features: bool = True
    use_item_features: bool = True
    use_free_user_embed: bool = True
    use_free_item_embed: bool = True
    use_batchnorm: bool = True
    empty_neighbor_policy: str = "zero_vector"
    bypass_featureless_fusion: bool = True
    init_scale: float | None = None
    bn_momentum: float = 0.1
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.diffusion_depth < 0:
            raise ValueError("diffusion_depth must be >= 0")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.empty_neighbor_policy not in EMPTY_POLICIES:
            raise ValueError(f"empty_neighbor_policy must be one of {EMPTY_POLICIES}")
        for kind in (self.fusion_activation, self.item_activation, *self.layer_activations):
            if kind not in ACTIVATIONS:
                raise ValueError(f"unknown activation {kind!r}")
        if not (self.use_user_features or self.use_free_user_embed):
            raise ValueError("users need features or a free embedding")
        if not (self.use_item_features or self.use_free_item_embed):
            raise ValueError("items need features or a free embedding")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def item_activation(self) -> str:
        return self.item_fusion_activation or self.fusion_activation

    @property
    def layer_activations(self) -> tuple[str, ...]:
        acts = self.diffusion_activations
        if isinstance(acts, str):
            return (acts,) * self.diffusion_depth
        if len(acts) != self.diffusion_depth:
            raise ValueError("need one diffusion activation per layer")
        return tuple(acts)

    @property
    def user_fusion(self) -> bool:
        return self.use_user_features or not self.bypass_featureless_fusion

    @property
    def item_fusion(self) -> bool:
        return self.use_item_features or not self.bypass_featureless_fusion


@dataclass
class DiffNetTrace(Trace):
    """Everything the backward pass needs from one forward pass."""

    h: list[np.ndarray] = field(default_factory=list)
    h_agg: list[np.ndarray] = field(default_factory=list)
    diff_pre: list[np.ndarray] = field(default_factory=list)
    diff_act: list[np.ndarray] = field(default_factory=list)
    bn_caches: list[BatchNormCache | None] = field(default_factory=list)
    max_source: list[np.ndarray | None] = field(default_factory=list)
    user_in: np.ndarray | None = None
    user_pre: np.ndarray | None = None
    item_in: np.ndarray | None = None
    item_pre: np.ndarray | None = None
    aggregation_ops: int = 0


class DiffNet(RankingModel):
    """The DiffNet model bound to one training split.

    ``train`` provides the trust graph, the optional features, and the
    positives averaged into each user's final vector.
    """

    kind = "diffnet"

    def __init__(self, config: DiffNetConfig, train: Dataset, rng_seed: int = 0) -> None:
        super().__init__()
        self.config = config
        self.num_users, self.num_items = train.num_users, train.num_items
        self.dtype = np.dtype(config.dtype)
        D = config.embed_dim

        if config.use_user_features and train.user_features is None:
            raise ValueError("use_user_features is set but the dataset has no user features")
        if config.use_item_features and train.item_features is None:
            raise ValueError("use_item_features is set but the dataset has no item features")
        self.X = train.user_features.astype(self.dtype) if config.use_user_features else None
        self.Y = train.item_features.astype(self.dtype) if config.use_item_features else None
        self.d1 = 0 if self.X is None else self.X.shape[0]
        self.d2 = 0 if self.Y is None else self.Y.shape[0]

        self.history = mean_matrix(train.interactions, self.num_items).astype(self.dtype)
        self.trust_out = train.trust_out
        self.neighbor_mean = mean_matrix(train.trust_out, self.num_users).astype(self.dtype)
        counts = np.array([len(t) for t in train.trust_out])
        self.isolated = np.flatnonzero(counts == 0)
        self.num_edges = int(counts.sum())

        rng = np.random.default_rng(rng_seed)
        scale = config.init_scale if config.init_scale is not None else 0.1 / np.sqrt(D)
        p: dict[str, np.ndarray] = {}
        if config.use_free_user_embed:
            p["P"] = rng.uniform(-scale, scale, size=(D, self.num_users))
        if config.use_free_item_embed:
            p["Q"] = rng.uniform(-scale, scale, size=(D, self.num_items))
        if config.user_fusion:
            width = self.d1 + (D if config.use_free_user_embed else 0)
            p["W0"] = _glorot(rng, D, width)
            p["W0_bias"] = np.zeros(D)
        if config.item_fusion:
            width = (D if config.use_free_item_embed else 0) + self.d2
            p["F"] = _glorot(rng, D, width)
            p["F_bias"] = np.zeros(D)
        self._bn: list[BatchNormState] = []
        for k in range(config.diffusion_depth):
            p[f"W_diff{k}"] = _glorot(rng, D, 2 * D)
            p[f"W_diff{k}_bias"] = np.zeros(D)
            if config.use_batchnorm:
                p[f"bn{k}_scale"] = np.ones(D)
                p[f"bn{k}_shift"] = np.zeros(D)
                self._bn.append(
                    BatchNormState(
                        D,
                        momentum=config.bn_momentum,
                        running_mean=np.zeros(D, dtype=self.dtype),
                        running_var=np.ones(D, dtype=self.dtype),
                    )
                )
        self.params = {k: v.astype(self.dtype) for k, v in p.items()}
        self.regularized = tuple(k for k in ("P", "Q") if k in self.params)

    @property
    def bn_states(self) -> list[BatchNormState]:
        return self._bn

    # -- forward pieces -----------------------------------------------------

    def fuse_users(self) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
        """Layer-0 user embeddings ``(h0, fusion input, pre-activation)``."""
        cfg = self.config
        if not cfg.user_fusion:
            return self.params["P"], None, None
        parts = [b for b in (self.X, self.params.get("P")) if b is not None]
        inp = np.vstack(parts)
        pre = self.params["W0"] @ inp + self.params["W0_bias"][:, None]
        return activate(cfg.fusion_activation, pre), inp, pre

    def fuse_items(self) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
        """Item vectors ``(v, fusion input, pre-activation)``."""
        cfg = self.config
        if not cfg.item_fusion:
            return self.params["Q"], None, None
        parts = [b for b in (self.params.get("Q"), self.Y) if b is not None]
        inp = np.vstack(parts)
        pre = self.params["F"] @ inp + self.params["F_bias"][:, None]
        return activate(cfg.item_activation, pre), inp, pre

    def fuse_user(self, a: int) -> np.ndarray:
        return self.fuse_users()[0][:, a]

    def fuse_item(self, i: int) -> np.ndarray:
        return self.fuse_items()[0][:, i]

    def aggregate(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray | None, int]:
        """Pool every user's trusted neighbours at one layer.

        Returns the pooled matrix, the argmax source users for max pooling,
        and the number of neighbour vectors read.
        """
        cfg = self.config
        src = None
        if cfg.pooling == "average":
            agg = np.asarray(self.neighbor_mean @ h.T).T
        else:
            agg = np.zeros_like(h)
            src = np.full(h.shape, -1, dtype=np.int64)
            for a, nbrs in enumerate(self.trust_out):
                if nbrs.size:
                    block = h[:, nbrs]
                    arg = block.argmax(axis=1)
                    src[:, a] = nbrs[arg]
                    agg[:, a] = block[np.arange(h.shape[0]), arg]
        if cfg.empty_neighbor_policy == "self_copy" and self.isolated.size:
            agg[:, self.isolated] = h[:, self.isolated]
        return agg, src, self.num_edges

    def diffuse(self, h: np.ndarray, k: int, training: bool = False, update_stats: bool = True):
        """One diffusion layer: ``s(W_k [pool(h), h] + b_k)``, then batch norm if enabled.

        Returns ``(h_next, agg, pre, act, bn_cache, max_source, ops)``.
        """
        if not 0 <= k < self.config.diffusion_depth:
            raise ValueError(f"layer {k} outside 0..{self.config.diffusion_depth - 1}")
        agg, src, ops = self.aggregate(h)
        W = self.params[f"W_diff{k}"]
        pre = W @ np.vstack([agg, h]) + self.params[f"W_diff{k}_bias"][:, None]
        act = activate(self.config.layer_activations[k], pre)
        cache = None
        out = act
        if self.config.use_batchnorm:
            bn = self._bn[k]
            bn.scale = self.params[f"bn{k}_scale"]
            bn.shift = self.params[f"bn{k}_shift"]
            bn.training = training
            normed, cache = batchnorm_apply(bn, act.T, update_running=update_stats)
            out = normed.T
        return out, agg, pre, act, cache, src, ops

    def final_user_vectors(self, h_last: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``h^K_a`` plus the mean item vector over the user's training positives."""
        return h_last + np.asarray(self.history @ v.T).T

    # -- passes --------------------------------------------------------------

    def forward(self, training: bool = False, update_stats: bool = True) -> DiffNetTrace:
        """Run fusion, ``K`` diffusion layers and the prediction layer.

        ``training`` selects batch statistics for batch norm; running
        statistics are only advanced when ``update_stats`` is also true.
        """
        h0, user_in, user_pre = self.fuse_users()
        v, item_in, item_pre = self.fuse_items()
        trace = DiffNetTrace(
            u=None, v=v, version=self.version, user_in=user_in, user_pre=user_pre,  # type: ignore[arg-type]
            item_in=item_in, item_pre=item_pre, h=[h0],
        )
        h = h0
        for k in range(self.config.diffusion_depth):
            h, agg, pre, act, cache, src, ops = self.diffuse(h, k, training, update_stats)
            trace.h.append(h)
            trace.h_agg.append(agg)
            trace.diff_pre.append(pre)
            trace.diff_act.append(act)
            trace.bn_caches.append(cache)
            trace.max_source.append(src)
            trace.aggregation_ops += ops
        trace.u = self.final_user_vectors(h, v)
        return trace

    def _backward_from_vectors(self, trace: DiffNetTrace, du: np.ndarray, dv: np.ndarray) -> dict[str, np.ndarray]:
        cfg = self.config
        D = cfg.embed_dim
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}

        # u = h^K + v R^T
        dh = du
        dv = dv + np.asarray(self.history.T @ du.T).T

        for k in reversed(range(cfg.diffusion_depth)):
            dout = dh
            if cfg.use_batchnorm:
                dact, dscale, dshift = batchnorm_backward(self._bn[k], trace.bn_caches[k], dout.T)
                dout = dact.T
                grads[f"bn{k}_scale"] += dscale
                grads[f"bn{k}_shift"] += dshift
            dpre = dout * activation_grad(cfg.layer_activations[k], trace.diff_pre[k], trace.diff_act[k])
            h_prev = trace.h[k]
            grads[f"W_diff{k}"] += dpre @ np.vstack([trace.h_agg[k], h_prev]).T
            grads[f"W_diff{k}_bias"] += dpre.sum(axis=1)
            dinp = self.params[f"W_diff{k}"].T @ dpre
            dagg, dh = dinp[:D], dinp[D:].copy()
            if cfg.empty_neighbor_policy == "self_copy" and self.isolated.size:
                dh[:, self.isolated] += dagg[:, self.isolated]
                dagg = dagg.copy()
                dagg[:, self.isolated] = 0.0
            if cfg.pooling == "average":
                dh += np.asarray(self.neighbor_mean.T @ dagg.T).T
            else:
                src = trace.max_source[k]
                rows = np.broadcast_to(np.arange(D)[:, None], src.shape)
                mask = src >= 0
                np.add.at(dh, (rows[mask], src[mask]), dagg[mask])

        if cfg.user_fusion:
            dpre = dh * activation_grad(cfg.fusion_activation, trace.user_pre, trace.h[0])
            grads["W0"] += dpre @ trace.user_in.T
            grads["W0_bias"] += dpre.sum(axis=1)
            if "P" in grads:
                grads["P"] += self.params["W0"][:, self.d1 :].T @ dpre
        else:
            grads["P"] += dh

        if cfg.item_fusion:
            dpre = dv * activation_grad(cfg.item_activation, trace.item_pre, trace.v)
            grads["F"] += dpre @ trace.item_in.T
            grads["F_bias"] += dpre.sum(axis=1)
            if "Q" in grads:
                grads["Q"] += self.params["F"][:, :D].T @ dpre
        else:
            grads["Q"] += dv
        return grads
