"""Independent reference implementations used by the tests.

Everything here is written with per-user loops over plain vectors and
shares no code with the package beyond reading ``model.params``.
"""

import math

import numpy as np
from hypothesis import strategies as st

from diffnet.data import Dataset
from diffnet.model import DiffNet, DiffNetConfig
from diffnet.training import pairwise_loss


def _act(kind, x):
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if kind == "relu":
        return np.where(x > 0, x, 0.0)
    return x


def forward_scores(model, ds: Dataset) -> np.ndarray:
    """Score matrix (M, N) of a DiffNet, evaluated one user and item at a time.

    Batch norm, when present, is taken in inference mode.
    """
    cfg, p = model.config, model.params
    M, N = ds.num_users, ds.num_items

    h = []
    for a in range(M):
        if not (cfg.use_user_features or not cfg.bypass_featureless_fusion):
            h.append(p["P"][:, a].copy())
            continue
        parts = []
        if cfg.use_user_features:
            parts.append(ds.user_features[:, a])
        if cfg.use_free_user_embed:
            parts.append(p["P"][:, a])
        h.append(_act(cfg.fusion_activation, p["W0"] @ np.concatenate(parts) + p["W0_bias"]))

    v = []
    item_kind = cfg.item_fusion_activation or cfg.fusion_activation
    for i in range(N):
        if not (cfg.use_item_features or not cfg.bypass_featureless_fusion):
            v.append(p["Q"][:, i].copy())
            continue
        parts = []
        if cfg.use_free_item_embed:
            parts.append(p["Q"][:, i])
        if cfg.use_item_features:
            parts.append(ds.item_features[:, i])
        v.append(_act(item_kind, p["F"] @ np.concatenate(parts) + p["F_bias"]))

    acts = cfg.diffusion_activations
    for k in range(cfg.diffusion_depth):
        kind = acts if isinstance(acts, str) else acts[k]
        nxt = []
        for a in range(M):
            nbrs = list(ds.trust_out[a])
            if not nbrs:
                pooled = h[a].copy() if cfg.empty_neighbor_policy == "self_copy" else np.zeros_like(h[a])
            elif cfg.pooling == "average":
                pooled = sum(h[b] for b in nbrs) / len(nbrs)
            else:
                pooled = np.array([max(h[b][d] for b in nbrs) for d in range(len(h[a]))])
            out = _act(kind, p[f"W_diff{k}"] @ np.concatenate([pooled, h[a]]) + p[f"W_diff{k}_bias"])
            if cfg.use_batchnorm:
                bn = model.bn_states[k]
                out = (out - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
                out = out * p[f"bn{k}_scale"] + p[f"bn{k}_shift"]
            nxt.append(out)
        h = nxt

    scores = np.zeros((M, N))
    for a in range(M):
        u = h[a].copy()
        rated = list(ds.interactions[a])
        if rated:
            u = u + sum(v[i] for i in rated) / len(rated)
        for i in range(N):
            scores[a, i] = float(np.dot(v[i], u))
    return scores


def brute_force_metrics(scores: dict, positives, negatives, n: int) -> tuple[float, float]:
    """HR numerator and NDCG for one user from an explicit ranked list."""
    candidates = list(positives) + list(negatives)
    ranked = sorted(candidates, key=lambda item: (-scores[item], item))
    pos = set(positives)
    gains = [1.0 / math.log2(r + 1) for r, item in enumerate(ranked[:n], start=1) if item in pos]
    idcg = math.fsum(1.0 / math.log2(r + 1) for r in range(1, min(len(pos), n) + 1))
    return float(len(gains)), math.fsum(gains) / idcg


def objective(model, users, pos, neg, reg, training=False):
    """Total pairwise objective for fixed triples."""
    trace = model.forward(training=training, update_stats=False)
    s_pos = model.pair_scores(trace, users, pos)
    s_neg = model.pair_scores(trace, users, neg)
    return pairwise_loss(s_pos, s_neg, model.params, reg, model.regularized)[0]


def analytic_gradients(model, users, pos, neg, reg, training=False):
    trace = model.forward(training=training, update_stats=False)
    both = np.concatenate([users, users])
    items = np.concatenate([pos, neg])
    scores = model.pair_scores(trace, both, items)
    _, ddiff = pairwise_loss(scores[: users.size], scores[users.size :])
    grads = model.backward(trace, both, items, np.concatenate([ddiff, -ddiff]))
    for name in model.regularized:
        grads[name] = grads[name] + 2.0 * reg * model.params[name]
    return grads


def finite_difference_errors(model, users, pos, neg, reg, h=1e-5, training=False, names=None):
    """Worst relative/absolute mismatch per parameter between analytic and central differences."""
    grads = analytic_gradients(model, users, pos, neg, reg, training)
    report = {}
    for name in names or model.params:
        param = model.params[name]
        fd = np.zeros_like(param)
        for idx in np.ndindex(*param.shape):
            old = param[idx]
            param[idx] = old + h
            model.mark_updated()
            up = objective(model, users, pos, neg, reg, training)
            param[idx] = old - h
            model.mark_updated()
            down = objective(model, users, pos, neg, reg, training)
            param[idx] = old
            model.mark_updated()
            fd[idx] = (up - down) / (2 * h)
        diff = np.abs(grads[name] - fd)
        scale = np.maximum(np.abs(fd), np.abs(grads[name]))
        rel = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
        # coordinates near zero are judged on absolute error
        near_zero = scale < 1e-6
        ok = np.where(near_zero, diff <= 1e-8, rel <= 1e-4)
        report[name] = (bool(ok.all()), float(np.where(near_zero, 0.0, rel).max(initial=0.0)), float(diff.max(initial=0.0)))
    return report


def random_dataset(rng, num_users, num_items, d1=0, d2=0, edge_prob=0.4, pos_prob=0.4) -> Dataset:
    users, items, src, dst = [], [], [], []
    for a in range(num_users):
        for i in range(num_items):
            if rng.random() < pos_prob:
                users.append(a)
                items.append(i)
        for b in range(num_users):
            if a != b and rng.random() < edge_prob:
                src.append(a)
                dst.append(b)
    return Dataset.from_pairs(
        num_users, num_items, users, items, src, dst,
        user_features=rng.standard_normal((d1, num_users)) if d1 else None,
        item_features=rng.standard_normal((d2, num_items)) if d2 else None,
    )


def tiny_dataset(seed=0) -> Dataset:
    """The 20-user fixture: 30 items, 5 positives per user, a sparse trust graph."""
    from diffnet.data import SynthConfig, synthesize

    return synthesize(
        SynthConfig(num_users=20, num_items=30, avg_degree=3.0, latent_dim=4, positives_per_user=5, rng_seed=seed)
    )


@st.composite
def instances(draw):
    """A random small dataset and a DiffNet over it with randomized switches and statistics."""
    M = draw(st.integers(1, 5))
    N = draw(st.integers(1, 6))
    d1 = draw(st.sampled_from([0, 0, 2, 3]))
    d2 = draw(st.sampled_from([0, 0, 1, 3]))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, M, N, d1, d2, edge_prob=draw(st.floats(0, 1)), pos_prob=draw(st.floats(0, 1)))
    K = draw(st.integers(0, 3))
    acts = tuple(draw(st.sampled_from(["relu", "sigmoid", "identity"])) for _ in range(K))
    use_uf = d1 > 0 and draw(st.booleans())
    use_if = d2 > 0 and draw(st.booleans())
    cfg = DiffNetConfig(
        embed_dim=draw(st.integers(1, 4)),
        diffusion_depth=K,
        pooling=draw(st.sampled_from(["average", "max"])),
        fusion_activation=draw(st.sampled_from(["sigmoid", "identity", "relu"])),
        diffusion_activations=acts,
        use_user_features=use_uf,
        use_item_features=use_if,
        use_free_user_embed=(not use_uf) or draw(st.booleans()),
        use_free_item_embed=(not use_if) or draw(st.booleans()),
        use_batchnorm=draw(st.booleans()),
        empty_neighbor_policy=draw(st.sampled_from(["zero_vector", "self_copy"])),
        bypass_featureless_fusion=draw(st.booleans()),
        init_scale=draw(st.sampled_from([None, 1.0])),
    )
    model = DiffNet(cfg, ds, rng_seed=seed)
    for k, bn in enumerate(model.bn_states):
        bn.running_mean = rng.standard_normal(cfg.embed_dim)
        bn.running_var = rng.uniform(0.1, 3.0, cfg.embed_dim)
        model.params[f"bn{k}_scale"][...] = rng.standard_normal(cfg.embed_dim)
        model.params[f"bn{k}_shift"][...] = rng.standard_normal(cfg.embed_dim)
    for name, value in model.params.items():
        if name.endswith("_bias"):
            value[...] = rng.standard_normal(value.shape)
    model.mark_updated()
    return ds, model
