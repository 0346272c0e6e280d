"""Dense numeric primitives shared by the models and the training loop.

Everything here works on plain numpy arrays. Matrices follow the
"one column per entity" layout used throughout the package, so an
embedding table for ``M`` users has shape ``(D, M)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("sigmoid", "relu", "identity")


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where it must not."""


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Return ``W @ x + b``.

    ``x`` may be a single vector or a matrix with one input per column;
    the bias is broadcast across columns.
    """
    W = np.asarray(W)
    x = np.asarray(x)
    if W.ndim != 2 or W.shape[1] != x.shape[0]:
        raise ValueError(f"affine: W has shape {W.shape}, input has {x.shape[0]} rows")
    y = W @ x
    if b is not None:
        b = np.asarray(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"affine: bias shape {b.shape} != ({W.shape[0]},)")
        y = y + (b if x.ndim == 1 else b[:, None])
    return y


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable ``ln(sigmoid(x))``."""
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x)


def activate(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "identity":
        return np.array(x, copy=True)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(kind: str, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Elementwise derivative of ``activate(kind, .)`` at the pre-activation ``x``.

    ``y`` is the already computed activation output, if the caller has it.
    ReLU uses 0 as its subgradient at exactly 0.
    """
    if kind == "sigmoid":
        s = sigmoid(x) if y is None else y
        return s * (1.0 - s)
    if kind == "relu":
        return (np.asarray(x) > 0).astype(np.result_type(x, np.float32))
    if kind == "identity":
        return np.ones_like(x, dtype=np.result_type(x, np.float32))
    raise ValueError(f"unknown activation {kind!r}")


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or Inf")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> dict[str, np.ndarray]:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Parameters without an entry in ``grads`` are left alone (their moments
    are not advanced either). If any gradient is non-finite nothing is
    modified and :class:`NonFiniteError` is raised.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        check_finite(f"gradient {name}", g)

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-feature batch normalization parameters and running statistics.

    ``scale`` and ``shift`` are trainable; the running statistics are not.
    """

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    training: bool = True
    scale: np.ndarray = None  # type: ignore[assignment]
    shift: np.ndarray = None  # type: ignore[assignment]
    running_mean: np.ndarray = None  # type: ignore[assignment]
    running_var: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        n = self.num_features
        if self.scale is None:
            self.scale = np.ones(n)
        if self.shift is None:
            self.shift = np.zeros(n)
        if self.running_mean is None:
            self.running_mean = np.zeros(n)
        if self.running_var is None:
            self.running_var = np.ones(n)


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    batch_stats: bool


def batchnorm_apply(
    state: BatchNormState, batch: np.ndarray, *, update_running: bool = True
) -> tuple[np.ndarray, BatchNormCache]:
    """Normalize ``batch`` (rows are samples, columns are features).

    In training mode the batch statistics are used and, unless
    ``update_running`` is false, the running statistics move toward them by
    ``momentum``. In inference mode only the running statistics are used.
    Returns the output together with a cache for :func:`batchnorm_backward`.
    """
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != state.num_features:
        raise ValueError(f"batchnorm: expected (n, {state.num_features}) input, got {batch.shape}")
    use_batch = state.training
    if use_batch and batch.shape[0] < 2:
        logger.warning("batchnorm: training batch of %d row(s); using running statistics", batch.shape[0])
        use_batch = False

    if use_batch:
        mean = batch.mean(axis=0)
        var = batch.var(axis=0)
        if update_running:
            n = batch.shape[0]
            m = state.momentum
            state.running_mean = (1.0 - m) * state.running_mean + m * mean
            state.running_var = (1.0 - m) * state.running_var + m * var * (n / (n - 1))
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    x_hat = (batch - mean) * inv_std
    out = x_hat * state.scale + state.shift
    return out, BatchNormCache(x_hat=x_hat, inv_std=inv_std, batch_stats=use_batch)


def batchnorm_backward(
    state: BatchNormState, cache: BatchNormCache, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(d_input, d_scale, d_shift)`` for a previous :func:`batchnorm_apply`."""
    d_shift = dout.sum(axis=0)
    d_scale = (dout * cache.x_hat).sum(axis=0)
    dx_hat = dout * state.scale
    if not cache.batch_stats:
        return dx_hat * cache.inv_std, d_scale, d_shift
    n = dout.shape[0]
    dx = (cache.inv_std / n) * (
        n * dx_hat - dx_hat.sum(axis=0) - cache.x_hat * (dx_hat * cache.x_hat).sum(axis=0)
    )
    return dx, d_scale, d_shift


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


def derive_seed(seed: int, *names: str | int) -> int:
    """Deterministic 63-bit sub-seed for a named random stream."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        if isinstance(n, str):
            raw = n.encode("utf-8")
            words.append(len(raw))
            words.extend(raw)
        else:
            words.append(int(n))
    ss = np.random.SeedSequence(words)
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(seed: int, *names: str | int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
