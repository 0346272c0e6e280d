"""Flat ``key = value`` run configuration.

One :class:`RunConfig` carries every knob of a run. It serializes to a
canonical text form (sorted keys, one per line) whose SHA-256 digest is
written into results files, so equal digests mean identical configs.
Per-component seeds are derived from the single global ``seed``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from typing import Any

from .data import SplitSpec, SynthConfig
from .evaluation import EvalConfig
from .model import DiffNetConfig
from .numkernel import derive_seed
from .training import TrainConfig

MODEL_KINDS = ("diffnet", "bpr", "svdpp")
ABLATION_VARIANTS = ("full", "X=0", "Y=0", "X=Y=0", "P=0", "Q=0")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class RunConfig:
    model: str = "diffnet"
    seed: int = 0
    out_dir: str = "run"

    # data: files, or a synthetic dataset when ``ratings`` is empty
    ratings: str = ""
    trust: str = ""
    user_features: str = ""
    item_features: str = ""
    undirected_trust: bool = False
    split_manifest: str = ""
    test_fraction: float = 0.1
    validation_fraction: float = 0.09
    synth_num_users: int = 200
    synth_num_items: int = 500
    synth_avg_degree: float = 8.0
    synth_homophily: float = 0.8
    synth_latent_dim: int = 32
    synth_positives_per_user: int = 20
    synth_feature_noise: float = 1.0
    synth_communities: int = 10
    synth_community_affinity: float = 0.9

    # model
    embed_dim: int = 64
    diffusion_depth: int = 2
    pooling: str = "average"
    fusion_activation: str = "sigmoid"
    diffusion_activation: str = "relu"
    use_user_features: bool = True
    use_item_features: bool = True
    use_free_user_embed: bool = True
    use_free_item_embed: bool = True
    use_batchnorm: bool = True
    empty_neighbor_policy: str = "zero_vector"
    bypass_featureless_fusion: bool = True
    dtype: str = "float64"

    # training
    learning_rate: float = 0.001
    batch_size: int = 512
    neg_samples_per_pos: int = 10
    reg: float = 0.001
    max_epochs: int = 100
    early_stop_patience: int = 10
    negative_resampling: str = "epoch"

    # evaluation
    top_n: tuple[int, ...] = (5, 10, 15)
    num_sampled_negatives: int = 1000
    num_repetitions: int = 10
    buckets: tuple[int, ...] = (16, 64, 256)

    # ablation grid
    ablate_depths: tuple[int, ...] = (0, 1, 2, 3)
    ablate_variants: tuple[str, ...] = ABLATION_VARIANTS

    def __post_init__(self) -> None:
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model: must be one of {', '.join(MODEL_KINDS)}, got {self.model!r}")
        bad = [v for v in self.ablate_variants if v not in ABLATION_VARIANTS]
        if bad:
            raise ConfigError(f"ablate_variants: unknown variant {bad[0]!r}")
        for name, build in (
            ("split", self.split_spec),
            ("synth", self.synth_config),
            ("model", self.diffnet_config),
            ("training", self.train_config),
            ("evaluation", self.eval_config),
        ):
            try:
                build()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{name} settings: {exc}") from None

    # -- sub-configs -----------------------------------------------------------

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.test_fraction, self.validation_fraction, derive_seed(self.seed, "split"))

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_users=self.synth_num_users,
            num_items=self.synth_num_items,
            avg_degree=self.synth_avg_degree,
            homophily_strength=self.synth_homophily,
            latent_dim=self.synth_latent_dim,
            positives_per_user=self.synth_positives_per_user,
            feature_noise=self.synth_feature_noise,
            num_communities=self.synth_communities,
            community_affinity=self.synth_community_affinity,
            rng_seed=derive_seed(self.seed, "synth"),
        )

    def diffnet_config(self, **overrides: Any) -> DiffNetConfig:
        kw = dict(
            embed_dim=self.embed_dim,
            diffusion_depth=self.diffusion_depth,
            pooling=self.pooling,
            fusion_activation=self.fusion_activation,
            diffusion_activations=self.diffusion_activation,
            use_user_features=self.use_user_features,
            use_item_features=self.use_item_features,
            use_free_user_embed=self.use_free_user_embed,
            use_free_item_embed=self.use_free_item_embed,
            use_batchnorm=self.use_batchnorm,
            empty_neighbor_policy=self.empty_neighbor_policy,
            bypass_featureless_fusion=self.bypass_featureless_fusion,
            dtype=self.dtype,
        )
        kw.update(overrides)
        return DiffNetConfig(**kw)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            neg_samples_per_pos=self.neg_samples_per_pos,
            reg=self.reg,
            max_epochs=self.max_epochs,
            early_stop_patience=self.early_stop_patience,
            rng_seed=derive_seed(self.seed, "training"),
            negative_resampling=self.negative_resampling,
            val_negatives=self.num_sampled_negatives,
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            top_n=self.top_n,
            num_sampled_negatives=self.num_sampled_negatives,
            num_repetitions=self.num_repetitions,
            rng_seed=derive_seed(self.seed, "eval"),
        )

    @property
    def init_seed(self) -> int:
        return derive_seed(self.seed, "init")

    # -- text form -------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, values: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        """Build from raw string values, rejecting unknown keys."""
        known = {f.name: f for f in fields(cls)}
        parsed: dict[str, Any] = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"{key}: unknown configuration key")
            parsed[key] = _parse(key, raw, known[key].default)
        start = base if base is not None else cls()
        return dataclasses.replace(start, **parsed)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_mapping(parse_kv(text), base)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
