"""Command-line entry points: ``train``, ``evaluate``, ``ablate``, ``recommend``,
``synth`` and ``dump-checkpoint``.

Every command reads a flat ``key = value`` config file; any key can be
overridden with ``--key value``. Set ``DIFFNET_LOG_LEVEL`` (e.g. ``INFO``)
for progress output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import BPRMF, SVDPP
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    dump,
    load_checkpoint,
    load_model_tensors,
    model_tensors,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, parse_kv
from .data import (
    DataFormatError,
    Dataset,
    bucket_labels,
    bucket_users,
    load_dataset,
    read_split_manifest,
    save_dataset,
    split,
    synthesize,
    write_split_manifest,
)
from .evaluation import RankingResult, evaluate, write_results
from .model import DiffNet, RankingModel
from .numkernel import AdamState
from .training import EpochRecord, TrainingDiverged, TrainState, train

logger = logging.getLogger("diffnet")

VARIANT_FLAGS = {
    "full": {},
    "X=0": {"use_user_features": False},
    "Y=0": {"use_item_features": False},
    "X=Y=0": {"use_user_features": False, "use_item_features": False},
    "P=0": {"use_free_user_embed": False},
    "Q=0": {"use_free_item_embed": False},
}


@dataclass
class RunData:
    full: Dataset
    train: Dataset
    validation: Dataset
    test: Dataset


def load_run_data(cfg: RunConfig) -> RunData:
    """Load (or synthesize) the dataset and split it as the config says."""
    if cfg.ratings:
        full = load_dataset(
            cfg.ratings,
            cfg.trust,
            cfg.user_features or None,
            cfg.item_features or None,
            undirected_trust=cfg.undirected_trust,
        )
    else:
        full = synthesize(cfg.synth_config())
    if cfg.split_manifest:
        parts = read_split_manifest(cfg.split_manifest, full)
    else:
        parts = split(full, cfg.split_spec())
    return RunData(full, *parts)


def build_model(cfg: RunConfig, train_data: Dataset, **overrides) -> RankingModel:
    if cfg.model == "bpr":
        return BPRMF(train_data, cfg.embed_dim, cfg.init_seed, dtype=cfg.dtype)
    if cfg.model == "svdpp":
        return SVDPP(train_data, cfg.embed_dim, cfg.init_seed, dtype=cfg.dtype)
    flags = dict(overrides)
    if train_data.user_features is None and flags.get("use_user_features", cfg.use_user_features):
        logger.warning("dataset has no user features; disabling use_user_features")
        flags["use_user_features"] = False
    if train_data.item_features is None and flags.get("use_item_features", cfg.use_item_features):
        logger.warning("dataset has no item features; disabling use_item_features")
        flags["use_item_features"] = False
    return DiffNet(cfg.diffnet_config(**flags), train_data, cfg.init_seed)


# ---------------------------------------------------------------------------
# Training state <-> checkpoint
# ---------------------------------------------------------------------------


def _blob(cfg: RunConfig, meta: dict[str, object]) -> str:
    return cfg.to_text() + "".join(f"state.{k} = {v!r}\n" if isinstance(v, float) else f"state.{k} = {v}\n" for k, v in meta.items())


def model_checkpoint(cfg: RunConfig, model: RankingModel, epoch: int) -> Checkpoint:
    return Checkpoint(kind=model.kind, blob=_blob(cfg, {"epoch": epoch}), tensors=model_tensors(model))


def state_checkpoint(cfg: RunConfig, model: RankingModel, state: TrainState) -> Checkpoint:
    tensors = model_tensors(model)
    for name, m in state.adam.m.items():
        tensors[f"adam/m/{name}"] = m
        tensors[f"adam/v/{name}"] = state.adam.v[name]
    for name, v in (state.best_params or {}).items():
        tensors[f"best/param/{name}"] = v
    for k, (mean, var) in enumerate(state.best_bn or []):
        tensors[f"best/bn/{k}/running_mean"] = mean
        tensors[f"best/bn/{k}/running_var"] = var
    meta = {
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "best_score": float(state.best_score),
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
        "stopped": int(state.stopped),
    }
    return Checkpoint(kind=model.kind, blob=_blob(cfg, meta), tensors=tensors)


def restore_state(ckpt: Checkpoint, model: RankingModel, cfg: RunConfig, log: list[EpochRecord]) -> TrainState:
    load_model_tensors(model, ckpt.tensors)
    meta = ckpt.meta
    adam = AdamState(learning_rate=cfg.learning_rate, step=int(meta["adam_step"]))
    for name in model.params:
        if f"adam/m/{name}" in ckpt.tensors:
            adam.m[name] = ckpt.tensors[f"adam/m/{name}"].astype(model.params[name].dtype)
            adam.v[name] = ckpt.tensors[f"adam/v/{name}"].astype(model.params[name].dtype)
    best = {k[len("best/param/") :]: v for k, v in ckpt.tensors.items() if k.startswith("best/param/")}
    best_bn = [
        (ckpt.tensors[f"best/bn/{k}/running_mean"], ckpt.tensors[f"best/bn/{k}/running_var"])
        for k in range(len(model.bn_states))
        if f"best/bn/{k}/running_mean" in ckpt.tensors
    ]
    return TrainState(
        adam=adam,
        epoch=int(meta["epoch"]),
        best_score=float(meta["best_score"]),
        best_epoch=int(meta["best_epoch"]),
        bad_epochs=int(meta["bad_epochs"]),
        best_params={k: v.astype(model.params[k].dtype) for k, v in best.items()} or None,
        best_bn=best_bn or None,
        log=log,
        stopped=bool(int(meta["stopped"])),
    )


def read_log(path: Path) -> list[EpochRecord]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        e, loss, hr, nd = line.split("\t")
        out.append(EpochRecord(int(e), float(loss), float(hr), float(nd)))
    return out


# ---------------------------------------------------------------------------
# Commands as library functions
# ---------------------------------------------------------------------------


def run_train(cfg: RunConfig, resume: bool = False) -> tuple[RankingModel, TrainState, RunData]:
    """Train per ``cfg`` and write outputs under ``cfg.out_dir``.

    With ``resume``, training continues from ``state.bin`` and appends to
    ``train.log``; the config must match the stored one except for
    ``max_epochs``.

    Files: ``config.txt``, ``split.tsv``, ``train.log``, ``state.bin``
    (resumable latest state) and ``checkpoint.bin`` (best validation).
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_run_data(cfg)
    model = build_model(cfg, data.train)
    log_path, state_path = out / "train.log", out / "state.bin"

    state = None
    if resume and state_path.exists():
        ckpt = load_checkpoint(state_path)
        stored = RunConfig.from_text(ckpt.config_text)
        # only the epoch budget may change between a run and its continuation
        if stored.replace(max_epochs=cfg.max_epochs) != cfg:
            raise ConfigError("resume: config differs from the one stored in state.bin")
        state = restore_state(ckpt, model, cfg, read_log(log_path))
        logger.info("resuming at epoch %d", state.epoch)
    else:
        log_path.write_text("", encoding="utf-8")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    write_split_manifest(out / "split.tsv", data.train, data.validation, data.test)

    def on_epoch(st: TrainState) -> None:
        save_checkpoint(state_path, state_checkpoint(cfg, model, st))

    state = train(
        model,
        data.train,
        data.validation,
        cfg.train_config(),
        state=state,
        log_path=log_path,
        diagnostic_path=out / "diagnostic.npz",
        on_epoch=on_epoch,
    )
    save_checkpoint(out / "checkpoint.bin", model_checkpoint(cfg, model, state.best_epoch))
    return model, state, data


def model_from_checkpoint(ckpt: Checkpoint, overrides: dict[str, str] | None = None):
    """Rebuild config, data and model from a checkpoint (dataset paths may be overridden)."""
    cfg = RunConfig.from_text(ckpt.config_text)
    if overrides:
        cfg = RunConfig.from_mapping(overrides, base=cfg)
    if cfg.model != ckpt.kind:
        raise CheckpointError(f"checkpoint holds a {ckpt.kind!r} model but config says {cfg.model!r}")
    data = load_run_data(cfg)
    model = build_model(cfg, data.train)
    load_model_tensors(model, ckpt.tensors)
    return cfg, data, model


def run_evaluate(cfg: RunConfig, model, data: RunData) -> RankingResult:
    return evaluate(
        model,
        data.test,
        cfg.eval_config(),
        exclude=(data.train, data.validation),
        bucket_of=bucket_users(data.train, cfg.buckets),
        bucket_names=bucket_labels(cfg.buckets),
    )


def _cutoff(cfg: RunConfig) -> int:
    return 10 if 10 in cfg.top_n else cfg.top_n[0]


def run_ablation(cfg: RunConfig) -> list[dict[str, object]]:
    """Train and evaluate DiffNet over ``ablate_variants`` x ``ablate_depths``.

    Each row carries HR/NDCG at N=10 (or the first configured cutoff) and
    the relative change against the full model at the configured depth.
    """
    cfg = cfg.replace(model="diffnet")
    data = load_run_data(cfg)
    n = _cutoff(cfg)
    rows: list[dict[str, object]] = []
    for variant in cfg.ablate_variants:
        for depth in cfg.ablate_depths:
            row: dict[str, object] = {"variant": variant, "K": depth}
            try:
                cell = cfg.replace(diffusion_depth=depth)
                model = build_model(cell, data.train, **VARIANT_FLAGS[variant])
                train(model, data.train, data.validation, cell.train_config())
                res = run_evaluate(cell, model, data)
                row.update(hr=res.hr_at(n), ndcg=res.ndcg_at(n), status="ok")
            except Exception as exc:  # a failed cell must not stop the grid
                logger.warning("ablation cell %s K=%d failed: %s", variant, depth, exc)
                row.update(hr=float("nan"), ndcg=float("nan"), status=f"error: {exc}")
            rows.append(row)

    ok = [r for r in rows if r["status"] == "ok" and r["variant"] == "full"]
    ref = next((r for r in ok if r["K"] == cfg.diffusion_depth), ok[0] if ok else None)
    for r in rows:
        for m in ("hr", "ndcg"):
            base = ref[m] if ref is not None else float("nan")
            r[f"{m}_change"] = (r[m] - base) / base if base and np.isfinite(base) else float("nan")
    return rows


def write_ablation(path: str | os.PathLike, rows: Sequence[dict], cfg: RunConfig) -> None:
    n = _cutoff(cfg)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_digest\t{cfg.digest()}\n")
        fh.write(f"variant\tK\thr@{n}\tndcg@{n}\thr_change\tndcg_change\tstatus\n")
        for r in rows:
            fh.write(
                f"{r['variant']}\t{r['K']}\t{r['hr']!r}\t{r['ndcg']!r}\t"
                f"{r['hr_change']!r}\t{r['ndcg_change']!r}\t{r['status']}\n"
            )


def recommend(scores: np.ndarray, rated: np.ndarray, top_n: int) -> list[tuple[int, float]]:
    """Top ``top_n`` items outside ``rated``, highest score first, ties by item id."""
    if top_n <= 0:
        return []
    candidates = np.setdiff1d(np.arange(scores.size), rated)
    if candidates.size == 0:
        logger.warning("user has rated every item; nothing to recommend")
        return []
    order = np.lexsort((candidates, -scores[candidates]))[:top_n]
    return [(int(candidates[k]), float(scores[candidates[k]])) for k in order]


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------


def _overrides(tokens: Sequence[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ConfigError(f"{key}: missing value") from None
        out[key] = value
    return out


def _config(path: str | None, extra: Sequence[str]) -> RunConfig:
    values = parse_kv(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update(_overrides(extra))
    return RunConfig.from_mapping(values)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffnet", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("config", nargs="?")
    t.add_argument("--resume", action="store_true", help="continue from <out_dir>/state.bin")

    e = sub.add_parser("evaluate", help="sampled top-N evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--output", help="results file (default: next to the checkpoint)")

    a = sub.add_parser("ablate", help="depth x fusion-input ablation grid")
    a.add_argument("config", nargs="?")
    a.add_argument("--output")

    r = sub.add_parser("recommend", help="top-N unrated items for one user")
    r.add_argument("checkpoint")
    r.add_argument("--user", required=True)
    r.add_argument("--top-n", type=int, default=10)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("config", nargs="?")
    s.add_argument("--output", help="directory (default: <out_dir>/data)")

    d = sub.add_parser("dump-checkpoint", help="print a checkpoint's header and tensors")
    d.add_argument("checkpoint")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("DIFFNET_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args, extra = _build_parser().parse_known_args(argv)
    try:
        if args.command == "train":
            cfg = _config(args.config, extra)
            _, state, _ = run_train(cfg, resume=args.resume)
            print(f"trained {state.epoch} epoch(s); best epoch {state.best_epoch}; "
                  f"checkpoint {Path(cfg.out_dir) / 'checkpoint.bin'}")
        elif args.command == "evaluate":
            ckpt = load_checkpoint(args.checkpoint)
            cfg, data, model = model_from_checkpoint(ckpt, _overrides(extra))
            res = run_evaluate(cfg, model, data)
            out = args.output or str(Path(args.checkpoint).with_name("results.tsv"))
            write_results(out, res.rows(cfg.model), cfg.digest())
            for n in cfg.top_n:
                print(f"HR@{n}\t{res.hr_at(n):.4f}\tNDCG@{n}\t{res.ndcg_at(n):.4f}")
        elif args.command == "ablate":
            cfg = _config(args.config, extra)
            rows = run_ablation(cfg)
            out = args.output or str(Path(cfg.out_dir) / "ablation.tsv")
            Path(out).parent.mkdir(parents=True, exist_ok=True)
            write_ablation(out, rows, cfg)
            print(Path(out).read_text(encoding="utf-8"), end="")
        elif args.command == "recommend":
            ckpt = load_checkpoint(args.checkpoint)
            cfg, data, model = model_from_checkpoint(ckpt, _overrides(extra))
            try:
                a = data.full.user_ids.index(args.user)
            except ValueError:
                raise ConfigError(f"user: unknown user id {args.user!r}") from None
            scores = model.score_users(np.array([a]))[0]
            for item, score in recommend(scores, data.full.interactions[a], args.top_n):
                print(f"{data.full.item_ids[item]}\t{score!r}")
        elif args.command == "synth":
            cfg = _config(args.config, extra)
            out = args.output or str(Path(cfg.out_dir) / "data")
            paths = save_dataset(synthesize(cfg.synth_config()), out)
            for k, v in paths.items():
                print(f"{k}\t{v}")
        elif args.command == "dump-checkpoint":
            print(dump(load_checkpoint(args.checkpoint)), end="")
    except (ConfigError, DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged ({exc}); see diagnostic.npz", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
