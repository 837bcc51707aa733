"""Command-line front end: ``python -m h2rec <command> ...``.

Every command writes into an output directory together with a
``manifest.json`` (config hash, seed, artifact checksums). Failures exit
nonzero with a single ``error: <command>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import (
    DataError,
    leave_one_out_split,
    load_interactions,
    load_split,
    popularity_partition,
    save_split,
    synthesize_dataset,
    write_clusters,
    write_interactions,
    write_remap,
)
from .evaluation import MetricsReport, breakdown_csv, evaluate, format_table, group_breakdown, model_scorer
from .quantizer import (
    MECHANISMS,
    QuantizerError,
    RqVae,
    RqVaeConfig,
    RqVaeDivergence,
    assign_sids,
    collision_report,
    load_codebooks,
    save_codebooks,
    train_pq,
    train_rqvae,
    train_vq,
)
from .semantics import SemanticFormatError, load_semantic_matrix, load_sids, save_semantic_matrix, save_sids
from .trainer import ABLATIONS, ConfigError, TrainConfig, Trainer, TrainingDiverged, init_model, load_checkpoint

log = logging.getLogger("h2rec")

SYNTH_DEFAULTS = {
    "n_users": 2000, "n_items": 1000, "zipf_s": 1.2, "n_clusters": 20,
    "avg_len": 12.0, "d_sem": 64, "noise": 0.1, "p_stay": 0.8, "seed": 42,
}

EXPECTED_ERRORS = (
    DataError, ConfigError, QuantizerError, SemanticFormatError, RqVaeDivergence,
    TrainingDiverged, FileNotFoundError, NotADirectoryError, ValueError, KeyError, OSError,
)


class CliError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _write_json(path: Path, obj) -> Path:
    return _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_manifest(out: Path, command: str, artifacts: Sequence[Path], seed=None, config_hash=None, extra=None):
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": config_hash,
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    if extra:
        manifest.update(extra)
    _write_json(out / "manifest.json", manifest)


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(f"missing {what}: {path}")
    return path


def _env_seed(default: int) -> int:
    raw = os.environ.get("H2REC_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"H2REC_SEED must be an integer, got {raw!r}") from None


def _apply_threads() -> None:
    raw = os.environ.get("H2REC_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise CliError(f"H2REC_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise CliError("H2REC_THREADS must be >= 1")
        torch.set_num_threads(n)


def _partition_csv(split) -> str:
    part = popularity_partition(split)
    bucket = part.bucket_of()
    lines = ["item,count,head,bucket"]
    for i in range(split.n_items):
        lines.append(f"{i},{int(part.counts[i])},{int(part.is_head[i])},{int(bucket[i]) + 1}")
    return "\n".join(lines) + "\n"


def _write_split_artifacts(out: Path, split) -> list[Path]:
    save_split(split, out / "split.npz")
    part = _write_text(out / "partition.csv", _partition_csv(split))
    return [out / "split.npz", part]


def variant_name(cfg: TrainConfig) -> str:
    on = [name for name in ABLATIONS if getattr(cfg, name)]
    return "+".join(on) if on else "full"


# ------------------------------------------------------------------ config merge

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field; unset flags leave the config file value alone."""
    g = p.add_argument_group("training config (overrides --config)")
    for f in fields(TrainConfig):
        flag = "--" + f.name
        if f.type in (bool, "bool"):
            g.add_argument(flag, dest=f"cfg_{f.name}", action="store_const", const=True, default=None)
        else:
            kind = {"int": int, "float": float}.get(f.type if isinstance(f.type, str) else f.type.__name__, str)
            g.add_argument(flag, dest=f"cfg_{f.name}", type=kind, default=None)


def _load_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        path = _require(args.config, "config file")
        try:
            with open(path, encoding="utf-8") as fh:
                base = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(base, dict):
            raise CliError(f"{path}: config must be a JSON object")
    cfg = TrainConfig.from_dict(base)
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}")
        for f in fields(TrainConfig)
        if getattr(args, f"cfg_{f.name}", None) is not None
    }
    cfg = replace(cfg, **overrides)
    seed = _env_seed(cfg.seed)
    return replace(cfg, seed=seed).validate()


def _load_training_inputs(data_dir: Path, sids_path, emb_path, codebooks_path):
    split = load_split(_require(data_dir / "split.npz", "split artifact"))
    sids = load_sids(_require(sids_path, "SID file"))
    emb = Path(emb_path) if emb_path else data_dir / "semantic.semb"
    semantic = load_semantic_matrix(_require(emb, "semantic matrix"), n_items=split.n_items)
    cb_path = Path(codebooks_path) if codebooks_path else Path(sids_path).parent / "codebooks.scbk"
    codebooks = None
    if cb_path.exists():
        cb = load_codebooks(cb_path)
        codebooks = cb.to_codebooks() if isinstance(cb, RqVae) else cb
    elif codebooks_path:
        raise CliError(f"missing codebooks: {cb_path}")
    return split, semantic, sids, codebooks


def _train_one(cfg: TrainConfig, split, semantic, sids, codebooks, out: Path) -> tuple[Trainer, list[Path]]:
    torch.manual_seed(cfg.seed)
    model = init_model(split, semantic, sids, codebooks, cfg)
    trainer = Trainer(model, split, cfg, np.random.default_rng(cfg.seed))
    trainer.fit()
    out.mkdir(parents=True, exist_ok=True)
    arts = [
        _write_text(out / "config.json", cfg.to_json() + "\n"),
        _write_text(out / "train_steps.csv", trainer.log.steps_csv()),
        _write_json(out / "train_epochs.json", {
            "epochs": trainer.log.epochs,
            "best_epoch": trainer.log.best_epoch,
            "best_val_ndcg_at_10": trainer.log.best_ndcg,
        }),
    ]
    trainer.save_checkpoint(out / "model.h2ck")
    arts.append(out / "model.h2ck")
    return trainer, arts


def _evaluate_model(model, split, cfg: TrainConfig, negatives: Optional[int], seed: int) -> MetricsReport:
    part = popularity_partition(split)
    return evaluate(model_scorer(model), split, part, negatives, seed=seed, role="test", max_len=cfg.max_len)


def _write_metrics(out: Path, report: MetricsReport, cfg: TrainConfig) -> list[Path]:
    payload = report.to_dict()
    payload["variant"] = variant_name(cfg)
    payload["config_hash"] = cfg.config_hash()
    return [_write_json(out / "metrics.json", payload), _write_text(out / "metrics.csv", report.to_csv())]


# ------------------------------------------------------------------ commands

def cmd_prepare(args) -> None:
    src = _require(args.interactions, "interactions file")
    out = Path(args.out)
    ds = load_interactions(src, min_len=args.min_len)
    split = leave_one_out_split(ds)
    out.mkdir(parents=True, exist_ok=True)
    arts = _write_split_artifacts(out, split)
    write_remap(ds, out / "item_remap.tsv")
    arts.append(out / "item_remap.tsv")
    if args.emb:
        semantic = load_semantic_matrix(_require(args.emb, "semantic matrix"), n_items=ds.n_items)
        save_semantic_matrix(semantic, out / "semantic.semb")
        arts.append(out / "semantic.semb")
    _write_manifest(out, "prepare", arts, extra={"n_users": ds.n_users, "n_items": ds.n_items})
    print(f"prepared {ds.n_users} users, {ds.n_items} items -> {out}")


def cmd_synth(args) -> None:
    params = dict(SYNTH_DEFAULTS)
    if args.config:
        path = _require(args.config, "synth config")
        with open(path, encoding="utf-8") as fh:
            given = json.load(fh)
        unknown = sorted(set(given) - set(SYNTH_DEFAULTS))
        if unknown:
            raise CliError(f"{path}: unknown synth keys: {', '.join(unknown)}")
        params.update(given)
    if args.seed is not None:
        params["seed"] = args.seed
    params["seed"] = _env_seed(params["seed"])
    out = Path(args.out)
    seed = params.pop("seed")
    ds, semantic, truth = synthesize_dataset(rng=np.random.default_rng(seed), **params)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(ds, out / "interactions.tsv")
    save_semantic_matrix(semantic, out / "semantic.semb")
    write_clusters(truth, out / "clusters.tsv")
    arts = [out / "interactions.tsv", out / "semantic.semb", out / "clusters.tsv"]
    arts += _write_split_artifacts(out, leave_one_out_split(ds))
    arts.append(_write_json(out / "synth_config.json", {**params, "seed": seed}))
    _write_manifest(out, "synth", arts, seed=seed)
    print(f"synthesized {ds.n_users} users, {ds.n_items} items -> {out}")


def cmd_train_quantizer(args) -> None:
    semantic = load_semantic_matrix(_require(args.emb, "semantic matrix"))
    out = Path(args.out)
    seed = _env_seed(args.seed)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    if args.mech == "rq":
        model = train_rqvae(semantic, args.L, args.K, RqVaeConfig(epochs=args.epochs), rng)
    elif args.mech == "vq":
        if args.L != 1:
            raise CliError("vq uses a single codebook; pass --L 1")
        model = train_vq(semantic, args.K, rng)
    else:
        model = train_pq(semantic, args.L, args.K, rng)
    assignment = assign_sids(model, semantic, args.mech)
    out.mkdir(parents=True, exist_ok=True)
    save_codebooks(model, out / "codebooks.scbk")
    save_sids(assignment, out / "sids.tsv")
    report = _collision_csv(assignment)
    arts = [out / "codebooks.scbk", out / "sids.tsv", _write_text(out / "collision.csv", report)]
    _write_manifest(out, "train-quantizer", arts, seed=seed, extra={"mech": args.mech, "L": args.L, "K": args.K})
    print(report, end="")


def _collision_csv(assignment) -> str:
    return "metric,value\n" + "".join(f"{k},{v:.6f}\n" for k, v in collision_report(assignment))


def cmd_assign_sids(args) -> None:
    cb = load_codebooks(_require(args.codebooks, "codebooks"))
    semantic = load_semantic_matrix(_require(args.emb, "semantic matrix"))
    mech = "rq" if isinstance(cb, RqVae) else cb.mechanism
    assignment = assign_sids(cb, semantic, mech)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_sids(assignment, out / "sids.tsv")
    report = _collision_csv(assignment)
    arts = [out / "sids.tsv", _write_text(out / "collision.csv", report)]
    _write_manifest(out, "assign-sids", arts, extra={"mech": mech})
    print(report, end="")


def cmd_train(args) -> None:
    cfg = _load_config(args)
    data_dir = _require(args.data, "data directory")
    split, semantic, sids, codebooks = _load_training_inputs(data_dir, args.sids, args.emb, args.codebooks)
    out = Path(args.out)
    trainer, arts = _train_one(cfg, split, semantic, sids, codebooks, out)
    _write_manifest(out, "train", arts, seed=cfg.seed, config_hash=cfg.config_hash())
    print(f"best epoch {trainer.log.best_epoch} val N@10 {trainer.log.best_ndcg:.4f} -> {out / 'model.h2ck'}")


def cmd_evaluate(args) -> None:
    ckpt_path = _require(args.ckpt, "checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    cfg = ckpt.config
    data_dir = Path(args.data) if args.data else ckpt_path.parent
    split = load_split(_require(data_dir / "split.npz", "split artifact"))
    if split.n_items != ckpt.meta["n_items"]:
        raise CliError(f"checkpoint covers {ckpt.meta['n_items']} items, split has {split.n_items}")
    negatives = None if args.full else args.negatives
    seed = _env_seed(args.seed if args.seed is not None else cfg.seed)
    report = _evaluate_model(ckpt.build_model(), split, cfg, negatives, seed)
    out = Path(args.out) if args.out else ckpt_path.parent
    arts = _write_metrics(out, report, cfg)
    _write_manifest(out, "evaluate", arts, seed=seed, config_hash=cfg.config_hash(),
                    extra={"protocol": report.protocol, "checkpoint": _sha256(ckpt_path)})
    rows = group_breakdown([report])
    print(format_table({variant_name(cfg): rows}))


def cmd_ablate(args) -> None:
    base = _load_config(args)
    variants = ["full"] + [v for v in args.variants.split(",") if v and v != "full"]
    for v in variants[1:]:
        for flag in v.split("+"):
            if flag not in ABLATIONS:
                raise CliError(f"unknown variant {flag!r}; choose from {', '.join(ABLATIONS)}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    data_dir = _require(args.data, "data directory")
    split, semantic, sids, codebooks = _load_training_inputs(data_dir, args.sids, args.emb, args.codebooks)
    out = Path(args.out)
    results: dict[str, list[MetricsReport]] = {}
    for variant in variants:
        flags = {name: False for name in ABLATIONS}
        if variant != "full":
            flags.update({f: True for f in variant.split("+")})
        for seed in seeds:
            cfg = replace(base, seed=seed, **flags).validate()
            run_dir = out / "runs" / f"{variant}_seed{seed}"
            trainer, arts = _train_one(cfg, split, semantic, sids, codebooks, run_dir)
            report = _evaluate_model(trainer.model, split, cfg, cfg.eval_negatives, seed)
            arts += _write_metrics(run_dir, report, cfg)
            _write_manifest(run_dir, "ablate", arts, seed=seed, config_hash=cfg.config_hash())
            results.setdefault(variant, []).append(report)
            log.info("%s seed %d overall N@10 %.4f", variant, seed, report.groups["overall"]["ndcg_at_10"])
    table = _summary(results)
    arts = [_write_text(out / "ablation.csv", table["csv"]), _write_json(out / "ablation.json", table["json"])]
    _write_manifest(out, "ablate", arts, seed=seeds, config_hash=base.config_hash())
    print(table["text"])


def _summary(results: dict[str, list[MetricsReport]]) -> dict:
    rows_by_variant = {v: group_breakdown(reps) for v, reps in results.items()}
    lines = []
    for v, rows in rows_by_variant.items():
        for r in rows:
            lines.append({"variant": v, "n_seeds": len(results[v]), **r})
    return {
        "csv": breakdown_csv(lines),
        "json": {v: {"seeds": [r.seed for r in results[v]], "groups": rows} for v, rows in rows_by_variant.items()},
        "text": format_table(rows_by_variant),
    }


def cmd_report(args) -> None:
    paths: list[Path] = []
    for raw in args.runs:
        p = _require(raw, "run path")
        paths += sorted(p.rglob("metrics.json")) if p.is_dir() else [p]
    if not paths:
        raise CliError("no metrics.json files found")
    results: dict[str, list[MetricsReport]] = {}
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            d = json.load(fh)
        try:
            results.setdefault(d.get("variant", "full"), []).append(MetricsReport.from_dict(d))
        except KeyError as exc:
            raise CliError(f"{p}: not a metrics file (missing {exc})") from None
    for reps in results.values():
        reps.sort(key=lambda r: r.seed)
    table = _summary(dict(sorted(results.items(), key=lambda kv: (kv[0] != "full", kv[0]))))
    out = Path(args.out)
    arts = [_write_text(out / "report.csv", table["csv"]), _write_json(out / "report.json", table["json"])]
    _write_manifest(out, "report", arts)
    print(table["text"])


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="h2rec", description="Hash-ID / semantic-ID sequential recommender.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="split an interaction log into train/valid/test")
    p.add_argument("--interactions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emb", help="semantic matrix to copy alongside the split")
    p.add_argument("--min-len", type=int, default=3)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate the clustered long-tail benchmark")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-quantizer", help="fit codebooks and assign semantic IDs")
    p.add_argument("--emb", required=True)
    p.add_argument("--mech", choices=MECHANISMS, default="rq")
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--K", type=int, default=128)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_quantizer)

    p = sub.add_parser("assign-sids", help="assign semantic IDs with trained codebooks")
    p.add_argument("--codebooks", required=True)
    p.add_argument("--emb", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assign_sids)

    for name, func, text in (
        ("train", cmd_train, "train one model"),
        ("ablate", cmd_ablate, "train and evaluate the full model and its ablations"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config")
        p.add_argument("--data", required=True)
        p.add_argument("--sids", required=True)
        p.add_argument("--emb", help="semantic matrix (default: DATA/semantic.semb)")
        p.add_argument("--codebooks", help="codebook file (default: next to the SID file)")
        p.add_argument("--out", required=True)
        if name == "ablate":
            p.add_argument("--variants", default=",".join(ABLATIONS))
            p.add_argument("--seeds", default="42,43,44")
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="directory with split.npz (default: checkpoint directory)")
    p.add_argument("--negatives", type=int, default=99)
    p.add_argument("--full", action="store_true", help="rank against the full catalog")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge per-seed metrics into a summary table")
    p.add_argument("runs", nargs="+", help="metrics.json files or directories to search")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        _apply_threads()
        args.func(args)
    except (CliError, *EXPECTED_ERRORS) as exc:
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"error: {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
