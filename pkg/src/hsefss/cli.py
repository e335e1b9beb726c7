"""Command-line harness: gen-data, train, eval, ablate, predict, check.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 data/format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import BackboneConfig
from .episodes import DEFAULT_CLASSES, EMBEDDINGS_FILE, DatasetSpec, generate_dataset, load_dataset, sample_episode
from .errors import ConfigError, DivergenceError, FormatError, LookupFailure, SamplingError
from .harness import TrainConfig, evaluate, run_ablation, train
from .hse import ABLATION_VARIANTS, ModelConfig, VariantConfig, build_model, forward_episode, model_config, predict_mask
from .params import read_snapshot, write_snapshot
from .semantics import embedding_table, load_embeddings, synth_embedding

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("hsefss")


class UsageError(Exception):
    pass


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _variant(text: str) -> VariantConfig:
    try:
        return VariantConfig.parse(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _variants(text: str) -> list[VariantConfig]:
    if text.strip().lower() == "all":
        return list(ABLATION_VARIANTS)
    items = [t for t in text.replace(" ", ";").split(";") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("no variants given")
    return [_variant(t) for t in items]


# --------------------------------------------------------------------------
# embeddings


def _add_embedding_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--embeddings", type=Path, help="JSON-lines class embeddings (default: <data>/embeddings.jsonl if present)")
    g.add_argument("--synth-embeddings", action="store_true", help="hash-seeded synthetic embeddings")
    p.add_argument("--ct", type=int, default=16, help="dimension of synthetic embeddings")
    p.add_argument("--embed-seed", type=int, default=7)


def resolve_embeddings(args, dataset) -> tuple[dict, dict]:
    """(name -> vector table, description for the params sidecar)."""
    path = getattr(args, "embeddings", None)
    if path is None and not getattr(args, "synth_embeddings", False):
        default = Path(dataset.root) / EMBEDDINGS_FILE
        if default.exists():
            path = default
    if path is not None:
        embeds = load_embeddings(path)
        table = embedding_table(embeds)
        missing = [c for c in dataset.classes if c not in table]
        if missing:
            log.warning("embeddings file lacks %s; synthesizing those", missing)
            ct = next(iter(table.values())).shape[0] if table else args.ct
            for c in missing:
                table[c] = synth_embedding(c, ct, args.embed_seed).vector
        return table, {"source": "file", "path": str(Path(path).resolve())}
    table = {c: synth_embedding(c, args.ct, args.embed_seed).vector for c in dataset.classes}
    return table, {"source": "synth", "ct": args.ct, "seed": args.embed_seed}


def embeddings_from_meta(meta: dict, dataset) -> dict:
    spec = meta.get("embeddings", {"source": "synth", "ct": 16, "seed": 7})
    if spec["source"] == "file":
        return embedding_table(load_embeddings(spec["path"]))
    return {c: synth_embedding(c, spec["ct"], spec["seed"]).vector for c in dataset.classes}


def _embed_dim(table: dict) -> int:
    dims = {v.shape[0] for v in table.values()}
    if len(dims) != 1:
        raise FormatError(f"embedding dimensions disagree: {sorted(dims)}")
    return dims.pop()


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if not 3 <= args.classes <= len(DEFAULT_CLASSES):
        raise UsageError(f"--classes must be in [3, {len(DEFAULT_CLASSES)}]")
    if args.extent % 8:
        raise UsageError("--extent must be a multiple of 8")
    spec = DatasetSpec(
        classes=list(DEFAULT_CLASSES[: args.classes]),
        extent=args.extent,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
    )
    manifest = generate_dataset(spec, args.seed, args.out, embed_dim=args.ct)
    total = sum(sum(c.values()) for c in manifest["counts"].values())
    print(f"wrote {total} samples for {len(spec.classes)} classes to {args.out}")
    return EXIT_OK


def _train_config(args, variant=None, fold=None) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        episodes_per_epoch=args.episodes_per_epoch,
        fold=args.fold if fold is None else fold,
        shots=args.shots,
        variant=variant or args.variant,
        train_seed=args.seed,
        lr_schedule=args.lr_schedule,
        check_frozen=args.check_frozen,
    )


def _model_config(args, ct: int) -> ModelConfig:
    bb = BackboneConfig(mid_channels=args.channels, high_channels=args.channels)
    return ModelConfig(backbone=bb, ct=ct, projector=args.projector, heads=args.heads, sdi_tokens=args.sdi_tokens)


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    table, emb_meta = resolve_embeddings(args, dataset)
    mcfg = _model_config(args, _embed_dim(table))
    cfg = _train_config(args)
    params = build_model(mcfg, args.seed, train_backbone=args.train_backbone)
    start = time.perf_counter()
    result = train(dataset, cfg, params, table, progress=lambda e, l: print(f"epoch {e:3d}  loss {l:.5f}", flush=True))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trained = result.params
    trained.meta = {
        **trained.meta,
        "variant": str(cfg.variant),
        "embeddings": emb_meta,
        "train": cfg.to_dict(),
        "loss_curve": result.loss_curve,
    }
    write_snapshot(out, trained)
    stem = out.with_suffix("")
    with open(f"{stem}.loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows([[i, f"{v:.8f}"] for i, v in enumerate(result.loss_curve)])
    if result.loss_curve:
        from .plotting import plot_loss_curve

        plot_loss_curve(result.loss_curve, f"{stem}.loss.png", title=f"{cfg.variant} fold {cfg.fold}")
    for w_ in result.warnings:
        log.warning(w_)
    print(f"saved {out} ({time.perf_counter() - start:.1f}s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    params = read_snapshot(args.params)
    if "model" not in params.meta:
        raise FormatError(f"{args.params}: missing configuration sidecar {args.params}.json")
    variant = args.variant or VariantConfig.parse(params.meta.get("variant", "sd3,gc2"))
    fold = args.fold if args.fold is not None else params.meta.get("train", {}).get("fold", 0)
    table = resolve_embeddings(args, dataset)[0] if (args.embeddings or args.synth_embeddings) else embeddings_from_meta(params.meta, dataset)
    start = time.perf_counter()
    report = evaluate(
        dataset,
        params,
        fold,
        args.shots,
        args.episodes,
        args.seeds,
        variant=variant,
        embeddings=table,
        per_episode_iou=args.per_episode_iou,
        workers=args.workers,
    )
    elapsed = time.perf_counter() - start
    _write_eval_outputs(Path(args.report), report, elapsed, title=f"{variant} fold {fold} {args.shots}-shot")
    print(f"mIoU {report.miou:.4f}  per-seed {['%.4f' % v for v in report.per_seed_miou]}")
    for w in report.warnings:
        print(f"warning: {w}")
    return EXIT_OK


def _write_eval_outputs(path: Path, report, elapsed: float, title: str) -> None:
    from .plotting import plot_per_class_iou

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    stem = path.with_suffix("")
    meta = {"written_at": datetime.now(timezone.utc).isoformat(), "runtime_seconds": round(elapsed, 3)}
    Path(f"{stem}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    with open(f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou"])
        w.writerows([[c, f"{v:.6f}"] for c, v in report.per_class_iou.items()])
        w.writerow(["mIoU", f"{report.miou:.6f}"])
    plot_per_class_iou(report.per_class_iou, report.miou, f"{stem}.png", title=title)


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    dataset = load_dataset(args.data)
    table, emb_meta = resolve_embeddings(args, dataset)
    mcfg = _model_config(args, _embed_dim(table))
    cfg = _train_config(args, variant=args.variants[0], fold=args.folds[0])
    result = run_ablation(
        dataset,
        mcfg,
        cfg,
        args.variants,
        args.seeds,
        folds=args.folds,
        embeddings=table,
        eval_episodes=args.eval_episodes,
        progress=lambda msg: print(msg, flush=True),
    )
    result.config["embeddings"] = emb_meta
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(result.to_json())
    stem = path.with_suffix("")
    Path(f"{stem}.txt").write_text(result.to_text())
    with open(f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "variant"] + [f"split{f}" for f in result.folds] + ["mean"])
        for r in result.rows:
            w.writerow([r.label, r.variant] + [f"{r.folds[str(f)]:.6f}" for f in result.folds] + [f"{r.mean:.6f}"])
    plot_ablation(result, f"{stem}.png")
    print(result.to_text(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .plotting import plot_prediction

    dataset = load_dataset(args.data)
    params = read_snapshot(args.params)
    if "model" not in params.meta:
        raise FormatError(f"{args.params}: missing configuration sidecar {args.params}.json")
    variant = VariantConfig.parse(params.meta.get("variant", "sd3,gc2"))
    fold = args.fold if args.fold is not None else params.meta.get("train", {}).get("fold", 0)
    table = embeddings_from_meta(params.meta, dataset)
    ep = sample_episode(dataset, fold, args.phase, args.shots, args.episode_seed, args.episode_index)
    out = forward_episode(params, variant, ep, table, with_loss=False)
    pred = predict_mask(out.logits)
    prior = out.prior.map
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    query = np.clip(np.rint(ep.query_image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(query, "RGB").save(f"{stem}_query.png")
    Image.fromarray((ep.query_mask * 255).astype(np.uint8), "L").save(f"{stem}_truth.png")
    Image.fromarray(np.clip(np.rint(prior * 255), 0, 255).astype(np.uint8), "L").save(f"{stem}_prior.png")
    Image.fromarray((pred * 255).astype(np.uint8), "L").save(f"{stem}_pred.png")
    plot_prediction(query, ep.query_mask, prior, pred, path, title=f"{ep.class_name} ({variant})")
    inter = int(np.count_nonzero(pred & ep.query_mask))
    union = int(np.count_nonzero(pred | ep.query_mask))
    print(f"class {ep.class_name}  IoU {inter / union if union else float('nan'):.4f}  wrote {path}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .verify import run_gradient_suite, run_oracle_suite

    if not (args.gradients or args.oracles):
        raise UsageError("check needs --gradients and/or --oracles")
    ok = True
    if args.oracles:
        start = time.perf_counter()
        for r in run_oracle_suite(cases=args.cases):
            print(r.line())
            ok &= r.passed
        print(f"oracle suite: {time.perf_counter() - start:.1f}s")
    if args.gradients:
        start = time.perf_counter()
        for r in run_gradient_suite():
            print(r.line())
            ok &= r.passed
        print(f"gradient suite: {time.perf_counter() - start:.1f}s")
    print("OK" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


# --------------------------------------------------------------------------
# parser


def _add_train_args(p: argparse.ArgumentParser, with_variant: bool = True) -> None:
    p.add_argument("--fold", type=int, default=0, choices=[0, 1, 2])
    p.add_argument("--shots", type=int, default=1)
    if with_variant:
        p.add_argument("--variant", type=_variant, default=VariantConfig("sd3", "gc2"))
    p.add_argument("--seed", type=int, default=0, help="training seed (initialization and episode sampling)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--episodes-per-epoch", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--lr-schedule", choices=["constant", "poly"], default="constant")
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--projector", choices=["linear", "mlp2", "mlp3"], default="linear")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--sdi-tokens", choices=["W", "1"], default="W")
    p.add_argument("--train-backbone", action="store_true")
    p.add_argument("--check-frozen", action="store_true", help="assert frozen parameters are unchanged each epoch")
    _add_embedding_args(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsefss", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shape benchmark")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=9)
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--train-per-class", type=int, default=60)
    p.add_argument("--test-per-class", type=int, default=20)
    p.add_argument("--ct", type=int, default=16, help="dimension of the written descriptor embeddings")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="episodic training on one fold")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _add_train_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate on the held-out fold")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--params", required=True, type=Path)
    p.add_argument("--fold", type=int, choices=[0, 1, 2])
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    p.add_argument("--variant", type=_variant, help="override the variant recorded with the params")
    p.add_argument("--per-episode-iou", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", required=True, type=Path)
    _add_embedding_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate several variants")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--variants", type=_variants, default=list(ABLATION_VARIANTS), help="'all' (the four standard variants) or e.g. 'off,off;sd3,gc2'")
    p.add_argument("--seeds", type=_seeds, default=[0, 1, 2])
    p.add_argument("--folds", type=_seeds, default=[0, 1, 2])
    p.add_argument("--eval-episodes", type=int, default=200)
    p.add_argument("--report", required=True, type=Path)
    _add_train_args(p, with_variant=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="render one episode's prediction")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--params", required=True, type=Path)
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--episode-index", type=int, default=0)
    p.add_argument("--fold", type=int, choices=[0, 1, 2])
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--phase", choices=["train", "test"], default="test")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("check", help="run verification suites")
    p.add_argument("--gradients", action="store_true")
    p.add_argument("--oracles", action="store_true")
    p.add_argument("--cases", type=int, default=20, help="random instances per oracle")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "folds", None) is not None and any(f not in (0, 1, 2) for f in args.folds):
        parser.error("--folds must be drawn from 0,1,2")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, SamplingError, LookupFailure, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
