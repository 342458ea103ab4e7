"""Command line entry point: ``crowdcl <command> [options]``.

Exit status is 0 on success, 1 for bad configuration or input, 2 when a
training run (or any matrix cell) failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from .errors import ConfigError, CrowdCLError, LoadError, MissingRunError, ParameterError, TrainingError

log = logging.getLogger("crowdcl")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _size(text):
    if text is None:
        return None
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _train_config(args, base: dict):
    """Merge a TrainConfig dict from --config with any explicitly given flags."""
    from .training import TrainConfig

    d = dict(base)
    flags = {"mode": args.mode, "scorer": args.scorer, "epochs": args.epochs, "batch_size": args.batch_size,
             "lr_initial": args.lr, "sigma": args.sigma, "seed": args.seed, "val_fraction": args.val_fraction,
             "scorer_checkpoint": args.scorer_checkpoint}
    d.update({k: v for k, v in flags.items() if v is not None})
    pacing = dict(d.get("pacing") or {})
    pacing.update({k: v for k, v in (("shape", args.shape), ("a", args.a), ("b", args.b), ("K", args.K))
                   if v is not None})
    if pacing:
        d["pacing"] = pacing
    return TrainConfig.from_dict(d)


def _model_spec(args, base: dict):
    from .models import ModelSpec

    d = dict(base)
    if args.model is not None:
        d["family"] = args.model
    if args.channels is not None:
        d["channels"] = args.channels
    d.setdefault("family", "multi_column")
    return ModelSpec.from_dict(d)


def _add_model_flags(p):
    p.add_argument("--model", help="model family (multi_column, dilated_single_column)")
    p.add_argument("--channels", type=float, help="channel width multiplier")


def _add_train_flags(p):
    p.add_argument("--mode", choices=("standard", "curriculum", "anti_curriculum"))
    p.add_argument("--scorer", choices=("count", "self_taught", "transfer", "random"))
    p.add_argument("--scorer-checkpoint")
    p.add_argument("--shape", help="pacing shape")
    p.add_argument("--a", type=float, help="fraction of training after which all data is exposed")
    p.add_argument("--b", type=float, help="initial exposed fraction")
    p.add_argument("--K", type=int, help="number of steps for the step shape")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--val-fraction", type=float)


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    from .dataset import save_dataset, synthesize_dataset

    out = Path(args.out)
    for split, n, seed in (("train", args.n_train, args.seed), ("test", args.n_test, args.seed + 1)):
        if n <= 0:
            continue
        m = synthesize_dataset(n, (args.min_count, args.max_count), args.size, seed, split, f"{args.name}-{split}")
        save_dataset(m, out, split)
        print(f"wrote {n} {split} samples to {out}")
    return EXIT_OK


def cmd_ingest(args):
    """Copy images and convert .mat head annotations into the loadable layout."""
    from .dataset import convert_mat_annotation

    images, mats, out = Path(args.images), Path(args.annotations), Path(args.out)
    if not images.is_dir() or not mats.is_dir():
        raise LoadError(f"both {images} and {mats} must be directories")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    rels, total = [], 0
    for img in sorted(p for p in images.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        candidates = [mats / f"GT_{img.stem}.mat", mats / f"{img.stem}.mat"]
        mat = next((c for c in candidates if c.is_file()), None)
        if mat is None:
            raise LoadError(f"missing annotation file for image {img.name}")
        shutil.copy2(img, out / "images" / img.name)
        rel = f"annotations/{img.stem}.json"
        total += convert_mat_annotation(mat, img.name, out / rel)
        rels.append(rel)
    if not rels:
        raise LoadError(f"no images found in {images}")
    doc = {"name": args.name or out.name, "split": args.split, "annotations": rels}
    (out / f"{args.split}.json").write_text(json.dumps(doc, indent=1))
    print(f"ingested {len(rels)} images, {total} heads")
    return EXIT_OK


def cmd_score(args):
    from .curriculum import score_dataset
    from .dataset import load_dataset

    manifest = load_dataset(args.data, args.manifest, _size(args.image_size))
    spec = _model_spec(args, {}) if args.scorer == "self_taught" else None
    sd = score_dataset(manifest, args.scorer, args.order, seed=args.seed, model_spec=spec,
                       checkpoint=args.checkpoint, pretrain_epochs=args.pretrain_epochs, sigma=args.sigma)
    sd.save(args.out)
    print(f"scored {len(sd.sample_ids)} samples with {sd.scorer} -> {args.out}")
    return EXIT_OK


def cmd_plan(args):
    from .curriculum import PacingConfig, ScoredDataset, build_plan

    sd = ScoredDataset.load(args.scored)
    d = _read_config(args.config).get("pacing", {})
    d.update({k: v for k, v in (("shape", args.shape), ("a", args.a), ("b", args.b), ("K", args.K),
                                ("T", args.T), ("batch_size", args.batch_size)) if v is not None})
    plan = build_plan(sd, PacingConfig.from_dict(d), args.seed)
    plan.save(args.out)
    print(f"plan with {plan.M} batches -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .dataset import load_dataset
    from .training import train

    doc = _read_config(args.config)
    size = _size(args.image_size)
    manifest = load_dataset(args.data, args.manifest, size)
    val = load_dataset(args.data, args.val_manifest, size) if args.val_manifest else None
    spec = _model_spec(args, doc.get("model", {}))
    cfg = _train_config(args, doc.get("train", {k: v for k, v in doc.items() if k != "model"}))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"model": spec.to_dict(), "train": cfg.to_dict()}, indent=1))
    try:
        ckpt, trace = train(manifest, spec, cfg, val_manifest=val, out_dir=out)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    ckpt.save(out / "model.ckpt")
    print(f"trained {len(trace.steps)} steps ({trace.samples_seen} samples); "
          f"final loss {trace.steps[-1][2]:.6g}; checkpoint -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args):
    from .dataset import load_dataset
    from .evaluation import evaluate

    manifest = load_dataset(args.data, args.manifest, _size(args.image_size))
    rep = evaluate(args.checkpoint, manifest, args.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.save(out / "report.csv", out / "report.json")
    print(f"MAE {rep.mae:.4f}  MSE {rep.mse:.4f}  " + "  ".join(f"GAME{k} {v:.4f}" for k, v in sorted(rep.game.items())))
    return EXIT_OK


def cmd_matrix(args):
    from .runner import ExperimentMatrix, desk_matrix, reference_matrix, run_matrix

    if args.config:
        matrix = ExperimentMatrix.load(args.config)
    else:
        matrix = {"desk": desk_matrix, "reference": reference_matrix}[args.preset]()
    if args.seed is not None:
        matrix.seeds = [args.seed]
    if args.dry_run:
        for cell in matrix.cells():
            print(cell["run_id"], cell["dataset"]["name"], cell["model"]["name"], cell["arm"]["label"], cell["seed"])
        print(f"{len(matrix.cells())} cells")
        return EXIT_OK
    summary = run_matrix(matrix, args.out, args.parallelism)
    print(f"{summary['cells']} cells: {summary['trained']} trained, {summary['skipped']} already complete, "
          f"{len(summary['failed'])} failed")
    for rid in summary["failed"]:
        print(f"failed: {rid} (see {Path(args.out) / 'runs' / rid / 'error.json'})", file=sys.stderr)
    return EXIT_RUN if summary["failed"] else EXIT_OK


def cmd_table(args):
    from .runner import reference_table, render_table

    table = reference_table(args.reference) if args.reference else render_table(args.out, args.dataset)
    print(table.to_markdown() if args.format == "markdown" else table.to_text())
    return EXIT_OK


def cmd_curves(args):
    from .runner import render_convergence

    summary = render_convergence(args.out, (args.standard, args.curriculum), args.curves_dir, args.window)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_common(p, out=None, seed=None):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", default=out, help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p, manifest="train"):
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--manifest", default=manifest)
    p.add_argument("--image-size", help="resize to HxW")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdcl", description="Curriculum learning for crowd counting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="make a synthetic dataset")
    _add_common(p, "data", 0)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-count", type=int, default=50)
    p.add_argument("--size", type=_size, default=(64, 64), help="HxW")
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="convert a .mat-annotated image folder")
    _add_common(p, "data")
    p.add_argument("--images", required=True)
    p.add_argument("--annotations", required=True, help="folder of GT_<image>.mat files")
    p.add_argument("--split", default="train")
    p.add_argument("--name")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("score", help="score training samples by difficulty")
    _add_common(p, "scored.json", 0)
    _add_data(p)
    p.add_argument("--scorer", default="count", choices=("count", "self_taught", "transfer", "random"))
    p.add_argument("--order", default="curriculum", choices=("curriculum", "anti_curriculum", "random"))
    p.add_argument("--checkpoint", help="pretrained model for transfer scoring")
    p.add_argument("--pretrain-epochs", type=int, default=5)
    p.add_argument("--sigma", type=float, default=4.0)
    _add_model_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("plan", help="build a batch schedule from scores")
    _add_common(p, "plan.json", 0)
    p.add_argument("--scored", required=True)
    p.add_argument("--shape")
    p.add_argument("--a", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--K", type=int)
    p.add_argument("--T", type=int, required=True, help="total training steps")
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train one model")
    _add_common(p, "run")
    _add_data(p)
    p.add_argument("--val-manifest")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p, "eval")
    _add_data(p, "test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sigma", type=float, default=4.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("matrix", help="run an experiment matrix")
    _add_common(p, "results")
    p.add_argument("--preset", choices=("desk", "reference"), default="desk")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--dry-run", action="store_true", help="list cells without training")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("table", help="render a results table")
    _add_common(p, "results")
    p.add_argument("--dataset")
    p.add_argument("--reference", choices=("A", "B"), help="show the published numbers instead")
    p.add_argument("--format", choices=("text", "markdown"), default="text")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("curves", help="plot loss against samples seen for two runs")
    _add_common(p, "results")
    p.add_argument("--standard", required=True, help="run id of the standard arm")
    p.add_argument("--curriculum", required=True, help="run id of the curriculum arm")
    p.add_argument("--curves-dir")
    p.add_argument("--window", type=int)
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN
    except (ConfigError, ParameterError, LoadError, MissingRunError, CrowdCLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
