"""Command-line front end: ``fanet {train,eval,ablate,inspect,synth}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import checkpoint
from .analysis import collect_attention_stats, export_excitation_maps, resolve_site, write_stats_csv
from .config import RunConfig, load_run_config, parse_palette
from .data import DEFAULT_PALETTE, load_voc_dir, save_voc_dir, synth_orange
from .errors import ConfigError, FanetError, LabelError, PairingError, ShapeError
from .metrics import CLASS_NAMES, compute_metrics, format_table, prf_matrices, write_matrix_csv
from .models import ATTENTION_FLAGS, DISPLAY_NAMES, build
from .train import evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
ABLATION_ORDER = ("unet-se", "unet", "fanet-i", "fanet-s", "fanet")
USAGE_ERRORS = (ConfigError, LabelError, PairingError, ShapeError)

log = logging.getLogger("fanet")


# -- dataset arguments ------------------------------------------------------

def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset (one of)")
    g.add_argument("--data", help="VOC-style root holding JPEGImages/ and SegmentationClass/")
    g.add_argument("--images", help="image directory (with --masks)")
    g.add_argument("--masks", help="colour-mask directory (with --images)")
    g.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic samples")
    g.add_argument("--synthetic-seed", type=int, default=2)
    p.add_argument("--palette", help="YAML file mapping class ids to [r, g, b]")


def _load_dataset(args, size: int):
    palette = DEFAULT_PALETTE
    if args.palette:
        palette = parse_palette(yaml.safe_load(Path(args.palette).read_text()))
    chosen = [x is not None for x in (args.data, args.images or args.masks, args.synthetic)]
    if sum(chosen) != 1:
        raise ConfigError("give exactly one dataset: --data, --images/--masks, or --synthetic")
    if args.synthetic is not None:
        if args.synthetic < 0:
            raise ConfigError("--synthetic must be >= 0")
        return synth_orange(args.synthetic_seed, args.synthetic, size)
    if args.data:
        root = Path(args.data)
        return load_voc_dir(root / "JPEGImages", root / "SegmentationClass", palette)
    if not (args.images and args.masks):
        raise ConfigError("--images and --masks must be given together")
    return load_voc_dir(args.images, args.masks, palette)


def _check_dataset(samples, size: int, what: str) -> None:
    if not samples:
        raise ConfigError(f"{what} dataset is empty")
    for s in samples:
        if s.size != (size, size):
            raise ConfigError(f"{what} sample {s.id!r} is {s.size[0]}x{s.size[1]}, model expects {size}x{size}")


# -- evaluation artefacts ----------------------------------------------------

def _write_eval(model, samples, out_dir: Path, label: str) -> dict:
    cm = evaluate(model, samples)
    metrics = compute_metrics(cm)
    p, r, f1, flags = prf_matrices(cm)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out_dir / "precision.csv", p)
    write_matrix_csv(out_dir / "recall.csv", r)
    write_matrix_csv(out_dir / "f1.csv", f1)
    table = format_table([(label, metrics)], CLASS_NAMES)
    (out_dir / "metrics.txt").write_text(table + "\n")
    (out_dir / "metrics.json").write_text(json.dumps({**metrics, **flags}, indent=2, sort_keys=True))
    return {"metrics": metrics, "table": table}


def _run(cfg: RunConfig, out_dir: Path, variant: str | None = None) -> dict:
    spec = cfg.model if variant is None else type(cfg.model)(**{**cfg.model.to_dict(), "variant": variant})
    spec.validate()
    train_set = cfg.train_data.load(cfg.palette, spec.input_size)
    _check_dataset(train_set, spec.input_size, "training")
    eval_set = cfg.eval_data.load(cfg.palette, spec.input_size) if cfg.eval_data else None
    if eval_set is not None:
        _check_dataset(eval_set, spec.input_size, "evaluation")
    model = build(spec, seed=cfg.seed, dtype=cfg.train.precision)
    report = train(model, train_set, cfg.train, cfg.augment, eval_set=eval_set, out_dir=out_dir)
    result = _write_eval(model, eval_set if eval_set is not None else train_set, out_dir,
                         DISPLAY_NAMES[spec.variant])
    result.update(model=model, report=report, params=model.param_count())
    return result


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set, args.output_dir, args.seed)
    out = Path(cfg.output_dir)
    cfg.dump(out / "run_config.yaml")
    result = _run(cfg, out)
    print(result["table"])
    print(f"checkpoints written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    spec = model.spec
    if args.variant and args.variant != spec.variant:
        raise ConfigError(f"checkpoint holds variant {spec.variant!r}, expected {args.variant!r}")
    samples = _load_dataset(args, spec.input_size)
    _check_dataset(samples, spec.input_size, "evaluation")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "eval"
    result = _write_eval(model, samples, out, DISPLAY_NAMES[spec.variant])
    print(result["table"])
    for name in ("precision", "recall", "f1"):
        print(f"\n{name} (%), rows = ground truth, columns = prediction")
        print((out / f"{name}.csv").read_text().rstrip())
    return EXIT_OK


def ablation_report(rows: list[dict]) -> str:
    """Ablation table with FIAM/FSAM presence flags and parameter counts."""
    head = ["Network", "FIAM", "FSAM", "params", "pixel acc.", "mean acc.", "mean IU", "f.w. IU"]
    lines = ["\t".join(head)]
    mark = {True: "✓", False: "✗"}
    for row in rows:
        m = row["metrics"]
        fiam, fsam = ATTENTION_FLAGS[row["variant"]]
        vals = [m["pixel_acc"], m["mean_acc"], m["mean_iu"], m["fw_iu"]]
        lines.append("\t".join([DISPLAY_NAMES[row["variant"]], mark[fiam], mark[fsam], str(row["params"])]
                               + [f"{100 * v:.3f}" for v in vals]))
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.set, args.output_dir, args.seed)
    out = Path(cfg.output_dir)
    cfg.dump(out / "run_config.yaml")
    rows = []
    for variant in ABLATION_ORDER:
        log.info("ablation: training %s", variant)
        result = _run(cfg, out / variant, variant)
        rows.append({"variant": variant, "params": result["params"], "metrics": result["metrics"]})
    report = ablation_report(rows)
    (out / "ablation.txt").write_text(report + "\n")
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    print(report)
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    modules = model.attention_modules()
    if not modules:
        print(f"no attention modules in {DISPLAY_NAMES[model.spec.variant]} checkpoint; nothing to inspect")
        return EXIT_OK
    samples = _load_dataset(args, model.spec.input_size)
    _check_dataset(samples, model.spec.input_size, "inspection")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "inspect"
    out.mkdir(parents=True, exist_ok=True)

    stats = collect_attention_stats(model, samples)
    for module, sites in modules.items():
        path = out / f"{module}.csv"
        write_stats_csv(path, [stats[s] for s in sites])
        print(f"stats: {path}")

    channels = [int(c) for c in args.channels.split(",")] if args.channels else [3, 4, 5]
    # default: the output-most FIAM level and FSAM, the ones shown for FANet maps
    targets = args.module or [m for m in ("FIAM4", "FSAM4") if _has_site(model, m)]
    sample = samples[min(args.sample, len(samples) - 1)]
    for module_id in targets:
        site = resolve_site(model, module_id)
        valid = [c for c in channels if c < stats[site].channels]
        export_excitation_maps(model, sample, site, valid, out / "maps")
        print(f"maps: {site} channels {valid} -> {out / 'maps'}")
    return EXIT_OK


def _has_site(model, module_id: str) -> bool:
    try:
        resolve_site(model, module_id)
    except ConfigError:
        return False
    return True


def cmd_synth(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    samples = synth_orange(args.seed, args.n, args.size)
    images, masks = save_voc_dir(samples, args.out)
    print(f"wrote {len(samples)} samples to {images} and {masks}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fanet", description="Fastidious-attention segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, help_ in (("train", cmd_train, "train one model from a run config"),
                            ("ablate", cmd_ablate, "train all five variants under one config")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train.steps=50")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    _add_dataset_args(p)
    p.add_argument("--variant", help="fail unless the checkpoint holds this variant")
    p.add_argument("--out", help="directory for metrics and P/R/F1 CSVs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="attention statistics and excitation maps")
    p.add_argument("checkpoint")
    _add_dataset_args(p)
    p.add_argument("--module", action="append", help="site to map, e.g. FSAM4 or Merge-Conv4 (repeatable)")
    p.add_argument("--channels", help="comma-separated channel indices (default 3,4,5)")
    p.add_argument("--sample", type=int, default=0, help="dataset index used for the maps")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="write a synthetic dataset in VOC layout")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FanetError, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
