"""af: train, evaluate, ablate, render masks and report cost."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import numcore as nc
from .backbone import VIT_B16, ConfigError
from .config import ExperimentConfig, config_from_dict, load_config
from .experiments import AXES, axis_variants, mean_by_label, run_grid
from .metrics import CSV_HEADER, attention_mask, count_params, estimate_flops, format_count, resized, retained_mask
from .synthdata import generate, load_dataset, patches_to_images, save_dataset
from .training import NumericalError, config_sidecar, encode, evaluate, load_model, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("af")


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else config_from_dict({})


def _run_paths(cfg: ExperimentConfig, args):
    out = Path(args.out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / f"{cfg.run_id}.jsonl", Path(args.ckpt) if getattr(args, "ckpt", None) else out / f"{cfg.run_id}.afck"


def _config_for_ckpt(args) -> ExperimentConfig:
    if args.config:
        return load_config(args.config)
    side = config_sidecar(args.ckpt)
    if not side.exists():
        raise ConfigError(f"no -c given and no config sidecar at {side}")
    return load_config(side)


def cmd_train(args) -> int:
    cfg = _config(args)
    log_path, ckpt = _run_paths(cfg, args)
    res = train(cfg, log_path, ckpt)
    last = res.log[-1]
    print(f"trained {cfg.run_id}: {len(res.log)} epochs, final total {last['total']:.6f}")
    print(f"log {log_path}\ncheckpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_for_ckpt(args)
    data = load_dataset(args.dataset) if args.dataset else generate(cfg.data_spec)
    model = load_model(cfg, args.ckpt)
    ev = evaluate(model, data)
    lines = [CSV_HEADER, ev.report.csv_row(cfg.run_id, cfg.seed, cfg.prune.strategy, cfg.prune.tau)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"mean_retained={ev.mean_retained:.4f} mean_pruned={ev.mean_pruned:.4f} pruning_precision={ev.pruning_precision:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = axis_variants(cfg, args.axis)
    results = run_grid(rows, seeds)
    lines = ["axis,variant,seed,all,old,new,mean_retained,mean_pruned,pruning_precision"]
    for r in results:
        lines.append(
            f"{args.axis},{r.label},{r.seed},{r.all:.6f},{r.old:.6f},{r.new:.6f},"
            f"{r.mean_retained:.4f},{r.mean_pruned:.4f},{r.pruning_precision:.4f}"
        )
    for label, m in mean_by_label(results).items():
        lines.append(
            f"{args.axis},{label},mean,{m['all']:.6f},{m['old']:.6f},{m['new']:.6f},"
            f"{m['mean_retained']:.4f},{m['mean_pruned']:.4f},{m['pruning_precision']:.4f}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def render_masks(model, data, ids, threshold: float, out_dir: Path, run_id: str, png: bool = False) -> list[Path]:
    """CLS attention mask of the last block plus the TAP-retained mask, per sample."""
    vit = model.vit
    grid = (vit.grid_side, vit.grid_side)
    missing = [i for i in ids if not 0 <= i < len(data)]
    if missing:
        raise KeyError(f"sample id(s) {missing} not in dataset of size {len(data)}")
    out_dir.mkdir(parents=True, exist_ok=True)
    images = patches_to_images(data.patches[ids], data.spec)
    enc = encode(model, images, np.ones(len(ids), dtype=bool), model.cfg.prune)
    written = []
    for row, sid in enumerate(ids):
        cls_row = enc.final_attention[row, :, 0, 1:].mean(axis=0)
        mask = attention_mask(cls_row, threshold, grid)
        path = out_dir / f"{run_id}_{sid}_{threshold:g}.pgm"
        mask.save_pgm(path)
        written.append(path)
        keep = enc.keep[row, 1:] if enc.keep is not None else np.ones(vit.num_patches, dtype=bool)
        tap = retained_mask(np.flatnonzero(keep), grid)
        tap_path = out_dir / f"{run_id}_{sid}_tap.pgm"
        tap.save_pgm(tap_path)
        written.append(tap_path)
        if png:
            mask.save_png(path.with_suffix(".png"))
            tap.save_png(tap_path.with_suffix(".png"))
    return written


def cmd_mask(args) -> int:
    if not 0.0 < args.threshold <= 1.0:
        raise ConfigError(f"threshold must lie in (0, 1], got {args.threshold}")
    cfg = _config_for_ckpt(args)
    model = load_model(cfg, args.ckpt)
    data = load_dataset(args.dataset) if args.dataset else generate(cfg.data_spec)
    ids = [int(s) for s in args.ids.split(",") if s.strip()]
    out_dir = Path(args.out_dir or cfg.output_dir)
    for path in render_masks(model, data, ids, args.threshold, out_dir, cfg.run_id, args.png):
        print(path)
    return EXIT_OK


def cost_rows(cfg: ExperimentConfig) -> list[tuple[str, str, str]]:
    rows = []
    for name, vit, hidden in (("desk", cfg.backbone, cfg.time_hidden), ("vit_b16@224", VIT_B16, None), ("vit_b16@112", resized(VIT_B16, 112), None)):
        base = estimate_flops(vit)
        rows.append((name, "flops", format_count(base, "G") if base > 1e8 else str(base)))
        rows.append((name, "flops+af", format_count(estimate_flops(vit, with_af=True), "G") if base > 1e8 else str(estimate_flops(vit, with_af=True))))
        for mode in ("train", "test"):
            plain = count_params(vit, mode, False, hidden)["total"]
            af = count_params(vit, mode, True, hidden)["total"]
            rows.append((name, f"params_{mode}", str(plain)))
            rows.append((name, f"params_{mode}+af", str(af)))
            rows.append((name, f"af_delta_{mode}", str(af - plain)))
    return rows


def cmd_cost(args) -> int:
    cfg = _config(args)
    print("model,quantity,value")
    for row in cost_rows(cfg):
        print(",".join(row))
    return EXIT_OK


def cmd_data(args) -> int:
    cfg = _config(args)
    data = generate(cfg.data_spec)
    save_dataset(data, args.out)
    print(f"wrote {len(data)} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="af", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("-c", "--config")
    t.add_argument("--out-dir")
    t.add_argument("--ckpt", help="checkpoint path (default <out_dir>/<run_id>.afck)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the unlabeled split")
    e.add_argument("-c", "--config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", help="AFDS dataset file (default: regenerate from config)")
    e.add_argument("--out", help="CSV output path")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="sweep one axis")
    a.add_argument("-c", "--config")
    a.add_argument("--axis", required=True, choices=AXES)
    a.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    a.add_argument("--out", help="CSV output path")
    a.set_defaults(fn=cmd_ablate)

    m = sub.add_parser("mask", help="render attention and TAP masks")
    m.add_argument("-c", "--config")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--ids", required=True, help="comma-separated sample ids")
    m.add_argument("--threshold", type=float, default=0.7)
    m.add_argument("--dataset")
    m.add_argument("--out-dir")
    m.add_argument("--png", action="store_true", help="also write PNG copies")
    m.set_defaults(fn=cmd_mask)

    c = sub.add_parser("cost", help="FLOPs and parameter report")
    c.add_argument("-c", "--config")
    c.set_defaults(fn=cmd_cost)

    d = sub.add_parser("data", help="write the synthetic dataset to disk")
    d.add_argument("-c", "--config")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KeyError, ValueError, FileNotFoundError, nc.DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
