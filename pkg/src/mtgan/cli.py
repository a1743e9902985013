"""Command line: gen-data, train, eval-seg, eval-depth, infer.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric abort, 5 model mismatch.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as configlib
from .config import ConfigError, RunConfig
from .data import (DEFAULT_DMAX_MM, ArrayDataset, DatasetError, SceneSpec, depth_to_unit,
                   bytes_to_unit, generate_dataset, read_pgm, read_ppm, unit_to_bytes,
                   unit_to_depth, write_pgm, write_ppm)
from .evaluation import (MetricsReport, Palette, align_palette, cityscapes_palette,
                         write_reports)
from .runner import (LOSS_COLUMNS, Trainer, build_state, evaluate_depth_model,
                     evaluate_semantic_model, predict_depth, predict_semantic)
from .training import (ArchitectureMismatch, CheckpointError, NonFiniteLossError,
                       load_checkpoint, save_checkpoint)

log = logging.getLogger("mtgan")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- gen-data ---------------------------------------------------------------------

def parse_size(text: str) -> tuple:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError(EXIT_USAGE, f"--size must look like 64x64, got {text!r}") from None
    if w < 16 or h < 16:
        raise CliError(EXIT_USAGE, "--size must be at least 16x16")
    return w, h


def cmd_gen_data(args) -> int:
    if not 0 < args.rho <= 1:
        raise CliError(EXIT_USAGE, "rho must be in (0,1]")
    if args.count < 1:
        raise CliError(EXIT_USAGE, "count must be >= 1")
    w, h = parse_size(args.size)
    try:
        spec = SceneSpec(seed=args.seed, height=h, width=w, rho=args.rho)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    manifest = generate_dataset(args.out, spec, args.count, args.dmax)
    print(f"wrote {manifest.count} samples to {args.out}")
    return EXIT_OK


# -- train ------------------------------------------------------------------------

def _write_csv_rows(path: Path, rows, header: bool) -> None:
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(LOSS_COLUMNS)
        for row in rows:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in LOSS_COLUMNS[1:]])


def _truncate_losses(path: Path, step: int) -> None:
    """Keep the header and rows before ``step`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < step]
    path.write_text("".join(kept))


def depth_gray(unit: np.ndarray) -> np.ndarray:
    """1 x H x W normalized depth -> H x W x 3 bytes, near = bright."""
    g = np.clip(np.round((1.0 - unit[0]) * 127.5), 0, 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def image_grid(rgb: np.ndarray, sem: np.ndarray, depth: np.ndarray, rows: int = 4) -> np.ndarray:
    """Rows of (input | generated semantic | generated dense depth)."""
    tiles = [np.concatenate([unit_to_bytes(rgb[i]), unit_to_bytes(sem[i]), depth_gray(depth[i])],
                            axis=1) for i in range(min(rows, len(rgb)))]
    return np.concatenate(tiles, axis=0)


def write_grid(path: Path, trainer: Trainer, data: ArrayDataset) -> None:
    s = trainer.state
    k = min(4, len(data))
    sem = predict_semantic(s.semantic.G, data.rgb[:k])
    dep = predict_depth(s.semantic.G, s.depth.G, data.rgb[:k], data.sparse[:k],
                        s.depth.options.use_semantic_input)
    write_ppm(path, image_grid(data.rgb[:k], sem, dep))


def load_run_config(args) -> RunConfig:
    cfg = configlib.load(args.config) if args.config else RunConfig()
    overrides = configlib.parse_pairs("\n".join(args.overrides), "<command line>")
    cfg = cfg.with_overrides(overrides).resolved(Path.cwd())
    if not cfg.data:
        raise CliError(EXIT_USAGE, "config needs data=<dataset dir>")
    return cfg


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = ArrayDataset.load(cfg.data)
    evaluation = ArrayDataset.load(cfg.eval_data) if cfg.eval_data else train
    (out / "run_config.resolved").write_text(cfg.dumps())

    trainer = Trainer(cfg, train)
    losses = out / "losses.csv"
    if args.resume:
        load_checkpoint(args.resume, trainer.state)
        if trainer.state.seed != cfg.seed:
            raise CliError(EXIT_MISMATCH, f"checkpoint seed {trainer.state.seed} != "
                                          f"config seed {cfg.seed}")
        _truncate_losses(losses, trainer.state.step)
        log.info("resumed at step %d", trainer.state.step)
    elif losses.exists():
        losses.unlink()

    while trainer.state.step < cfg.steps:
        try:
            row = trainer.step()
        except NonFiniteLossError as exc:
            # an aborted step leaves no trace, so the state in hand is the last good one
            save_checkpoint(trainer.state, out / "last.mtgn")
            raise CliError(EXIT_NUMERIC, f"{exc}; last good state saved to "
                                         f"{out / 'last.mtgn'}") from None
        _write_csv_rows(losses, [row], header=not losses.exists())
        done = trainer.state.step
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(trainer.state, out / f"step_{done:06d}.mtgn")
            save_checkpoint(trainer.state, out / "last.mtgn")
        if cfg.grid_every and done % cfg.grid_every == 0:
            write_grid(out / f"grid_{done:06d}.ppm", trainer, evaluation)
    save_checkpoint(trainer.state, out / "last.mtgn")
    print(f"trained to step {trainer.state.step}; outputs in {out}")
    return EXIT_OK


# -- evaluation and inference -----------------------------------------------------

def _checkpoint_config(ckpt: Path, config_path) -> RunConfig:
    if config_path:
        return configlib.load(config_path)
    sidecar = ckpt.parent / "run_config.resolved"
    return configlib.load(sidecar) if sidecar.exists() else RunConfig()


def load_models(ckpt, config_path, image_size):
    ckpt = Path(ckpt)
    cfg = _checkpoint_config(ckpt, config_path)
    state = build_state(cfg, image_size)
    load_checkpoint(ckpt, state)
    return cfg, state


def cmd_eval_seg(args) -> int:
    if args.direction == "label2image":
        raise CliError(EXIT_USAGE, "eval-seg --direction label2image is out of scope: scoring "
                                   "generated photos needs a pretrained scene parser")
    palette = Palette.load(args.palette) if args.palette else cityscapes_palette()
    data = ArrayDataset.load(args.data)
    _, state = load_models(args.ckpt, args.config, data.rgb.shape[2:])
    m = evaluate_semantic_model(state.semantic.G, data, palette)
    write_reports(args.out, [MetricsReport(Path(args.data).name, len(data), m.per_pixel_acc,
                                           m.per_class_acc, m.mean_iou)])
    print(f"per_pixel_acc={m.per_pixel_acc:.4f} per_class_acc={m.per_class_acc:.4f} "
          f"mean_iou={m.mean_iou:.4f}")
    return EXIT_OK


def cmd_eval_depth(args) -> int:
    data = ArrayDataset.load(args.data)
    _, state = load_models(args.ckpt, args.config, data.rgb.shape[2:])
    m = evaluate_depth_model(state.semantic.G, state.depth.G, data,
                             state.depth.options.use_semantic_input)
    write_reports(args.out, [MetricsReport(Path(args.data).name, len(data), rmse_mm=m.rmse_mm,
                                           mae_mm=m.mae_mm, irmse_km=m.irmse_km,
                                           imae_km=m.imae_km)])
    print(f"rmse_mm={m.rmse_mm:.1f} mae_mm={m.mae_mm:.1f} "
          f"irmse_km={m.irmse_km:.3f} imae_km={m.imae_km:.3f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    rgb8 = read_ppm(args.rgb)
    sparse_mm = read_pgm(args.sparse)
    if sparse_mm.shape != rgb8.shape[:2]:
        raise CliError(EXIT_IO, f"sparse size {sparse_mm.shape} != rgb size {rgb8.shape[:2]}")
    _, state = load_models(args.ckpt, args.config, rgb8.shape[:2])
    rgb = bytes_to_unit(rgb8)[None]
    sparse = depth_to_unit(sparse_mm, args.dmax)[None, None]
    sem = predict_semantic(state.semantic.G, rgb)
    palette = cityscapes_palette()
    labels = align_palette(unit_to_bytes(sem[0]), palette)
    dense = predict_depth(state.semantic.G, state.depth.G, rgb, sparse,
                          state.depth.options.use_semantic_input)
    # the generator is total: clamp to at least 1 mm so every pixel is covered
    dense_mm = np.clip(np.round(unit_to_depth(dense[0, 0], args.dmax)), 1, 65535)
    write_ppm(f"{args.out}_sem.ppm", palette.colorize(labels))
    write_pgm(f"{args.out}_dense.pgm", dense_mm.astype(np.uint16), bits=16)
    print(f"wrote {args.out}_sem.ppm and {args.out}_dense.pgm")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtgan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=256)
    g.add_argument("--size", default="64x64")
    g.add_argument("--rho", type=float, default=0.05)
    g.add_argument("--dmax", type=float, default=DEFAULT_DMAX_MM)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train both branches")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(func=cmd_train)

    for name, func in (("eval-seg", cmd_eval_seg), ("eval-depth", cmd_eval_depth)):
        e = sub.add_parser(name, help=f"{name.split('-')[1]} metrics of a checkpoint")
        e.add_argument("--ckpt", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--config", help="defaults to run_config.resolved beside the checkpoint")
        if name == "eval-seg":
            e.add_argument("--palette")
            e.add_argument("--direction", choices=("image2label", "label2image"),
                           default="image2label")
        e.set_defaults(func=func)

    i = sub.add_parser("infer", help="semantic and dense depth for one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--rgb", required=True)
    i.add_argument("--sparse", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config")
    i.add_argument("--dmax", type=float, default=DEFAULT_DMAX_MM)
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mtgan: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"mtgan: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArchitectureMismatch as exc:
        print(f"mtgan: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"mtgan: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
