"""Command-line entry point: sr, degrade, eval, lam, train.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 model or config mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from mma import lam as lam_mod, metrics, model as model_mod, train as train_mod
from mma.fileio import atomic_write_text

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MODEL = 0, 2, 3, 4
TILE_OVERLAP = 8
DEFAULT_TILE = 64


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _parse_patch(text: str) -> tuple[int, int, int]:
    try:
        x, y, l = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"patch must be x,y,l integers, got {text!r}") from None
    return x, y, l


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mma", description="MMA super-resolution toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sr", help="upscale a PNG with a checkpoint")
    s.add_argument("--input", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--scale", type=_positive)
    s.add_argument(
        "--tile",
        type=_positive,
        nargs="?",
        const=DEFAULT_TILE,
        help=f"tiled inference with this LR tile size (default {DEFAULT_TILE}); tiles overlap by 8 px, seams are averaged",
    )

    s = sub.add_parser("degrade", help="bicubic downscale (antialiased, MATLAB conventions)")
    s.add_argument("--input", required=True)
    s.add_argument("--scale", type=_positive, required=True)
    s.add_argument("--output", required=True)

    s = sub.add_parser("eval", help="Y-channel PSNR/SSIM of an SR directory against HR")
    s.add_argument("--sr-dir", required=True)
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--scale", type=_positive, required=True)
    s.add_argument("--shave", type=int, help="border pixels removed per side (default: scale)")
    s.add_argument("--output", help="CSV path (default: standard output)")

    s = sub.add_parser("lam", help="local attribution map for an SR patch")
    s.add_argument("--image", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--patch", type=_parse_patch, required=True, help="x,y,l in SR pixels")
    s.add_argument("--steps", type=_positive, default=128)
    s.add_argument("--sigma", type=float, default=4.0)
    s.add_argument("--out", required=True, help="heatmap PNG; the JSON record goes next to it")

    s = sub.add_parser("train", help="train from a JSON config on a directory of HR PNGs")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="final checkpoint; EMA and loss CSV are written alongside")
    s.add_argument("--iters", type=_positive, help="override total_iters")
    s.add_argument("--seed", type=int, help="override the training seed")
    s.add_argument("--resume", help="checkpoint written by an earlier run (restores optimizer, EMA and trace)")
    return p


def _read_image(path) -> metrics.PlanarImage:
    try:
        return metrics.read_png(path)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read image {path}: {exc}") from exc


def _load_model(path) -> model_mod.MMA:
    if not Path(path).is_file():
        raise CliError(EXIT_IO, f"checkpoint not found: {path}")
    try:
        return model_mod.load(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from exc
    except (model_mod.CheckpointError, model_mod.ConfigError) as exc:
        raise CliError(EXIT_MODEL, f"bad checkpoint {path}: {exc}") from exc


def _write(fn, *args) -> None:
    try:
        fn(*args)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write output: {exc}") from exc


def tile_starts(length: int, tile: int, overlap: int) -> list[int]:
    """Tile origins covering [0, length) with at least ``overlap`` shared pixels; the last tile is flush."""
    if tile >= length:
        return [0]
    starts = list(range(0, length - tile, tile - overlap))
    starts.append(length - tile)
    return starts


def upscale(m: model_mod.MMA, lr: np.ndarray, tile: int | None = None, overlap: int = TILE_OVERLAP) -> np.ndarray:
    """C x H x W LR -> C x sH x sW SR, optionally tile by tile with averaged overlaps."""
    s = m.config.scale
    c, h, w = lr.shape
    if tile is None or (tile >= h and tile >= w):
        return train_mod.super_resolve(m, lr)
    if tile <= overlap:
        raise CliError(EXIT_USAGE, f"tile size must exceed the overlap ({overlap})")
    acc = np.zeros((c, s * h, s * w))
    count = np.zeros((1, s * h, s * w))
    th, tw = min(tile, h), min(tile, w)
    for top in tile_starts(h, th, overlap):
        for left in tile_starts(w, tw, overlap):
            out = train_mod.super_resolve(m, lr[:, top : top + th, left : left + tw])
            acc[:, s * top : s * (top + th), s * left : s * (left + tw)] += out
            count[:, s * top : s * (top + th), s * left : s * (left + tw)] += 1.0
    return acc / count


def cmd_sr(args) -> None:
    img = _read_image(args.input)
    m = _load_model(args.checkpoint)
    if args.scale is not None and args.scale != m.config.scale:
        raise CliError(EXIT_MODEL, f"checkpoint is x{m.config.scale} but x{args.scale} was requested")
    if min(img.height, img.width) < model_mod.MIN_INPUT:
        raise CliError(EXIT_USAGE, f"input must be at least {model_mod.MIN_INPUT} x {model_mod.MIN_INPUT}")
    sr = upscale(m, img.data.transpose(2, 0, 1), args.tile)
    _write(metrics.write_png, metrics.PlanarImage(sr.transpose(1, 2, 0)), args.output)


def cmd_degrade(args) -> None:
    img = _read_image(args.input)
    if img.height < args.scale or img.width < args.scale:
        raise CliError(EXIT_USAGE, f"image is smaller than the scale factor {args.scale}")
    _write(metrics.write_png, metrics.degrade(img, args.scale), args.output)


def cmd_eval(args) -> None:
    if args.shave is not None and args.shave < 0:
        raise CliError(EXIT_USAGE, "--shave must be non-negative")
    try:
        sr_files = {p.name: p for p in metrics.list_pngs(args.sr_dir)}
        hr_files = {p.name: p for p in metrics.list_pngs(args.hr_dir)}
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot list directory: {exc}") from exc
    if set(sr_files) != set(hr_files):
        only_sr = sorted(set(sr_files) - set(hr_files))
        only_hr = sorted(set(hr_files) - set(sr_files))
        raise CliError(EXIT_USAGE, f"file sets differ; only in SR: {only_sr}; only in HR: {only_hr}")
    if not sr_files:
        raise CliError(EXIT_USAGE, "no PNG files to evaluate")
    rows = []
    for name in sorted(sr_files):
        try:
            p, s = metrics.evaluate_pair(_read_image(sr_files[name]), _read_image(hr_files[name]), args.scale, args.shave)
        except metrics.MetricError as exc:
            raise CliError(EXIT_USAGE, f"{name}: {exc}") from exc
        rows.append((name, p, s))
    text = metrics.metrics_csv(rows)
    if args.output:
        _write(metrics.write_metrics_csv, rows, args.output)
    else:
        sys.stdout.write(text)
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    print(f"mean PSNR {mean_p:.4f} dB, mean SSIM {mean_s:.4f} over {len(rows)} images", file=sys.stderr)


def cmd_lam(args) -> None:
    if args.sigma <= 0:
        raise CliError(EXIT_USAGE, "--sigma must be positive")
    img = _read_image(args.image)
    m = _load_model(args.checkpoint)
    lr = img.data.transpose(2, 0, 1).astype(m.shallow.weight.dtype)
    try:
        amap = lam_mod.lam(m, lr, args.patch, steps=args.steps, sigma_max=args.sigma)
    except lam_mod.LamError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    out = Path(args.out)
    _write(lam_mod.render_heatmap, amap, out)
    _write(lam_mod.write_record, amap, out.with_suffix(".json"))


def _train_configs(path, iters, seed) -> tuple[model_mod.ModelConfig, train_mod.TrainConfig]:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_USAGE, f"config {path} is not valid JSON: {exc}") from exc
    try:
        mcfg = model_mod.ModelConfig.from_dict(raw.get("model", {})).validate()
        tdict = dict(raw.get("train", {}))
        if iters is not None:
            tdict["total_iters"] = iters
        if seed is not None:
            tdict["seed"] = seed
        tcfg = train_mod.TrainConfig.from_dict(tdict)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"invalid config: {exc}") from exc
    return mcfg, tcfg


def sibling(path: Path, tag: str) -> Path:
    """``run.mma`` -> ``run.<tag>``-style companion path in the same directory."""
    return path.with_name(f"{path.stem}.{tag}")


def cmd_train(args) -> None:
    mcfg, tcfg = _train_configs(args.config, args.iters, args.seed)
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise CliError(EXIT_USAGE, f"data directory not found: {data_dir}")
    files = metrics.list_pngs(data_dir)
    if not files:
        raise CliError(EXIT_USAGE, f"no PNG images in {data_dir}")
    data = [train_mod.make_pair(_read_image(f), mcfg.scale, f.name) for f in files]
    resume = None
    if args.resume:
        m = _load_model(args.resume)
        if m.config != mcfg:
            raise CliError(EXIT_MODEL, "resume checkpoint was trained with a different model config")
        _, resume = model_mod.read_checkpoint(args.resume)
        if "adam.t" not in resume:
            raise CliError(EXIT_MODEL, f"{args.resume} holds no training state")
    else:
        m = model_mod.build(mcfg, seed=tcfg.seed)
    out = Path(args.out)
    try:
        res = train_mod.train_loop(m, data, tcfg, resume=resume, checkpoint_path=out)
    except train_mod.TrainError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    _write(model_mod.save, res.model, out, train_mod.train_state(res))
    _write(model_mod.save, res.ema, sibling(out, "ema" + out.suffix))
    _write(atomic_write_text, sibling(out, "loss.csv"), train_mod.trace_csv(res.trace))


COMMANDS = {"sr": cmd_sr, "degrade": cmd_degrade, "eval": cmd_eval, "lam": cmd_lam, "train": cmd_train}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        print(f"mma {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
