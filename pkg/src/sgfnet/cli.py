"""``sgfnet`` command line: gen, train, eval, infer, hpf, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .data import PnmError, gen_dataset, load_dataset, load_image_pair, read_pgm, save_dataset, write_pgm, write_ppm
from .gradcheck import BLOCK_TOLERANCE, OP_TOLERANCE, run_suite
from .metrics import ConfusionMatrix
from .network import NonFiniteLossError, evaluate, load_checkpoint, save_checkpoint, train
from .serialize import FormatError
from .spectral import high_pass
from .tensor import DimensionError, inject_backward_fault

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# class 0 (background) is black; the rest cycle through distinct hues
PALETTE = np.array([
    [0, 0, 0], [230, 60, 50], [60, 140, 230], [250, 200, 40],
    [70, 190, 90], [170, 80, 200], [240, 130, 40], [40, 200, 200],
], dtype=np.uint8)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def colorize(labels: np.ndarray) -> np.ndarray:
    return PALETTE[labels % len(PALETTE)]


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    try:
        samples = gen_dataset(args.n, args.h, args.w, args.k, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    save_dataset(args.out, samples, {"n": args.n, "h": args.h, "w": args.w, "k": args.k, "seed": args.seed})
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    items = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        items[key.strip()] = value.strip()
    return items


def _load_split(path, k: int):
    samples, meta = load_dataset(path)
    if meta["k"] > k:
        raise DataError(f"dataset {path} has {meta['k']} classes, model has {k}")
    return samples


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.overrides)
    if args.resume:
        overrides["resume"] = args.resume
    if args.out:
        overrides["out"] = args.out
    try:
        run = RunConfig.load(args.config, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}") from exc
    if not run.data:
        raise UsageError("no training data: set data = DIR in the config or as an override")
    cfg = run.network
    train_set = _load_split(run.data, cfg.num_classes)
    eval_set = _load_split(run.eval_data, cfg.num_classes) if run.eval_data else None

    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text())
    mode = "a" if run.resume else "w"
    with open(out / "metrics.log", mode) as log:
        def on_log(line):
            print(line, flush=True)
            log.write(line + "\n")
            log.flush()

        t0 = time.perf_counter()
        result = train(cfg, train_set, eval_set, out_dir=out, resume=run.resume, on_log=on_log)
    with open(out / "losses.txt", mode) as f:
        f.writelines(f"{v:.9g}\n" for v in result.step_losses)
    if not (out / "checkpoint").exists():
        save_checkpoint(out / "checkpoint", result.model, result.velocity, result.epoch)
    print(f"trained to epoch {result.epoch} in {time.perf_counter() - t0:.1f}s; checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def format_table(cm: ConfusionMatrix) -> str:
    m = cm.metrics()

    def cell(v):
        return "     -" if np.isnan(v) else f"{100 * v:6.2f}"

    lines = ["class     Acc     IoU"]
    for c in range(cm.num_classes):
        lines.append(f"{c:>5d}  {cell(m['per_class_acc'][c])}  {cell(m['per_class_iou'][c])}")
    lines.append(f"mAcc {100 * m['macc']:.2f}  mIoU {100 * m['miou']:.2f}")
    return "\n".join(lines)


def _load_model(path):
    if not (Path(path) / "manifest.txt").is_file():
        raise DataError(f"no checkpoint at {path}")
    try:
        return load_checkpoint(path)[0]
    except (FormatError, ConfigError, ValueError) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}") from exc


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    samples = _load_split(args.data, model.config.num_classes)
    print(format_table(evaluate(model, samples)))
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.ckpt)
    rgb, th = load_image_pair(args.rgb, args.th)
    try:
        pred = model.predict(rgb[None], th[None])[0]
    except DimensionError as exc:
        raise DataError(f"input size unsupported by the model: {exc}") from exc
    out = Path(args.out)
    write_pgm(out, pred.astype(np.uint8))
    color = out.with_name(out.stem + "_color.ppm")
    write_ppm(color, colorize(pred))
    print(f"wrote {out} and {color}")
    return EXIT_OK


def rescale_filtered(filtered: np.ndarray, cutoff: float) -> np.ndarray:
    """8-bit rendering: unchanged scale at cutoff 0, else zero maps to mid-gray."""
    if cutoff == 0:
        return np.clip(np.round(filtered), 0, 255).astype(np.uint8)
    peak = np.abs(filtered).max()
    scaled = 128.0 + (filtered * (127.0 / peak) if peak > 1e-9 else 0.0 * filtered)
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def cmd_hpf(args) -> int:
    if not 0.0 <= args.cutoff <= 1.0:
        raise UsageError(f"--cutoff must lie in [0, 1], got {args.cutoff}")
    img = read_pgm(args.inp).astype(np.float64)
    write_pgm(args.out, rescale_filtered(high_pass(img, args.cutoff), args.cutoff))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = tuple(range(args.seed, args.seed + 3))
    t0 = time.perf_counter()
    with inject_backward_fault(*args.inject_fault):
        ops, block = run_suite(seeds, args.size)
    failed = False
    for name, err in ops.items():
        ok = err < OP_TOLERANCE
        failed |= not ok
        print(f"{name:<24s} {err:.3e}  {'ok' if ok else 'FAIL'}")
    ok = block < BLOCK_TOLERANCE
    failed |= not ok
    print(f"{'sgf_block':<24s} {block:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"seeds {seeds[0]}..{seeds[-1]}, {time.perf_counter() - t0:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sgfnet", description="RGB-thermal segmentation with spectral-guided fusion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic RGB-thermal dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=250, help="number of samples")
    g.add_argument("--h", type=int, default=64, help="image height (multiple of 16)")
    g.add_argument("--w", type=int, default=96, help="image width (multiple of 16)")
    g.add_argument("--k", type=int, default=4, help="number of classes including background")
    g.add_argument("--seed", type=int, default=0, help="generator seed")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--out", help="output directory (overrides the config's out)")
    t.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, applied after --config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class accuracy and IoU of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True, help="checkpoint directory")
    e.add_argument("--data", required=True, help="dataset directory")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="segment one RGB-thermal pair")
    i.add_argument("--ckpt", required=True, help="checkpoint directory")
    i.add_argument("--rgb", required=True, help="RGB image (binary PPM)")
    i.add_argument("--th", required=True, help="thermal image (binary PGM)")
    i.add_argument("--out", required=True, help="label PGM; a color PPM is written next to it")
    i.set_defaults(func=cmd_infer)

    h = sub.add_parser("hpf", help="DCT high-pass filter a grayscale image")
    h.add_argument("--in", dest="inp", required=True, help="input PGM")
    h.add_argument("--cutoff", type=float, default=0.1, help="normalised radial cutoff in [0, 1]")
    h.add_argument("--out", required=True, help="output PGM")
    h.set_defaults(func=cmd_hpf)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the fusion block")
    c.add_argument("--seed", type=int, default=0, help="first of three consecutive seeds")
    c.add_argument("--size", type=int, default=5, help="spatial size of the test tensors")
    c.add_argument("--inject-fault", action="append", default=[], metavar="OP", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    # overrides may be interleaved with options, which a plain positional cannot absorb
    args, extra = parser.parse_known_args(argv)
    if extra:
        if args.command != "train" or any(a.startswith("-") for a in extra):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sgfnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PnmError, FormatError, FileNotFoundError, NotADirectoryError, KeyError) as exc:
        print(f"sgfnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"sgfnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
