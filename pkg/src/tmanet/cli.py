"""``tmanet`` command line: gen, train, eval, gradcheck, demo.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
from matplotlib import colormaps

from . import plotting
from .checkpoint import load_checkpoint
from .config import ConfigError, load_run_config
from .data import (
    SAMPLERS,
    TEST_SEED,
    SyntheticSceneSpec,
    class_palette,
    clip_from_video,
    make_videos,
    read_dataset,
    select_memory,
    verify_occluder,
    write_dataset,
)
from .errors import FormatError, TMAError
from .gradcheck import run_suite
from .metrics import evaluate, format_report
from .ppm import write_ppm
from .train import read_log, run_training

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3


class UsageError(TMAError):
    pass


class VerificationError(TMAError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pixel(text: str) -> tuple[int, int]:
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'row,col', got {text!r}") from None
    return y, x


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    if args.clips <= 0:
        raise UsageError("empty dataset")
    spec = SyntheticSceneSpec(
        num_objects=args.objects,
        num_classes=args.classes,
        occluder="occlude_query_only" if args.occlude == "query" else "none",
        seed=args.seed,
    )
    videos = make_videos(spec, args.clips, args.size, args.size, args.length)
    if args.verify:
        bad = [i for i, v in enumerate(videos) if not verify_occluder(v)]
        if bad:
            raise VerificationError(f"occluder invariant violated in clips {bad}")
        print(f"verified occluder invariant on {len(videos)} clips")
    write_dataset(args.out, [clip_from_video(v, v.query_index, range(v.query_index)) for v in videos])
    print(f"wrote {len(videos)} clips to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.to_text())
    dataset = read_dataset(args.data)
    result = run_training(run.train_config(), run.model_config(), dataset, out, resume=args.resume)
    if not args.no_figures:
        plotting.plot_loss_curve(read_log(result.log_path), out / "loss.png")
    last = result.rows[-1] if result.rows else None
    if last:
        print(f"iterations {result.optim.iteration} final_loss {last['total_loss']:.6f}")
    print(f"checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    res = evaluate(model, dataset, model.config.memory_length, args.sampler, window=args.window, seed=args.seed)
    report = format_report(res)
    sys.stdout.write(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.tsv").write_text(report)
        np.savetxt(out / "confusion.tsv", res.confusion.counts, fmt="%d", delimiter="\t")
        plotting.plot_class_iou(res.per_class, out / "iou.png", res.mean_iou)
        plotting.plot_confusion(res.confusion.counts, out / "confusion.png")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(seeds=args.seeds, model=not args.ops_only, sample=args.sample)
    elapsed = time.perf_counter() - t0
    for r in results:
        print(f"{r.name}\t{r.max_rel_error:.3e}\t{'ok' if r.passed else 'FAIL'}")
    worst = max(results, key=lambda r: r.max_rel_error)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {len(failed)} checks, worst {worst.name} ({worst.max_rel_error:.3e})", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed in {elapsed:.1f} s; worst {worst.name} ({worst.max_rel_error:.3e})")
    return EXIT_OK


def heatmap_rgb(maps: np.ndarray, vmax: float) -> np.ndarray:
    """Color (T, h, w) attention weights with a shared scale; returns (T, h, w, 3) in [0, 1]."""
    cmap = colormaps["inferno"]
    norm = maps / vmax if vmax > 0 else np.zeros_like(maps)
    return cmap(norm)[..., :3]


def cmd_demo(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    cfg = model.config
    dataset = read_dataset(args.data)
    if not 0 <= args.clip < len(dataset):
        raise UsageError(f"clip index {args.clip} outside dataset of {len(dataset)} clips")
    clip = dataset[args.clip]
    if clip.T != cfg.memory_length:
        rng = np.random.default_rng([args.seed, args.clip])
        clip = select_memory(clip, cfg.memory_length, args.sampler, args.window, rng)
    H, W = clip.size
    py, px = args.pixel if args.pixel is not None else (H // 2, W // 2)
    if not (0 <= py < H and 0 <= px < W):
        raise UsageError(f"pixel ({py}, {px}) outside {H}x{W} frame")

    out = Path(args.dump_attention)
    out.mkdir(parents=True, exist_ok=True)
    result = model.forward(clip)
    pred = np.argmax(result.main_logits.data, axis=0)
    write_ppm(out / "query.ppm", clip.query)
    write_ppm(out / "prediction.ppm", class_palette(cfg.num_classes)[pred])
    if result.attention is None:
        print("model has no temporal memory; wrote query and prediction only")
        return EXIT_OK

    att = result.attention
    stride = cfg.output_stride
    pos = (py // stride) * att.w + px // stride
    maps = att.heatmaps(pos)
    colored = heatmap_rgb(maps, float(maps.max()))
    for t in range(att.T):
        big = np.repeat(np.repeat(colored[t], stride, axis=0), stride, axis=1)
        write_ppm(out / f"attention_{t}.ppm", big)
    with open(out / "attention.tsv", "w") as fh:
        fh.write("frame\trow\tcol\tweight\n")
        for (t, r, c), v in np.ndenumerate(maps):
            fh.write(f"{t}\t{r}\t{c}\t{v:.17g}\n")
    if not args.no_figures:
        plotting.plot_attention(clip.memory, clip.query, maps, (py, px), out / "attention.png")
    print(f"query pixel ({py}, {px}) -> feature position {pos}; attention mass {maps.sum():.12f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tmanet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic TMAD dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--clips", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--length", type=int, default=30)
    g.add_argument("--occlude", choices=["none", "query"], default="none")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--objects", type=int, default=1)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--verify", action="store_true", help="check the occluder invariant before writing")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model, writing checkpoint, log and figures")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--resume", help="continue from a checkpoint written by an earlier run")
    t.add_argument("--no-figures", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mIoU report of a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--sampler", choices=SAMPLERS, default="continuous")
    e.add_argument("--window", type=int, default=10)
    e.add_argument("--seed", type=int, default=TEST_SEED)
    e.add_argument("--out", help="directory for report.tsv, confusion.tsv and figures")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the tiny model")
    c.add_argument("--size", choices=["tiny"], default="tiny")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--sample", type=int, help="check this many random elements per model parameter")
    c.add_argument("--ops-only", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("demo", help="dump query, prediction and attention heat maps")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--clip", type=int, default=0)
    d.add_argument("--dump-attention", required=True, metavar="DIR")
    d.add_argument("--pixel", type=_pixel, help="query pixel as row,col (default: frame center)")
    d.add_argument("--sampler", choices=SAMPLERS, default="continuous")
    d.add_argument("--window", type=int, default=10)
    d.add_argument("--seed", type=int, default=TEST_SEED)
    d.add_argument("--no-figures", action="store_true")
    d.set_defaults(func=cmd_demo)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by the parser
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except VerificationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, TMAError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
