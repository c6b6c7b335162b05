"""Command-line front end exposing every pipeline stage.

Results go to stdout with six-decimal formatting; the one-line config
echo and errors go to stderr, so stdout is stable across thread counts.
Exit codes: 0 success, 1 usage error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import ann, cxloss, metrics, objectives
from . import bank as bank_mod
from ._util import resolve_threads
from .realify import OptimizeConfig
from .realify import realify as run_realify
from .errors import FormatError
from .imaging import (
    DEFAULT_SCALES,
    Image,
    LabelMaskSet,
    ScaleSpec,
    load_image,
    load_masks,
    save_png,
)

DEFAULT_SCALE_FLAG = ",".join(str(s) for s in DEFAULT_SCALES)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit 1 instead of argparse's 2
        raise UsageError(message)


def _parse_scales(text: str) -> tuple[ScaleSpec, ...]:
    try:
        scales = tuple(ScaleSpec.parse(part) for part in text.split(","))
    except ValueError as exc:
        raise UsageError(str(exc))
    if not scales:
        raise UsageError("no scales given")
    return scales


def _parse_nprobe(text: str) -> int | None:
    if text == "all":
        return -1  # resolved to n_list downstream
    try:
        value = int(text)
    except ValueError:
        raise UsageError(f"bad nprobe {text!r}")
    if value < 1:
        raise UsageError("nprobe must be >= 1 or 'all'")
    return value


def _echo(args: argparse.Namespace, skip=("func",)) -> None:
    pairs = " ".join(
        f"{key}={getattr(args, key)}"
        for key in sorted(vars(args))
        if key not in skip and not key.startswith("_")
    )
    print(f"config {args._command} {pairs}", file=sys.stderr)


def _load_corpus(images_dir: Path, masks_root: Path | None):
    paths = sorted(
        p for p in images_dir.iterdir() if p.suffix.lower() in (".png", ".ppm")
    )
    if not paths:
        raise FormatError(f"no .png or .ppm images under {images_dir}")
    corpus = []
    for path in paths:
        img = load_image(path)
        if masks_root is not None and (masks_root / path.stem).is_dir():
            masks = load_masks(masks_root / path.stem, (img.width, img.height))
        else:
            masks = LabelMaskSet.empty(img.width, img.height)
        corpus.append((img, masks))
    return corpus


def _load_image_and_masks(image_path: str, masks_dir: str | None):
    img = load_image(image_path)
    if masks_dir:
        masks = load_masks(masks_dir, (img.width, img.height))
    else:
        masks = LabelMaskSet.empty(img.width, img.height)
    return img, masks


def _resolve_nprobe(value: int | None, index: ann.AnnIndex) -> int | None:
    if value == -1:
        return index.n_list
    return value


def cmd_build_bank(args) -> int:
    scales = _parse_scales(args.scale)
    corpus = _load_corpus(Path(args.images), Path(args.masks) if args.masks else None)
    by_scale = {}
    indexes = {}
    for scale in scales:
        banks = bank_mod.build_banks(
            corpus,
            scale,
            pca_threshold=args.pca_threshold,
            quantize=args.quantize,
        )
        by_scale[scale] = banks
        if args.with_index:
            for class_id, b in banks.items():
                indexes[(class_id, scale)] = ann.train_index(b, seed=args.seed)
    written = bank_mod.save_bank_dir(
        by_scale, args.out, indexes=indexes if args.with_index else None
    )
    for path in written:
        b = bank_mod.load_bank(path)
        print(
            f"bank class {b.class_id} scale {b.scale} dim {b.dim} "
            f"count {b.count} file {path.name}"
        )
    return 0


def cmd_bank_info(args) -> int:
    b, index = bank_mod.load_bank_with_index(args.bank)
    print(
        f"bank class {b.class_id} scale {b.scale} dim {b.dim} count {b.count} "
        f"quantized {int(b.quant is not None)} pca {int(b.pca is not None)} "
        f"indexed {int(index is not None)}"
    )
    print(f"mean_norm {float(np.linalg.norm(b.mean)):.6f}")
    return 0


def cmd_search(args) -> int:
    b, index = bank_mod.load_bank_with_index(args.bank)
    queries = metrics.load_features(args.query).matrix
    if queries.shape[1] != b.dim:
        raise FormatError(f"query dim {queries.shape[1]} != bank dim {b.dim}")
    centered = queries - b.mean.astype(np.float64)
    threads = resolve_threads(args.threads)
    if args.exact:
        hits = ann.exact_search(b, centered, args.k, threads=threads)
    else:
        if index is None:
            index = ann.train_index(b, n_list=args.nlist, seed=args.seed)
        hits = ann.search(
            index, b, centered, args.k, _resolve_nprobe(args.nprobe, index), threads=threads
        )
    for i, ns in enumerate(hits):
        cells = " ".join(
            f"{int(j)}:{dist:.6f}" for j, dist in zip(ns.ids, ns.distances)
        )
        print(f"query {i} {cells}")
    return 0


def cmd_cx_loss(args) -> int:
    img, masks = _load_image_and_masks(args.image, args.masks)
    banks, indexes = bank_mod.load_bank_dir(args.banks)
    # nprobe -1 ("all") probes every list; search clamps it per index.
    nprobe = None if args.nprobe is None else (10**9 if args.nprobe == -1 else args.nprobe)
    cfg = cxloss.CxConfig(
        scales=_parse_scales(args.scales),
        h=args.h,
        k=args.k,
        nprobe=nprobe,
        exact=args.exact,
        index_seed=args.seed,
        stop_grad_min=args.stop_grad_min,
        threads=resolve_threads(args.threads),
    )
    if args.grad_out:
        grad, report = cxloss.cx_loss_gradient(
            img, banks, masks, cfg, indexes=indexes or None
        )
        metrics.save_features(grad.reshape(-1, 3), args.grad_out)
    else:
        report = cxloss.multiscale_cx_loss(img, banks, masks, cfg, indexes=indexes or None)
    for (scale, class_id), (loss, n) in report.per_class.items():
        print(f"scale {scale} class {class_id} loss {loss:.6f} n {n}")
    for scale, loss in report.per_scale.items():
        print(f"scale {scale} total {loss:.6f}")
    print(f"total {report.total:.6f}")
    return 0


def cmd_realify(args) -> int:
    img, masks = _load_image_and_masks(args.image, args.masks)
    banks, indexes = bank_mod.load_bank_dir(args.banks)
    cx_cfg = cxloss.CxConfig(
        scales=_parse_scales(args.scales),
        h=args.h,
        k=args.k,
        index_seed=args.seed,
        stop_grad_min=args.stop_grad_min,
        threads=resolve_threads(args.threads),
    )
    cfg = OptimizeConfig(
        steps=args.steps,
        lr=args.lr,
        content_weight=args.content_weight,
        patience=args.patience,
        seed=args.seed,
    )
    best, trace = run_realify(img, banks, masks, cfg, cx_cfg, indexes=indexes or None)
    if args.out:
        save_png(best, args.out)
    if args.trace_out:
        with open(args.trace_out, "w") as fh:
            fh.write("step,total,cx,anchor\n")
            for i in range(len(trace)):
                fh.write(
                    f"{i},{trace.total[i]:.6f},{trace.cx[i]:.6f},{trace.anchor[i]:.6f}\n"
                )
    print(
        f"steps {len(trace)} best_step {trace.best_step} "
        f"best_total {trace.best_total:.6f} best_cx {trace.cx[trace.best_step]:.6f} "
        f"best_anchor {trace.anchor[trace.best_step]:.6f}"
    )
    return 0


def cmd_fid(args) -> int:
    a = metrics.gaussian_fit(metrics.load_features(args.a))
    b = metrics.gaussian_fit(metrics.load_features(args.b))
    print(f"fid {metrics.fid(a, b):.6f}")
    return 0


def cmd_entropy(args) -> int:
    rows = metrics.load_features(args.probs).matrix
    print(f"entropy {metrics.mean_entropy(rows):.6f}")
    return 0


def cmd_losses(args) -> int:
    if not args.demo:
        raise UsageError("losses currently only supports --demo")
    half = objectives.DiscriminatorOutputs(
        on_real=np.array([0.5]), on_fake=np.array([0.5])
    )
    g = objectives.gan_loss(half)
    x = Image(np.zeros((2, 2, 3)))
    rx = Image(np.full((2, 2, 3), 0.5))
    cyc = objectives.cycle_loss(x, rx, x, x, norm=args.cycle_norm)
    cca = objectives.cca_loss(g, g, cyc)
    full = objectives.full_loss(cca, 2.0, objectives.LossWeights())
    print(f"gan_half {g:.6f}")
    print(f"cycle_demo {cyc:.6f}")
    print(f"cca_demo {cca:.6f}")
    print(f"full_demo {full:.6f}")
    for epoch in (39, 40, 60, 61):
        print(f"mask_refresh_{epoch} {str(objectives.mask_refresh_due(epoch)).lower()}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="patchreal", description=__doc__)
    sub = parser.add_subparsers(dest="_command", required=True)

    def common(p: _Parser) -> None:
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build-bank", help="build memory banks from a photo corpus")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--scale", default=DEFAULT_SCALE_FLAG)
    p.add_argument("--out", required=True)
    p.add_argument("--pca-threshold", type=int, default=bank_mod.DEFAULT_PCA_THRESHOLD)
    p.add_argument("--quantize", action="store_true")
    p.add_argument("--with-index", action="store_true")
    common(p)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("bank-info", help="describe a bank file")
    p.add_argument("bank")
    common(p)
    p.set_defaults(func=cmd_bank_info)

    p = sub.add_parser("search", help="k-NN search over a bank")
    p.add_argument("--bank", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=ann.DEFAULT_K)
    p.add_argument("--nprobe", type=_parse_nprobe, default=None)
    p.add_argument("--nlist", type=int, default=None)
    p.add_argument("--exact", action="store_true")
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("cx-loss", help="multi-scale contextual loss of an image")
    p.add_argument("--image", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--banks", required=True)
    p.add_argument("--scales", default=DEFAULT_SCALE_FLAG)
    p.add_argument("--h", type=float, default=cxloss.DEFAULT_BANDWIDTH)
    p.add_argument("--k", type=int, default=cxloss.DEFAULT_K)
    p.add_argument("--nprobe", type=_parse_nprobe, default=None)
    p.add_argument("--exact", action="store_true")
    p.add_argument("--grad-out", default=None)
    p.add_argument("--stop-grad-min", action="store_true")
    common(p)
    p.set_defaults(func=cmd_cx_loss)

    p = sub.add_parser("realify", help="optimize image pixels against the banks")
    p.add_argument("--image", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--banks", required=True)
    p.add_argument("--scales", default=DEFAULT_SCALE_FLAG)
    p.add_argument("--h", type=float, default=cxloss.DEFAULT_BANDWIDTH)
    p.add_argument("--k", type=int, default=cxloss.DEFAULT_K)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.0002)
    p.add_argument("--content-weight", type=float, default=0.01)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--stop-grad-min", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--trace-out", default=None)
    common(p)
    p.set_defaults(func=cmd_realify)

    p = sub.add_parser("fid", help="Frechet distance between two feature files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    common(p)
    p.set_defaults(func=cmd_fid)

    p = sub.add_parser("entropy", help="mean entropy of probability rows")
    p.add_argument("--probs", required=True)
    common(p)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("losses", help="objective demo values")
    p.add_argument("--demo", action="store_true")
    p.add_argument("--cycle-norm", choices=("l1", "l2"), default="l1")
    common(p)
    p.set_defaults(func=cmd_losses)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _echo(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
