"""Command-line entry point: ``astrocnn <subcommand> [options]``.

Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error. Before
doing any work, each run prints its fully resolved configuration as one
JSON line on standard error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__

THREADS_ENV = "ASTROCNN_THREADS"
METHODS = ("wiener", "rl", "tv")
BENCH_METHODS = ("none", "wiener", "rl", "tv", "cnn1", "cnn3")

log = logging.getLogger("astrocnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _method_list(text):
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in BENCH_METHODS]
    if bad or not methods:
        raise argparse.ArgumentTypeError(
            f"invalid method(s) {','.join(bad) or text!r}; choose from {','.join(BENCH_METHODS)}"
        )
    return methods


def _load_psf(path, support, fwhm):
    from .formats import read_image
    from .psf import airy_kernel

    if path:
        return read_image(path).astype(np.float64)
    return airy_kernel(support, fwhm)


def _psf_args(p):
    p.add_argument("--psf", help="PSF kernel file; default: Airy kernel from --support/--fwhm")
    p.add_argument("--support", type=int, default=64, help="Airy kernel support in pixels")
    p.add_argument("--fwhm", type=float, default=8.0, help="Airy FWHM in pixels")


def _data_args(p):
    p.add_argument("--corpus", required=True, help="directory of clean .imf1/.pgm images")
    p.add_argument("--exclude", default=None, help="image id left out of the training data")
    _psf_args(p)
    p.add_argument("--sigma", type=float, default=0.01, help="Gaussian noise standard deviation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=_positive_int, default=100_000)
    p.add_argument("--val", type=_positive_int, default=50_000)


def _train_config(args):
    from .cnn import TrainConfig

    return TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        nesterov=not args.no_nesterov,
        batch_size=args.batch,
        max_epochs=args.epochs,
        early_stop=not args.no_early_stop,
        seed=args.seed,
    )


def _train_args(p):
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--no-nesterov", action="store_true")
    p.add_argument("--batch", type=_positive_int, default=50)
    p.add_argument("--epochs", type=_positive_int, default=30)
    p.add_argument("--no-early-stop", action="store_true")


# ---------------------------------------------------------------- commands

def cmd_psf(args):
    from .formats import write_image
    from .psf import airy_kernel

    psf = airy_kernel(args.support, args.fwhm)
    write_image(psf.kernel, args.out)
    if args.view:
        mag = np.sqrt(psf.kernel.astype(np.float64))
        write_image(mag / mag.max(), args.view)
    log.info("scale %.6g, first dark ring at %.4f px", psf.scale, psf.first_dark_ring)


def cmd_synth(args):
    from .corpus import synthetic_corpus, write_corpus

    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_corpus(synthetic_corpus(args.n, args.size, args.seed), args.out)


def cmd_degrade(args):
    from .degrade import NoiseSpec, degrade
    from .formats import read_image, write_image
    from .image import normalize_max

    clean = normalize_max(read_image(getattr(args, "in")))
    psf = _load_psf(args.psf, args.support, args.fwhm)
    write_image(degrade(clean, psf, NoiseSpec(args.sigma, args.seed)), args.out)


def _build(args):
    from .corpus import load_corpus
    from .dataset import DatasetSpec, build_dataset
    from .degrade import NoiseSpec

    corpus = load_corpus(args.corpus)
    if args.exclude is not None and args.exclude not in corpus:
        raise ValueError(f"--exclude {args.exclude!r} is not in the corpus ({', '.join(corpus)})")
    psf = _load_psf(args.psf, args.support, args.fwhm)
    spec = DatasetSpec(args.samples, args.val, args.seed, args.exclude)
    return build_dataset(corpus, psf, NoiseSpec(args.sigma), spec)


def cmd_dataset(args):
    from .dataset import save_patchset

    train_set, val_set = _build(args)
    save_patchset(train_set, args.out)
    if args.val_out:
        save_patchset(val_set, args.val_out)


def cmd_train(args):
    from .cnn import build_1cnn, build_3cnn, save_model, train

    train_set, val_set = _build(args)
    model = build_3cnn(args.seed) if args.arch == "3cnn" else build_1cnn(args.seed)
    model, history = train(model, train_set, val_set, _train_config(args))
    save_model(model, args.out)
    log.info("kept epoch %d; validation loss %.6g -> %.6g", history.best_epoch,
             history.initial_val_loss,
             history.val_loss[history.best_epoch - 1] if history.best_epoch else history.initial_val_loss)


def cmd_predict(args):
    from .cnn import load_model
    from .formats import read_image, write_image
    from .predict import predict_image

    model = load_model(args.model)
    write_image(predict_image(model, read_image(getattr(args, "in"))), args.out)


def cmd_deconv(args):
    from .classical import RlParams, TvParams, WienerParams, autotune, deconvolve
    from .formats import read_image, write_image

    y = read_image(getattr(args, "in"))
    psf = _load_psf(args.psf, args.support, args.fwhm)
    if args.autotune:
        from .image import normalize_max

        result = autotune(args.method, y, psf, normalize_max(read_image(args.ref)))
        log.info("best %s: %s at %.3f dB", args.method, result.params, result.psnr_db)
        out = result.image
    else:
        if args.method == "wiener":
            params = WienerParams(args.lam if args.lam is not None else 1e-2)
        elif args.method == "rl":
            params = RlParams(args.iters if args.iters is not None else 30)
        else:
            params = TvParams(lam=args.lam if args.lam is not None else 1e-2,
                              iterations=args.iters if args.iters is not None else 100)
        out = deconvolve(args.method, y, psf, params)
    write_image(out, args.out)


def cmd_featuremaps(args):
    from .cnn import load_model
    from .formats import read_image, write_image
    from .predict import extract_feature_maps

    model = load_model(args.model)
    maps = extract_feature_maps(model, read_image(getattr(args, "in")), args.layer)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for c, fmap in enumerate(maps):
        peak = float(fmap.max())
        # each channel is scaled to its own maximum so the PGM uses the full range
        view = fmap / peak if peak > 0 else np.zeros_like(fmap)
        write_image(view, outdir / f"layer{args.layer}_ch{c:02d}.pgm")


def cmd_bench(args):
    from .bench import run_benchmark, train_leave_one_out
    from .cnn import load_model, save_model
    from .corpus import load_corpus
    from .degrade import NoiseSpec

    corpus = load_corpus(args.corpus)
    psf = _load_psf(args.psf, args.support, args.fwhm)
    noise = NoiseSpec(args.sigma)
    models = {}
    for method in (m for m in args.methods if m.startswith("cnn")):
        cached = {}
        if args.models_dir:
            for image_id in corpus:
                path = Path(args.models_dir) / f"{method}_{image_id}.cnn1"
                if path.exists():
                    cached[image_id] = load_model(path)
        if len(cached) < len(corpus):
            trained = train_leave_one_out(corpus, psf, noise, method, args.samples, args.val,
                                          _train_config(args), seed=args.seed)
            for image_id, model in trained.items():
                cached.setdefault(image_id, model)
                if args.models_dir:
                    Path(args.models_dir).mkdir(parents=True, exist_ok=True)
                    save_model(model, Path(args.models_dir) / f"{method}_{image_id}.cnn1")
        models[method] = cached
    report = run_benchmark(corpus, psf, noise, args.methods, models, seed=args.seed)
    report.write(args.out)
    print(report.summary())


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help=f"cap on worker threads (default: ${THREADS_ENV} or library default); "
                             "1 makes runs bit-reproducible")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="astrocnn", description="Astronomical image deconvolution toolkit.")
    parser.add_argument("--version", action="version", version=f"astrocnn {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("psf", parents=[common], help="write an Airy PSF kernel")
    p.add_argument("--support", type=int, default=64)
    p.add_argument("--fwhm", type=float, default=8.0)
    p.add_argument("--out", required=True)
    p.add_argument("--view", help="also write sqrt(|kernel|) as a PGM")
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic sky corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive_int, default=6)
    p.add_argument("--size", type=_positive_int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", parents=[common], help="blur and add noise to a clean image")
    _psf_args(p)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("dataset", parents=[common], help="write training patch pairs")
    _data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--val-out", default=None)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", parents=[common], help="train a network")
    _data_args(p)
    _train_args(p)
    p.add_argument("--arch", choices=("3cnn", "1cnn"), default="3cnn")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="reconstruct an image with a network")
    p.add_argument("--model", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("deconv", parents=[common], help="classical deconvolution")
    p.add_argument("--method", choices=METHODS, required=True)
    _psf_args(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--iters", type=_positive_int, default=None)
    p.add_argument("--autotune", action="store_true", help="grid-search against --ref")
    p.add_argument("--ref", help="clean reference image for --autotune")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_deconv)

    p = sub.add_parser("featuremaps", parents=[common], help="dump one PGM per channel")
    p.add_argument("--model", required=True)
    p.add_argument("--in", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_featuremaps)

    p = sub.add_parser("bench", parents=[common], help="benchmark methods on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--methods", type=_method_list, default=list(BENCH_METHODS))
    _psf_args(p)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=_positive_int, default=100_000)
    p.add_argument("--val", type=_positive_int, default=50_000)
    _train_args(p)
    p.add_argument("--models-dir", help="reuse/save leave-one-out models here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def resolve_threads(flag: int | None) -> int | None:
    if flag is not None:
        return flag
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if value < 1:
            raise UsageError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return value
    return None


def resolved_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    cfg["argv"] = sys.argv[1:]
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        if args.command == "deconv" and args.autotune and not args.ref:
            parser.error("deconv --autotune needs --ref <clean image>")
        args.threads = resolve_threads(args.threads)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    print(json.dumps(resolved_config(args), sort_keys=True, default=str), file=sys.stderr)

    limit = contextlib.nullcontext()
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limit = threadpool_limits(limits=args.threads)
    try:
        with limit:
            args.func(args)
    except (OSError, ValueError, ArithmeticError, RuntimeError, IndexError, KeyError) as exc:
        print(f"astrocnn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
