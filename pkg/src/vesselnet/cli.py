"""``vesselnet`` command line: train, predict, eval, summary, gradcheck, synth.

Exit codes: 0 ok, 1 failed self-check, 2 config, 3 ingest, 4 format,
5 numeric divergence.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, checkpoint, data, gradcheck, metrics
from .autodiff import Tensor, no_grad
from .errors import ConfigError, VesselNetError
from .losses import LossWeights
from .model import ModelConfig, build, count_flops, count_params, forward
from .ops import DropBlockConfig
from .rng import Rng
from .trainer import TrainPlan, predict_batches, train

log = logging.getLogger("vesselnet")


def _channels(text):
    try:
        values = tuple(int(c) for c in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected four comma-separated ints, got {text!r}") from None
    if len(values) != 4:
        raise argparse.ArgumentTypeError(f"expected four channel widths, got {text!r}")
    return values


def _size(text):
    try:
        h, _, w = text.lower().partition("x")
        return int(h), int(w or h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def usable_cores():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def source_hash():
    """Short digest of the package sources, recorded in run manifests."""
    h = hashlib.sha256(__version__.encode())
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _model_config(args):
    return ModelConfig(
        channels=args.channels,
        skip_attention=args.skip_attention,
        bottleneck_attention=not args.no_bottleneck_sa,
        activation=args.activation,
        dropblock=DropBlockConfig(args.drop_rate, args.block_size),
    )


def _add_model_flags(p):
    p.add_argument("--channels", type=_channels, default=(16, 32, 48, 64))
    p.add_argument("--skip-attention", choices=("none", "sa", "csa"), default="csa")
    p.add_argument("--no-bottleneck-sa", action="store_true", help="drop the bottleneck SA gate")
    p.add_argument("--activation", choices=("silu", "relu"), default="silu")


# -- train -----------------------------------------------------------------


def prepare_training_data(manifest):
    """Rebuild the (train, val) sample lists described by a run manifest."""
    spec = data.DATASETS[manifest["dataset"]]
    pad_to = tuple(manifest["pad_to"])
    train_raw, _ = data.load_dataset(manifest["data_dir"], spec)
    run = Rng(manifest["seed"])
    padded = [data.pad(s, pad_to) for s in train_raw]
    augmented = data.augment(padded, manifest["augment"], run.split("augment"))
    return data.split_validation(augmented, manifest["val_fraction"], run.split("validation"))


def cmd_train(args):
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
    else:
        spec = data.DATASETS[args.dataset]
        cfg = _model_config(args)
        manifest = {
            "version": __version__,
            "source_hash": source_hash(),
            "dataset": args.dataset,
            "data_dir": str(Path(args.data_dir).resolve()),
            "pad_to": list(args.pad_to or spec.pad_to),
            "augment": args.augment,
            "val_fraction": args.val_fraction,
            "seed": args.seed,
            "model_config": cfg.to_text(),
            "plan": {
                "max_epochs": args.epochs,
                "patience": args.patience,
                "batch_size": args.batch_size or spec.batch_size,
                "lambda_bce": args.lambda_bce,
                "lambda_mcc": args.lambda_mcc,
                "lr": args.lr,
            },
        }
    cfg = ModelConfig.from_text(manifest["model_config"])
    pl = manifest["plan"]
    plan = TrainPlan(max_epochs=pl["max_epochs"], patience=pl["patience"], batch_size=pl["batch_size"],
                     weights=LossWeights(pl["lambda_bce"], pl["lambda_mcc"]), seed=manifest["seed"],
                     lr=pl["lr"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = prepare_training_data(manifest)
    log.info("training on %d samples, validating on %d", len(train_set), len(val_set))
    if args.cache_dir:
        data.write_cache(train_set + val_set, args.cache_dir, manifest["seed"], manifest["augment"])
    manifest["validation_ids"] = [s.id for s in val_set]
    (out / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")
    result = train(plan, cfg, train_set, val_set, out_dir=out)
    probs = predict_batches(result.best_params, val_set, plan.batch_size)
    manifest["best_epoch"] = result.best_epoch
    manifest["best_val_loss"] = result.best_val_loss
    manifest["best_val_metrics"] = metrics.evaluate(list(probs), [s.label for s in val_set])
    (out / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"best_epoch={result.best_epoch} val_loss={result.best_val_loss:.6f} out={out}")
    return 0


# -- predict ---------------------------------------------------------------


def _ceil8(n):
    return -(-n // 8) * 8


def predict_image(params, image):
    """Probability map for one (3, h, w) image, auto-padded to a multiple of 8."""
    h, w = image.shape[1:]
    padded = data.pad_array(image, (_ceil8(h), _ceil8(w)))
    with no_grad():
        p = forward(params, Tensor(padded[None]), mode="eval").data[0]
    return data.crop_back(p, (h, w))


def timing(params, runs=20, size=(592, 592), seed=0):
    x = Tensor(Rng(seed).split("timing").random((1, params.config.in_channels, *size)))
    times = []
    with no_grad():
        for _ in range(runs):
            start = time.perf_counter()
            forward(params, x, mode="eval")
            times.append(time.perf_counter() - start)
    return float(np.mean(times))


def cmd_predict(args):
    params, _ = checkpoint.load_checkpoint(args.model)
    if args.input:
        image = data.read_rgb(args.input)
        prob = predict_image(params, image)
        if args.output:
            data.write_png(args.output, prob)
        if args.mask_output:
            data.write_png(args.mask_output, (prob >= args.threshold).astype(np.float32))
        print(f"predicted {args.input} -> {args.output or '-'} ({prob.shape[1]}x{prob.shape[2]})")
    elif not args.timing:
        raise ConfigError("predict needs --input or --timing")
    if args.timing:
        mean_s = timing(params, args.timing_runs, args.timing_size)
        print(f"mean_s={mean_s:.4f} over {args.timing_runs} runs")
    return 0


# -- eval ------------------------------------------------------------------


def cmd_eval(args):
    params, _ = checkpoint.load_checkpoint(args.model)
    if args.run_dir:
        manifest = json.loads((Path(args.run_dir) / "run.json").read_text())
        _, val = prepare_training_data(manifest)
        probs = predict_batches(params, val, manifest["plan"]["batch_size"])
        values = metrics.evaluate(list(probs), [s.label for s in val], threshold=args.threshold,
                                  average=args.average)
        print(metrics.format_record(manifest["dataset"] + "-val", False, args.threshold, values))
        print(metrics.format_table(values))
        return 0
    if not args.data_dir:
        raise ConfigError("eval needs --data-dir or --run-dir")
    spec = data.DATASETS[args.dataset]
    _, test = data.load_dataset(args.data_dir, spec)
    preds = [predict_image(params, s.image) for s in test]
    labels = [s.label for s in test]
    if args.fov is None:
        modes = [False, True] if spec.use_fov and all(s.fov is not None for s in test) else [False]
    else:
        modes = [args.fov]
    for use_fov in modes:
        if use_fov and any(s.fov is None for s in test):
            raise ConfigError(f"--fov requested but {args.dataset} test samples have no FOV masks")
        masks = [s.fov for s in test] if use_fov else None
        values = metrics.evaluate(preds, labels, masks, args.threshold, args.average)
        print(metrics.format_record(args.dataset, use_fov, args.threshold, values))
        print(metrics.format_table(values))
    return 0


# -- summary / gradcheck / synth --------------------------------------------


def cmd_summary(args):
    cfg = _model_config(args)
    params = build(cfg, Rng(0))
    n = count_params(params)
    flops = count_flops(cfg, args.height, args.width)
    n_bytes = len(checkpoint.dumps(params))
    gates = [k for k in params if k.endswith("conv7.weight")]
    print(f"params={n} ({n / 1e6:.2f}M)")
    print(f"gflops={flops / 1e9:.2f} at {args.height}x{args.width}x{cfg.in_channels}")
    print(f"checkpoint_bytes={n_bytes} ({n_bytes / 2**20:.2f} MiB)")
    print(f"attention_blocks={len(gates)} x {params[gates[0]].size if gates else 0} params")
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_suite(args.seed, include_model=not args.ops_only)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:28s} max_rel_err={r.max_error:.2e} coords={r.n_coords}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_synth(args):
    """Write a small synthetic dataset in the training/test directory layout."""
    samples = data.synthetic_vessels(args.n, args.size, args.seed)
    root = Path(args.out)
    for split in ("training", "test"):
        for sub in ("images", "labels"):
            (root / split / sub).mkdir(parents=True, exist_ok=True)
        for s in samples:
            data.write_png(root / split / "images" / f"{s.id}.png", s.image)
            data.write_png(root / split / "labels" / f"{s.id}.png", s.label)
    print(f"wrote {args.n} synthetic {args.size}x{args.size} samples to {root}")
    return 0


# -- entry point -----------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="vesselnet", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("VESSELNET_THREADS", 0)) or usable_cores(),
                        help="BLAS threads, capped at the usable cores; 1 guarantees bitwise replay "
                             "(env VESSELNET_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    p.add_argument("--data-dir")
    p.add_argument("--dataset", choices=sorted(data.DATASETS), default="drive")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=None, help="default: 8 DRIVE, 2 STARE")
    p.add_argument("--lambda-bce", type=float, default=0.5)
    p.add_argument("--lambda-mcc", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--drop-rate", type=float, default=0.15)
    p.add_argument("--block-size", type=int, default=7)
    p.add_argument("--augment", type=int, default=len(data.DEFAULT_VARIANTS),
                   help="variants per training image")
    p.add_argument("--val-fraction", type=float, default=0.10)
    p.add_argument("--pad-to", type=_size, default=None, help="override the dataset canvas, e.g. 64x64")
    p.add_argument("--cache-dir", default=None, help="also write the augmented set here")
    p.add_argument("--from-manifest", default=None, help="replay a previous run.json")
    p.add_argument("--out", default="runs/latest")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one image and/or time inference")
    p.add_argument("--model", required=True)
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--mask-output", help="also write the binarized mask")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--timing", action="store_true")
    p.add_argument("--timing-runs", type=int, default=20)
    p.add_argument("--timing-size", type=_size, default=(592, 592))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metric suite on a test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data-dir")
    p.add_argument("--dataset", choices=sorted(data.DATASETS), default="drive")
    p.add_argument("--fov", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--average", choices=("micro", "macro"), default="micro")
    p.add_argument("--run-dir", help="evaluate on the validation set recorded in <run-dir>/run.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("summary", help="parameter count, GFLOPs and checkpoint size")
    _add_model_flags(p)
    p.add_argument("--height", type=int, default=592)
    p.add_argument("--width", type=int, default=592)
    p.set_defaults(func=cmd_summary, drop_rate=0.15, block_size=7)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic smoke-test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train" and not (args.data_dir or args.from_manifest):
        print("error: train needs --data-dir or --from-manifest", file=sys.stderr)
        return ConfigError.exit_code
    threads = max(1, args.threads)
    if threads > usable_cores():
        # oversubscribed BLAS pools spin against each other and run many times slower
        log.warning("--threads %d exceeds the %d usable cores; using %d", threads, usable_cores(), usable_cores())
        threads = usable_cores()
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except VesselNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
