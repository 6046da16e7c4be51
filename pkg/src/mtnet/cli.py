"""``mtnet`` command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
``MTNET_THREADS`` caps the BLAS thread pool.
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

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
INCOMPLETE_MARKER = "INCOMPLETE"

log = logging.getLogger("mtnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str, n: int, what: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated integers, got {text!r}")
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated integers, got {text!r}")
    return vals


def _dims(text):
    return _int_list(text, 3, "--dims")


def _subjects(text):
    vals = _int_list(text, 4, "--subjects")
    if any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("--subjects counts must be non-negative")
    return vals


# ---------------------------------------------------------------------------
# helpers


def _resolve(args, dims=None):
    from .config import RunConfig

    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(("train.seed", args.seed))
    if getattr(args, "epochs", None) is not None:
        overrides.append(("train.max_epochs", args.epochs))
    if getattr(args, "patience", None) is not None:
        overrides.append(("train.patience", args.patience))
    if getattr(args, "deterministic", False):
        overrides.append(("train.deterministic", True))
    try:
        cfg = RunConfig.resolve(args.config, overrides, dims=dims)
    except KeyError as exc:
        raise UsageError(str(exc).strip("'\""))
    except (TypeError, ValueError) as exc:
        if getattr(args, "epochs", None) is not None and getattr(args, "patience", None) is None:
            # a short --epochs run keeps early stopping meaningful
            overrides.append(("train.patience", max(1, args.epochs - 1)))
            try:
                return RunConfig.resolve(args.config, overrides, dims=dims)
            except (TypeError, ValueError):
                pass
        raise UsageError(f"invalid configuration: {exc}")
    return cfg


def _load_manifest(path):
    from .data import DatasetManifest

    if not Path(path).is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.load(path)


def _load_samples(manifest):
    from .data import load_sample

    samples = [load_sample(manifest, r) for r in manifest.records]
    if not samples:
        raise ValueError("manifest has no scans")
    dims = {s.mri.shape[1:] for s in samples}
    if len(dims) != 1:
        raise ValueError(f"volumes in the manifest have differing dims: {sorted(dims)}")
    return samples, dims.pop()


def _snapshot(cfg, out, args):
    extra = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return cfg.snapshot(out, extra)


def _args_snapshot(out: Path, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}}
    (out / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# commands


def cmd_phantom_gen(args) -> int:
    from .data import generate_dataset
    from .data.phantom import MIN_DIMS

    if any(d < lo for d, lo in zip(args.dims, MIN_DIMS)):
        raise UsageError(f"--dims {args.dims} below the minimum {MIN_DIMS}; try --dims 32,32,16")
    manifest = generate_dataset(args.out, args.subjects, args.dims, args.seed)
    _args_snapshot(Path(args.out), args)
    counts = manifest.class_counts()
    print(f"wrote {len(manifest)} scans from {len(manifest.subjects())} subjects to {args.out}")
    for name, c in counts.items():
        print(f"  {name:<7} subjects {c['subjects']:>3}  scans {c['scans']:>3}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import holdout_split
    from .networks import NumericError, build_model
    from .trainer import train

    manifest = _load_manifest(args.manifest)
    samples, dims = _load_samples(manifest)
    cfg = _resolve(args, dims)
    out = Path(args.out)
    _snapshot(cfg, out, args)
    train_recs, val_recs = holdout_split(manifest, args.val_fraction, cfg.train.seed)
    by_id = {s.record.scan_id: s for s in samples}
    model = build_model(cfg.model, seed=cfg.train.seed, weights=cfg.train.weights)
    marker = out / INCOMPLETE_MARKER
    marker.write_text("training in progress\n")
    try:
        history = train(model, [by_id[r.scan_id] for r in train_recs], [by_id[r.scan_id] for r in val_recs],
                        cfg.train, checkpoint_path=out / "best.mtck")
    except NumericError as exc:
        marker.write_text(f"aborted: {exc}\n")
        raise
    history.to_csv(out / "history.csv")
    marker.unlink()
    print(f"trained {len(history)} epochs, best epoch {history.best_epoch} "
          f"(val l_global {history.best_val:.5f}), stop: {history.stop_reason}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    from .trainer import run_cross_validation

    manifest = _load_manifest(args.manifest)
    samples, dims = _load_samples(manifest)
    cfg = _resolve(args, dims)
    out = Path(args.out)
    _snapshot(cfg, out, args)
    marker = out / INCOMPLETE_MARKER
    marker.write_text("cross-validation in progress\n")
    cv = run_cross_validation(manifest, cfg.model, cfg.train, out, k=args.folds, samples=samples, jobs=args.jobs)
    marker.unlink()
    summary = cv.summary()
    print(f"{summary['n_folds']} folds, leakage violations: {summary['leakage_violations']}")
    for k, row in summary["metrics"].items():
        print(f"  {k:<6} {row['mean']:.4f} +/- {row['sd']:.4f}")
    return EXIT_OK


def _load_model(path):
    from .networks import load_checkpoint

    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _model_input(model, path):
    from .data import load_volume, prepare_sample

    vol = load_volume(path)
    expected = tuple(model.config.synthesis.input_dims)
    if vol.dims != expected:
        raise ValueError(f"input dims {vol.dims} do not match the checkpoint's {expected}")
    return vol, prepare_sample(vol, None, 0)


def cmd_synthesize(args) -> int:
    from .data import Volume, save_volume
    from .networks import predict

    model = _load_model(args.checkpoint)
    vol, sample = _model_input(model, args.input)
    cbf, _ = predict(model, sample.mri[None])
    data = cbf[0]
    unit = "relative CBF (in-mask mean 1)"
    if args.global_mean is not None:
        data = data * args.global_mean
        unit = "ml/100g/min"
    save_volume(Volume(data.astype(np.float32), vol.spacing, unit, {"source": str(args.input)}), args.out)
    print(f"wrote {args.out} dims {vol.dims}")
    return EXIT_OK


def cmd_classify(args) -> int:
    from .networks import ClassLabel, predict

    model = _load_model(args.checkpoint)
    _, sample = _model_input(model, args.input)
    _, probs = predict(model, sample.mri[None])
    p = probs[0].astype(np.float64)
    for c in ClassLabel:
        print(f"{c.name}\t{p[c]:.6f}")
    print(f"label\t{ClassLabel(int(np.argmax(p))).name}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import emit_report, evaluate_fold

    model = _load_model(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    samples, dims = _load_samples(manifest)
    cfg = _resolve(args, dims)
    out = Path(args.out)
    _snapshot(cfg, out, args)
    e = cfg.eval
    result = evaluate_fold(model, samples, masked=e["masked"], psnr_squared=e["psnr_squared"],
                           normalization=e["normalization"])
    emit_report(result, out, config=cfg.to_dict())
    img = result.image
    print(f"{len(samples)} scans: SSIM {img['ssim']:.4f}  PSNR {img['psnr']:.2f} dB  NRMSE {img['nrmse']:.4f}  "
          f"accuracy {result.classes.average['acc']:.2f}%")
    if result.agreement is not None:
        print(result.agreement.formatted())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite

    results = run_suite(args.scope, seed=args.seed or 0)
    print(format_table(results))
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p, train_flags=True):
    p.add_argument("--config", type=Path, help="JSON run config (nested sections or flat dotted keys)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value, e.g. --set train.lr=1e-3 (repeatable)")
    if train_flags:
        p.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
        p.add_argument("--epochs", type=int, help="maximum epochs (overrides train.max_epochs)")
        p.add_argument("--patience", type=int, help="early-stopping patience (overrides train.patience)")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded BLAS and seeded batch order for bitwise-reproducible runs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtnet", description="Multi-task MRI-to-PET CBF synthesis and cerebrovascular classification.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom-gen", help="write a synthetic phantom dataset and manifest")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--subjects", type=_subjects, default=(4, 4, 1, 1),
                   help="subjects per class HC,MMD,ICSD,Stroke (default 4,4,1,1)")
    p.add_argument("--dims", type=_dims, default=(32, 32, 16), help="volume dims m,n,p (default 32,32,16)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train one model with a subject-level validation holdout")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--val-fraction", type=float, default=0.1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="k-fold subject-grouped cross-validation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--jobs", type=int, default=1, help="folds trained in parallel")
    _add_config_flags(p)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("synthesize", help="predict a CBF volume from an 8-channel MRI volume")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--global-mean", type=float,
                   help="whole-brain mean CBF in ml/100g/min used to rescale the relative output")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("classify", help="print class probabilities and the predicted label")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest and write a report directory")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p, train_flags=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--scope", default="all", choices=["all", "ops", "losses", "attention", "model"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit(args):
    from threadpoolctl import threadpool_limits

    env = os.environ.get("MTNET_THREADS")
    if getattr(args, "deterministic", False):
        return threadpool_limits(limits=1)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"MTNET_THREADS must be a positive integer, got {env!r}")
        if n < 1:
            raise UsageError(f"MTNET_THREADS must be a positive integer, got {env!r}")
        return threadpool_limits(limits=n)
    return contextlib.nullcontext()


def main(argv=None) -> int:
    from .data import VolumeFormatError
    from .networks import CheckpointError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args):
            return args.func(args)
    except UsageError as exc:
        print(f"mtnet {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:  # includes NumericError
        print(f"mtnet {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, VolumeFormatError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"mtnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
