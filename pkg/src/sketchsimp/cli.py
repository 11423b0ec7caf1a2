"""Command-line interface.

Subcommands: gen-data, train, compare, simplify, pencil, optimize-single,
export, eval. Training configuration comes from defaults, an optional YAML
config file and dotted key=value overrides, in that order of precedence; the
resolved config is written next to the run outputs. Exit codes: 0 success,
2 input/configuration error, 3 checkpoint/model error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, desk_preset, load_config, TrainingConfig
from .data import (DatasetError, DatasetPools, SyntheticSketchSpec,
                   export_dataset, generate_synthetic, load_dataset,
                   load_image, save_image)
from .losses import Regime, RegimeError
from .trainer import TrainingDiverged, compare_regimes, train, validation_mse

EXIT_INPUT_ERROR = 2
EXIT_MODEL_ERROR = 3


def _default_out() -> str:
    return os.environ.get("SKETCHSIMP_OUT", "out")


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        overrides[key] = value
    return overrides


def _resolve_config(args) -> TrainingConfig:
    base = desk_preset() if getattr(args, "preset", None) == "desk" \
        else TrainingConfig()
    return load_config(getattr(args, "config", None),
                       _parse_overrides(getattr(args, "override", [])),
                       base=base)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="YAML config file")
    p.add_argument("--preset", choices=["full", "desk"], default="full",
                   help="base defaults before config/overrides")
    p.add_argument("override", nargs="*", metavar="key=value",
                   help="dotted config overrides, e.g. regime=mse_only")
    p.add_argument("--out", type=Path, default=None,
                   help="output directory (default $SKETCHSIMP_OUT or ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketchsimp",
        description="Sketch simplification / pencil drawing training and "
                    "inference")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pairs", type=int, default=24)
    p.add_argument("--rough", type=int, default=24)
    p.add_argument("--clean", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=128)
    p.add_argument("--jitter", type=float, default=2.5)
    p.add_argument("--overdraw", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.002)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", type=Path, required=True, help="dataset root")
    _add_config_args(p)

    p = sub.add_parser("compare", help="train and score several regimes")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--regimes", nargs="+",
                   default=[r.value for r in Regime],
                   choices=[r.value for r in Regime])
    p.add_argument("--val-fraction", type=float, default=0.2)
    _add_config_args(p)

    for name, help_text in (("simplify", "clean up a rough sketch"),
                            ("pencil", "render a pencil drawing")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--input", type=Path, required=True,
                       help="image file or directory")
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--threshold", type=float, default=None,
                       help="snap output pixels below this value to black")
        p.add_argument("--tile-size", type=int, default=None)
        p.add_argument("--tile-overlap", type=int, default=None)

    p = sub.add_parser("optimize-single",
                       help="adapt the model to one unlabeled image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True,
                   help="dataset providing the clean pool")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--beta", type=float, default=8e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("export", help="write a folded inference checkpoint")
    p.add_argument("checkpoint_in", type=Path)
    p.add_argument("checkpoint_out", type=Path)

    p = sub.add_parser("eval", help="validation metrics for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------
# Command implementations

def _cmd_gen_data(args) -> int:
    spec = SyntheticSketchSpec(canvas_size=args.canvas, jitter=args.jitter,
                               overdraw=args.overdraw,
                               noise_density=args.noise)
    pools = generate_synthetic(spec, args.pairs, args.rough, args.clean,
                               seed=args.seed)
    export_dataset(pools, args.out)
    print(f"wrote {pools.counts()} (pairs, rough, clean) under {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    pools = load_dataset(args.data)
    out = args.out or Path(_default_out())
    ckpt, records = train(pools, config, out_dir=out)
    save_checkpoint(ckpt, out / "checkpoints" / "final.ckpt")
    print(f"trained {config.regime.value} for {ckpt.iteration} iterations; "
          f"final total_S = {records[-1].breakdown['total_S']:.6f}" if records
          else "no iterations run")
    print(f"checkpoint: {out / 'checkpoints' / 'final.ckpt'}")
    return 0


def _cmd_compare(args) -> int:
    config = _resolve_config(args)
    pools = load_dataset(args.data)
    n_val = max(1, int(len(pools.supervised) * args.val_fraction))
    val_pairs = pools.supervised[-n_val:]
    train_pools = DatasetPools(pools.supervised[:-n_val], pools.rough_only,
                               pools.clean_only)
    if not train_pools.supervised:
        raise DatasetError("not enough pairs to split a validation set")
    from .data import compute_input_mean
    train_pools.input_mean = compute_input_mean(train_pools.supervised)
    out = args.out or Path(_default_out())
    rows = compare_regimes(train_pools, config,
                           [Regime(r) for r in args.regimes], val_pairs,
                           out_dir=out)
    header = f"{'regime':28s} {'val_mse':>10s} {'midtone':>9s} {'fool':>6s}"
    print(header)
    for row in rows:
        print(f"{row['regime']:28s} {row['val_mse']:10.6f} "
              f"{row['midtone_fraction']:9.4f} {row['fool_rate']:6.3f}")
    print(f"metrics written to {out / 'metrics.csv'}")
    return 0


def _iter_inputs(path: Path):
    if path.is_dir():
        from .data import _list_images
        yield from _list_images(path)
    else:
        yield path


def _cmd_simplify(args, pencil: bool) -> int:
    from .inference import (InferenceOptions, pencil_generate, simplify)
    ckpt = load_checkpoint(args.checkpoint)
    options = InferenceOptions(
        apply_threshold=args.threshold is not None,
        threshold=args.threshold if args.threshold is not None else 0.9,
        tile_size=args.tile_size, tile_overlap=args.tile_overlap)
    out_dir = args.out or Path(_default_out())
    out_dir.mkdir(parents=True, exist_ok=True)
    fn = pencil_generate if pencil else simplify
    for path in _iter_inputs(args.input):
        image = load_image(path)
        result = fn(ckpt, image, options)
        target = out_dir / f"{path.stem}_out.png"
        save_image(result, target)
        print(f"{path} -> {target}")
    return 0


def _cmd_optimize_single(args) -> int:
    from .inference import SingleImageOptConfig, single_image_optimize
    ckpt = load_checkpoint(args.checkpoint)
    pools = load_dataset(args.data)
    image = load_image(args.input)
    cfg = SingleImageOptConfig(steps=args.steps, beta=args.beta,
                               seed=args.seed)
    result, adapted = single_image_optimize(ckpt, image, pools, cfg)
    out_dir = args.out or Path(_default_out())
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(result, out_dir / f"{args.input.stem}_optimized.png")
    save_checkpoint(adapted, out_dir / f"{args.input.stem}_adapted.ckpt")
    print(f"adapted output and checkpoint written under {out_dir}")
    return 0


def _cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint_in)
    if ckpt.folded:
        print("input checkpoint is already folded; writing as-is")
    save_checkpoint(ckpt.folded_copy(), args.checkpoint_out)
    print(f"folded checkpoint written to {args.checkpoint_out}")
    return 0


def _cmd_eval(args) -> int:
    from .inference import midtone_fraction, simplify
    ckpt = load_checkpoint(args.checkpoint)
    pools = load_dataset(args.data)
    if not pools.supervised:
        raise DatasetError("eval needs supervised pairs")
    mse = validation_mse(ckpt.folded_copy().simplifier, pools.supervised,
                         ckpt.input_mean)
    midtones = [midtone_fraction(simplify(ckpt, x))
                for x, _ in pools.supervised]
    print(f"val_mse {mse:.6f}")
    print(f"midtone_fraction {sum(midtones) / len(midtones):.4f}")
    return 0


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT_ERROR
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "simplify":
            return _cmd_simplify(args, pencil=False)
        if args.command == "pencil":
            return _cmd_simplify(args, pencil=True)
        if args.command == "optimize-single":
            return _cmd_optimize_single(args)
        if args.command == "export":
            return _cmd_export(args)
        if args.command == "eval":
            return _cmd_eval(args)
        parser.print_usage(sys.stderr)
        return EXIT_INPUT_ERROR
    except (ConfigError, DatasetError, RegimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except (CheckpointError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
