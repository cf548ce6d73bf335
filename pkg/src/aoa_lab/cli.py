"""
Command-line entry point.

    aoa-lab simulate --config cfg.json --out data.aoa [--count N]
    aoa-lab train    --config cfg.json --out runs/a [--resume]
    aoa-lab eval     --config cfg.json --out results/ [--checkpoint best.ckpt]
    aoa-lab order    --config cfg.json --out results/ [--checkpoint best.ckpt]

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 runtime or numerical error.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation, net, train
from .array_model import generate_dataset, write_dataset
from .config import CliConfig
from .errors import AoaLabError, CheckpointError, ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("aoa_lab")


class MissingArtifact(Exception):
    pass


def _load_config(args) -> CliConfig:
    if args.config is None:
        return CliConfig(seed=args.seed)
    if not Path(args.config).exists():
        raise MissingArtifact(f"config file not found: {args.config}")
    return CliConfig.from_file(args.config, seed=args.seed)


def _load_dnn(path):
    if path is None:
        return None
    if not Path(path).exists():
        raise MissingArtifact(f"checkpoint not found: {path}")
    return net.load(path)


def _workers(args) -> int:
    return args.workers if args.workers is not None else evaluation.default_workers()


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    noise = bool(cfg.data["simulate"]["noise_enabled"])
    dataset = generate_dataset(cfg.geometry(), cfg.scene_distribution(), args.count, cfg.seed, noise)
    sidecar = {"config": cfg.data, "seed": cfg.seed, "count": args.count}
    write_dataset(out, dataset, sidecar=sidecar)
    log.info("wrote %d records to %s", args.count, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.training()
    state = None
    if args.resume:
        path = Path(args.checkpoint) if args.checkpoint else out / "state.ckpt"
        if not path.exists():
            raise MissingArtifact(f"no training state to resume from at {path}")
        state = train.load_state(path, tcfg)
        log.info("resuming from iteration %d", state.iteration)
    cfg.echo(out)
    train.train(tcfg, out_dir=out, state=state, progress_every=100 if args.verbose else 0)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dnn = _load_dnn(args.checkpoint)
    sweep = cfg.sweep(workers=_workers(args))
    if dnn is not None and "dnn" not in sweep.methods:
        sweep = evaluation.SweepConfig(**{**sweep.__dict__, "methods": sweep.methods + ("dnn",)})
    cfg.echo(out)
    result = evaluation.run_sweep(sweep, dnn)
    result.write(out / "sweep.csv")
    return EXIT_OK


def cmd_order(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dnn = _load_dnn(args.checkpoint)
    sweep = cfg.sweep(order=True, workers=_workers(args))
    if dnn is not None and "dnn" not in sweep.methods:
        sweep = evaluation.SweepConfig(**{**sweep.__dict__, "methods": ("dnn",) + sweep.methods})
    cfg.echo(out)
    result = evaluation.order_accuracy_sweep(sweep, dnn)
    result.write(out / "order.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoa-lab", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="JSON config file (all fields optional)")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, help="parallel workers (default: $AOA_LAB_WORKERS or cores)")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("simulate", help="write a synthetic dataset file")
    common(p, "dataset path")
    p.add_argument("--count", type=int, default=1000, help="number of records")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the network")
    common(p, "run directory for checkpoints and logs")
    p.add_argument("--checkpoint", help="state file to resume from (default: OUT/state.ckpt)")
    p.add_argument("--resume", action="store_true", help="continue a previous run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE-versus-SNR sweep")
    common(p, "output directory")
    p.add_argument("--checkpoint", help="trained network; adds the 'dnn' method")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("order", help="source-count accuracy sweep")
    common(p, "output directory")
    p.add_argument("--checkpoint", help="trained network; adds the 'dnn' method")
    p.set_defaults(func=cmd_order)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (AoaLabError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
