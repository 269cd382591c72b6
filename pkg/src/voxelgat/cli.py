"""Command-line entry point: ``voxelgat <command> [options]``.

Exit codes: 0 success, 1 internal or stage failure, 2 user/config error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import pipeline as P
from .gat import GatConfig, load_checkpoint
from .phantom import ParameterError as PhantomParameterError
from .phantom import PhantomSpec, phantom_generate
from .training import TrainConfig


def _triple(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected N or D,H,W")
    return tuple(parts)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def _add_slic(p):
    p.add_argument("--k", type=int, default=None,
                   help="target supervoxel count (default: 15000 scaled to the volume size)")
    p.add_argument("--omega", type=float, default=2.0, help="spatial weight numerator")
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--no-connectivity", action="store_true")


def _add_train(p):
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch", type=int, default=6, help="graphs per mini-batch")
    p.add_argument("--lr", type=float, default=1e-4, help="base learning rate")
    p.add_argument("--decay", type=float, default=1e-4, help="per-epoch exponential decay rate")
    p.add_argument("--class-weights", type=_floats, default=None,
                   help="4 comma-separated weights (default: inverse class frequency)")
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--layers", type=int, default=8, help="number of hidden attention layers")
    p.add_argument("--out-heads", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxelgat", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file whose keys mirror the command-line flags")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-identical reruns")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate synthetic labelled volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--shape", type=_triple, default=(32, 32, 32))
    p.add_argument("--noise", type=float, default=25.0)
    p.add_argument("--tumors", type=int, default=1)

    p = sub.add_parser("preprocess", help="crop, rescale and z-normalize volumes")
    p.add_argument("--input", required=True, help="directory of .vxg files or NIfTI case folders")
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float, default=99.5)

    p = sub.add_parser("build-graph", help="supervoxels and region adjacency graphs")
    p.add_argument("--input", required=True, help="preprocessed directory")
    p.add_argument("--out", required=True)
    _add_slic(p)

    p = sub.add_parser("train", help="train the attention network")
    p.add_argument("--graphs", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="TrainLog CSV path")
    p.add_argument("--cases", help="comma-separated subset of case names")
    _add_train(p)

    p = sub.add_parser("predict", help="label graphs and project to voxels")
    p.add_argument("--graphs", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prep", help="preprocessed directory (for NIfTI output and overlays)")
    p.add_argument("--overlay", help="write PNG overlays to this directory (needs --prep)")
    p.add_argument("--cases")

    p = sub.add_parser("evaluate", help="Dice and HD95 per region")
    p.add_argument("--pred", required=True)
    p.add_argument("--prep", required=True, help="preprocessed directory with ground truth")
    p.add_argument("--graphs", help="graph directory, for node counts")
    p.add_argument("--out", required=True)
    p.add_argument("--cases")

    p = sub.add_parser("report", help="aggregate evaluation reports")
    p.add_argument("--input", required=True, help="evaluation directory")
    p.add_argument("--out")

    p = sub.add_parser("run", help="run the whole pipeline in one work directory")
    p.add_argument("--workdir", required=True)
    p.add_argument("--input", help="raw input directory (default: WORKDIR/raw)")
    p.add_argument("--phantoms", type=int, default=0,
                   help="generate this many phantoms into WORKDIR/raw first")
    p.add_argument("--shape", type=_triple, default=(32, 32, 32))
    p.add_argument("--test-frac", type=float, default=0.2,
                   help="fraction of cases held out from training")
    p.add_argument("--checkpoint")
    p.add_argument("--overlay", action="store_true")
    _add_slic(p)
    _add_train(p)

    p = sub.add_parser("info", help="print a checkpoint's architecture and parameter count")
    p.add_argument("--checkpoint")
    return parser


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def parse_args(argv=None) -> argparse.Namespace:
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    if not known.config:
        return parser.parse_args(argv)
    path = Path(known.config)
    if not path.is_file():
        parser.exit(2, f"voxelgat: config file not found: {path}\n")
    try:
        conf = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        parser.exit(2, f"voxelgat: invalid config {path}: {exc}\n")
    conf = {k.replace("-", "_"): v for k, v in conf.items()}
    # config values become defaults, so explicit flags still win
    for sp in _subparsers(parser).values():
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in conf.items() if k in dests})
        for a in sp._actions:
            if a.required and a.dest in conf:
                a.required = False
    top = {a.dest for a in parser._actions}
    parser.set_defaults(**{k: v for k, v in conf.items() if k in top})
    args = parser.parse_args(argv)
    known_keys = top | {a.dest for sp in _subparsers(parser).values() for a in sp._actions}
    unknown = sorted(set(conf) - known_keys)
    if unknown:
        parser.exit(2, f"voxelgat: unknown config keys: {', '.join(unknown)}\n")
    for key in ("shape",):
        if isinstance(getattr(args, key, None), list):
            setattr(args, key, tuple(getattr(args, key)))
    return args


def _cases(text):
    return [c for c in text.split(",") if c] if text else None


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, graphs_per_batch=args.batch, base_lr=args.lr,
                       decay_rate=args.decay, class_weights=args.class_weights,
                       seed=args.seed, val_frac=args.val_frac)


def _model_config(args) -> GatConfig:
    return GatConfig(hidden_dim=args.hidden_dim, heads=args.heads, n_hidden=args.layers,
                     out_heads=args.out_heads, seed=args.seed)


def _slic(args) -> dict:
    return dict(k=args.k, omega=args.omega, max_iters=args.max_iters,
                connectivity=not args.no_connectivity)


def dispatch(args) -> int:
    cmd = args.command
    if cmd == "phantom":
        spec = PhantomSpec(shape=args.shape, n_volumes=args.n, noise=args.noise,
                           n_tumors=args.tumors, seed=args.seed)
        paths = phantom_generate(spec, args.out)
        print(f"wrote {len(paths)} phantoms to {args.out}")
    elif cmd == "preprocess":
        names = P.stage_preprocess(args.input, args.out, args.percentile)
        print(f"preprocessed {len(names)} cases")
    elif cmd == "build-graph":
        names = P.stage_build_graph(args.input, args.out, **_slic(args))
        print(f"built {len(names)} graphs")
    elif cmd == "train":
        model, tlog = P.stage_train(args.graphs, args.out, _train_config(args), _model_config(args),
                                    _cases(args.cases), args.log)
        print(f"trained {len(tlog.epoch)} epochs; best epoch {tlog.best_epoch}; "
              f"{model.param_count()} parameters")
    elif cmd == "predict":
        if args.overlay and not args.prep:
            raise P.UserError("predict", "--overlay needs --prep")
        names = P.stage_predict(args.graphs, args.checkpoint, args.out, _cases(args.cases),
                                args.prep, args.overlay)
        print(f"predicted {len(names)} cases")
    elif cmd == "evaluate":
        reps = P.stage_evaluate(args.pred, args.prep, args.out, args.graphs, _cases(args.cases))
        print(f"evaluated {len(reps)} cases")
    elif cmd == "report":
        P.stage_report(args.input, args.out)
    elif cmd == "run":
        return _run(args)
    elif cmd == "info":
        if args.checkpoint:
            if not Path(args.checkpoint).is_file():
                raise P.UserError("info", f"checkpoint not found: {args.checkpoint}")
            m = load_checkpoint(args.checkpoint)
        else:
            from .gat import GatModel
            m = GatModel(GatConfig(seed=args.seed))
        print(json.dumps({"config": asdict(m.config), "param_count": m.param_count(),
                          "per_layer": [l.n_params() for l in m.layers]}, indent=2))
    return 0


def _run(args) -> int:
    wd = Path(args.workdir)
    raw = Path(args.input) if args.input else wd / "raw"
    if args.phantoms:
        phantom_generate(PhantomSpec(shape=args.shape, n_volumes=args.phantoms, seed=args.seed), raw)
    elif not raw.is_dir():
        raise P.UserError("run", f"input directory not found: {raw}")
    if args.checkpoint and args.epochs == 0 and not Path(args.checkpoint).is_file():
        raise P.UserError("run", f"checkpoint not found: {args.checkpoint}")
    P.stage_preprocess(raw, wd / "prep")
    P.stage_build_graph(wd / "prep", wd / "graphs", **_slic(args))
    names = sorted(p.stem for p in (wd / "graphs").glob("*.rag"))
    n_test = max(1, int(round(args.test_frac * len(names)))) if len(names) > 1 else 0
    train_names, test_names = names[:len(names) - n_test], names[len(names) - n_test:] or names
    ckpt = Path(args.checkpoint) if args.checkpoint else wd / "model" / "model.gatc"
    if args.epochs > 0:
        P.stage_train(wd / "graphs", ckpt, _train_config(args), _model_config(args),
                      train_names, wd / "model" / "trainlog.csv")
    P.stage_predict(wd / "graphs", ckpt, wd / "pred", test_names, wd / "prep",
                    wd / "overlays" if args.overlay else None)
    P.stage_evaluate(wd / "pred", wd / "prep", wd / "eval", wd / "graphs", test_names)
    P.stage_report(wd / "eval")
    return 0


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = P.limit_threads(1 if args.deterministic else None)
    try:
        return dispatch(args)
    except P.UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PhantomParameterError, FileNotFoundError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 2
    except P.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("voxelgat").debug("internal error", exc_info=True)
        print(f"error: [{args.command}] internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
