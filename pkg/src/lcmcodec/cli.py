"""``lcm`` command line: encode, decode, inspect, selftest, init-weights, train-toy, ablate.

Stats and reports go to stdout as one JSON line; diagnostics go to stderr.
Exit codes: 0 ok, 2 usage or input error, 3 corrupt stream, 4 invariant
failure, 5 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import torch

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CORRUPT = 3
EXIT_INVARIANT = 4
EXIT_DIVERGED = 5

log = logging.getLogger("lcmcodec")


class InputError(Exception):
    pass


def _emit(obj):
    print(json.dumps(obj, sort_keys=False), flush=True)


def _threads(args) -> int | None:
    n = args.threads if args.threads is not None else os.environ.get("LCM_THREADS")
    if n in (None, ""):
        return None
    try:
        n = int(n)
    except ValueError:
        raise InputError(f"thread count must be an integer, got {n!r}") from None
    if n < 1:
        raise InputError("thread count must be >= 1")
    return n


def _apply_threads(args):
    from .pipeline import set_threads

    n = _threads(args)
    if n:
        set_threads(n)
        torch.set_num_threads(n)


def _load_model(path):
    from .networks import CodecModel
    from .nn import WeightFileError, load_weights

    if not Path(path).is_file():
        raise InputError(f"weights not found: {path}")
    try:
        return CodecModel.from_store(load_weights(path))
    except (WeightFileError, ValueError, KeyError) as e:
        raise InputError(f"bad weights file {path}: {e}") from None


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None


# ------------------------------------------------------------- commands


def cmd_encode(args) -> int:
    from .gaussian import PlyError, parse_ply
    from .pipeline import CodecConfig, compress, total_rate

    model = _load_model(args.weights)
    try:
        cloud = parse_ply(_read_bytes(args.input))
        config = CodecConfig(window=args.window, bit_depth=args.bit_depth, profile=args.profile, tau=args.tau)
    except (PlyError, ValueError) as e:
        raise InputError(str(e)) from None
    t = time.perf_counter()
    try:
        data = compress(cloud, model, config).to_bytes()
    except ValueError as e:
        raise InputError(f"cannot encode {args.input}: {e}") from None
    Path(args.output).write_bytes(data)
    rate = total_rate(data)
    _emit({
        "n_gaussians": rate["n_gaussians"],
        "bytes_total": rate["total_bytes"],
        "bytes_per_section": {k: v["bytes"] for k, v in rate["sections"].items()},
        "bits_per_gaussian": rate["bits_per_gaussian"],
        "seconds": round(time.perf_counter() - t, 3),
    })
    return EXIT_OK


def cmd_decode(args) -> int:
    from .gaussian import write_ply
    from .pipeline import decompress

    data = _read_bytes(args.input)
    model = _load_model(args.weights)
    t = time.perf_counter()
    cloud = decompress(data, model)
    Path(args.output).write_bytes(write_ply(cloud))
    _emit({"n_gaussians": len(cloud), "seconds": round(time.perf_counter() - t, 3)})
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .pipeline import total_rate

    rate = total_rate(_read_bytes(args.input))
    if args.json:
        _emit(rate)
        return EXIT_OK
    total = rate["total_bytes"]
    print(f"gaussians      {rate['n_gaussians']}")
    print(f"{'section':<22}{'bytes':>12}{'share':>9}")
    print(f"{'HEADER':<22}{rate['header_bytes']:>12}{100 * rate['header_bytes'] / total:>8.2f}%")
    for name, row in rate["sections"].items():
        print(f"{name:<22}{row['bytes']:>12}{100 * row['share']:>8.2f}%")
    print(f"{'TOTAL':<22}{total:>12}{100.0:>8.2f}%")
    print(f"bits/gaussian  {rate['bits_per_gaussian']:.3f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import SUITES, run_selftest

    only = args.only.split(",") if args.only else None
    if only:
        unknown = [s for s in only if s not in SUITES]
        if unknown:
            raise InputError(f"unknown suite {unknown[0]!r}; choose from {', '.join(SUITES)}")
    t = time.perf_counter()
    summary = run_selftest(args.seed, flip_cdf_count=args.debug_flip_cdf_count, only=only)
    summary["seconds"] = round(time.perf_counter() - t, 3)
    _emit(summary)
    for name in summary["failed"]:
        print(f"FAILED {name}: {summary['suites'][name]['detail']}", file=sys.stderr)
    return EXIT_OK if summary["ok"] else EXIT_INVARIANT


def cmd_init_weights(args) -> int:
    from .networks import CodecModel, ModelConfig
    from .nn import save_weights

    cfg = ModelConfig()
    if args.config:
        try:
            cfg = ModelConfig.from_dict(json.loads(_read_bytes(args.config)))
        except (ValueError, TypeError) as e:
            raise InputError(f"bad model config: {e}") from None
    model = CodecModel.initialized(cfg, args.seed)
    save_weights(model.to_store(), args.output)
    n_params = sum(p.numel() for p in model.parameters())
    _emit({"output": str(args.output), "parameters": n_params, "architecture_id": model.architecture_id})
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .nn import load_weights, save_weights
    from .training import STAGES, TrainConfig, toy_scenes, train_stage

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = STAGES if args.stage == "all" else (args.stage,)
    store = None
    if args.resume:
        if not Path(args.resume).is_file():
            raise InputError(f"checkpoint not found: {args.resume}")
        store = load_weights(args.resume)
    elif args.stage != "all" and args.stage != STAGES[0]:
        raise InputError(f"stage {args.stage} needs --resume with the previous stage's weights")
    scenes = toy_scenes(args.scenes, n=args.n, seed=args.seed, window=args.window)
    logfile = out / "train_log.jsonl"
    report = {}
    for stage in stages:
        try:
            config = TrainConfig(lam=args.lam, w=args.w, stage=stage, steps=args.steps, lr=args.lr,
                                 seed=args.seed, window=args.window)
        except ValueError as e:
            raise InputError(str(e)) from None
        store, history = train_stage(config, scenes, store, log=logfile, checkpoint_dir=out / "checkpoints",
                                     checkpoint_every=args.checkpoint_every)
        path = out / f"{stage}.lcmw"
        save_weights(store, path)
        if history:
            report[stage] = {"first_loss": history[0]["loss"], "last_loss": history[-1]["loss"],
                             "weights": str(path)}
        else:
            report[stage] = {"weights": str(path)}
    _emit({"stages": report, "log": str(logfile)})
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .training import ABLATIONS, AblationBudget, ablate

    if args.mode not in ABLATIONS:
        raise InputError(f"unknown mode {args.mode!r}; choose from {', '.join(ABLATIONS)}")
    if args.mode == "context_len" and not args.context_len:
        raise InputError("context_len needs --context-len")
    given = {"steps": args.steps, "train_scenes": args.scenes, "n": args.n, "window": args.window}
    budget = AblationBudget(seed=args.seed, **{k: v for k, v in given.items() if v is not None})
    report = ablate(args.mode, budget, args.context_len)
    _emit(report)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcm", description="Learned context-model codec for 3D Gaussian clouds.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help="cap on coding threads (env LCM_THREADS)")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("encode", help="PLY -> container")
    sp.add_argument("input")
    sp.add_argument("weights")
    sp.add_argument("output")
    sp.add_argument("--window", "-L", type=int, default=1024, help="context window length")
    sp.add_argument("--bit-depth", "-d", type=int, default=16, help="position bits per axis")
    sp.add_argument("--profile", type=int, default=0)
    sp.add_argument("--tau", type=float, default=0.5, help="division threshold")
    common(sp)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="container -> PLY")
    sp.add_argument("input")
    sp.add_argument("weights")
    sp.add_argument("output")
    common(sp)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("inspect", help="per-section size report")
    sp.add_argument("input")
    sp.add_argument("--json", action="store_true", help="one JSON line instead of a table")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("selftest", help="run the invariant suites")
    sp.add_argument("--only", help="comma-separated suite names")
    sp.add_argument("--debug-flip-cdf-count", action="store_true", help=argparse.SUPPRESS)
    common(sp)
    sp.set_defaults(func=cmd_selftest)

    sp = sub.add_parser("init-weights", help="write randomly initialized weights")
    sp.add_argument("output")
    sp.add_argument("--config", help="JSON model config")
    common(sp)
    sp.set_defaults(func=cmd_init_weights)

    sp = sub.add_parser("train-toy", help="staged training on synthetic scenes")
    sp.add_argument("out_dir")
    sp.add_argument("--stage", default="all", choices=("all", "lossy_init", "lossless_init", "joint"))
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--lam", type=float, default=4e-4)
    sp.add_argument("--w", type=float, default=0.0, help="lossless-fraction weight")
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--scenes", type=int, default=10)
    sp.add_argument("--n", type=int, default=2048, help="Gaussians per scene")
    sp.add_argument("--window", "-L", type=int, default=1024)
    sp.add_argument("--resume", help="checkpoint or previous stage weights")
    sp.add_argument("--checkpoint-every", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("ablate", help="rate of one ablation variant vs. the full model")
    sp.add_argument("mode")
    sp.add_argument("--context-len", type=int, default=None)
    sp.add_argument("--steps", type=int, default=None, help="training steps (default 300)")
    sp.add_argument("--scenes", type=int, default=None, help="training scenes (default 300)")
    sp.add_argument("--n", type=int, default=None, help="Gaussians per scene (default 2048)")
    sp.add_argument("--window", "-L", type=int, default=None, help="context window (default 256)")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # numba probes an old TBB on some hosts and falls back on its own
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    from .coder import CorruptStreamError
    from .training import TrainingDivergence

    try:
        if hasattr(args, "threads"):
            _apply_threads(args)
        if hasattr(args, "seed"):
            torch.manual_seed(args.seed)
            np.random.seed(args.seed % (1 << 32))
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except CorruptStreamError as e:
        print(f"corrupt stream: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except TrainingDivergence as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
