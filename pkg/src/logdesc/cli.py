"""``logdesc`` command line: register, benchmark, train-toy, gradcheck.

Exit codes: 0 ok, 1 invalid arguments, 2 I/O error, 3 degenerate
registration, 4 training divergence, 5 gradient check failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np
import torch

from .datagen import SHAPES
from .descriptor import DescriptorConfig
from .geometry import GeometryError
from .gradcheck import format_report, run_gradcheck
from .io import CheckpointError, CloudParseError, read_cloud, read_transform_record, transform_record, write_json
from .metrics import rotation_errors
from .model import (
    DivergenceError,
    ModelConfig,
    RegistrationNet,
    load_model,
    mean_loss,
    prepare_pairs,
    save_model,
    train,
)
from .nn import Adam, ConfigError
from .pipeline import ESTIMATORS, benchmark_cases, evaluate_pairs, register, run_benchmark
from .pose import DegeneratePairsError

log = logging.getLogger("logdesc")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DEGENERATE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5
PROTOCOLS = ("clean", "full-noisy", "partial-noisy")

# scaled-down network used by train-toy; the full-size defaults live in DescriptorConfig
# sized so 300 epochs on 20 pairs fit 30 min on one core (~0.25 s per pair step)
TOY_D, TOY_LAYERS, TOY_PAIRS, TOY_CHANNELS, TOY_TABLE = 48, 1, 1, (16, 32), 2048


class UsageError(ValueError):
    pass


def threads() -> int:
    raw = os.environ.get("LOGDESC_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LOGDESC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"LOGDESC_THREADS must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------- config


def _ablation(args) -> dict:
    return {f"use_{c}": False for c in "APON" if getattr(args, f"no_{c}", False)}


def descriptor_config(args) -> DescriptorConfig:
    """Geometric-only / toy descriptor config from the command line."""
    base = DescriptorConfig()
    over = dict(_ablation(args))
    if args.k is not None:
        over["k"] = args.k
    try:
        return replace(base, **over)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def load_weights(args):
    """Model from ``--weights``, with ablation flags applied at inference."""
    try:
        model, tensors = load_model(args.weights, **_ablation(args))
    except ConfigError as exc:
        raise UsageError(f"{args.weights}: {exc}") from None
    dc = model.cfg.descriptor
    for flag in ("k", "d", "layers"):
        want = getattr(args, flag, None)
        if want is not None and want != getattr(dc, flag):
            raise UsageError(
                f"--{flag} {want} conflicts with the checkpoint ({flag}={getattr(dc, flag)}); drop the flag"
            )
    model.eval()
    return model, tensors


def _reject_untrained_shape_flags(args):
    for flag in ("d", "layers"):
        if getattr(args, flag, None) is not None:
            raise UsageError(f"--{flag} only applies to train-toy; without --weights the descriptor is handcrafted")


def config_record(args) -> dict:
    keep = ("estimator", "k", "d", "layers", "protocol", "pairs", "shapes", "epochs", "lr", "weights")
    rec = {k: getattr(args, k) for k in keep if getattr(args, k, None) is not None}
    ablated = sorted(c for c in "APON" if getattr(args, f"no_{c}", False))
    if ablated:
        rec["ablate"] = ablated
    if "weights" in rec:
        rec["weights"] = os.path.basename(rec["weights"])
    return rec


# -------------------------------------------------------------- commands


def cmd_register(args) -> int:
    if args.weights:
        model, _ = load_weights(args)
        cfg = model.cfg.descriptor
    else:
        _reject_untrained_shape_flags(args)
        model, cfg = None, descriptor_config(args)
    src = read_cloud(args.source)
    tgt = read_cloud(args.target)
    result = register(src, tgt, model, args.estimator, args.seed, cfg)
    metrics = {"matches": len(result.matches), "inliers": int(result.inliers)}
    if args.gt:
        gt, _ = read_transform_record(args.gt)
        _, iso = rotation_errors(result.transform.rotation, gt.rotation)
        metrics["L_R"] = float(iso)
        metrics["L_t"] = float(np.linalg.norm(result.transform.translation - gt.translation))
    rec = transform_record(result.transform, args.estimator, metrics, args.seed, config_record(args))
    if args.out:
        write_json(rec, args.out)
    lr = f"{metrics['L_R']:.6g} deg" if "L_R" in metrics else "n/a (no --gt)"
    lt = f"{metrics['L_t']:.6g}" if "L_t" in metrics else "n/a (no --gt)"
    print(f"L_R = {lr}\nL_t = {lt}\nmatches = {metrics['matches']}\ninliers = {metrics['inliers']}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    if args.oracle_matches and args.weights:
        raise UsageError("--oracle-matches bypasses the descriptor; drop --weights")
    if args.weights:
        model, _ = load_weights(args)
        cfg = model.cfg.descriptor
    else:
        _reject_untrained_shape_flags(args)
        model, cfg = None, descriptor_config(args)
    cases = benchmark_cases(args.protocol, args.pairs, args.seed, tuple(args.shapes))
    workers = 1 if args.deterministic else threads()
    res = run_benchmark(cases, model, args.estimator, args.seed, cfg, use_oracle=args.oracle_matches, workers=workers)
    report = {
        "registration": res.registration.summary(),
        "matching": res.matching.summary(),
        "failures": res.failures,
        "seed": args.seed,
        "config": config_record(args),
    }
    if args.out:
        write_json(report, args.out)
    for key, val in {**report["registration"], **report["matching"]}.items():
        print(f"{key} = {val:.6g}")
    print(f"failures = {len(res.failures)}")
    return EXIT_OK


def toy_model_config(args) -> ModelConfig:
    over = dict(_ablation(args))
    over["d"] = args.d if args.d is not None else TOY_D
    over["layers"] = args.layers if args.layers is not None else TOY_LAYERS
    over["cnn_channels"] = TOY_CHANNELS
    if args.k is not None:
        over["k"] = args.k
    try:
        dc = DescriptorConfig(**over)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    return ModelConfig(dc, transformer_pairs=TOY_PAIRS, angle_table_size=TOY_TABLE)


def cmd_train_toy(args) -> int:
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    if args.lr < 0:
        raise UsageError("--lr must be >= 0")
    if args.eval_every < 0:
        raise UsageError("--eval-every must be >= 0")
    start_epoch = 0
    if args.resume:
        for flag in ("k", "d", "layers"):
            if getattr(args, flag) is not None:
                raise UsageError(f"--{flag} cannot change on --resume; the checkpoint fixes the architecture")
        model, tensors = load_model(args.resume)
        opt = Adam(model.named_parameters(), lr=args.lr)
        opt.load_state_tensors(tensors)
        start_epoch = int(tensors["train/epoch"][0]) if "train/epoch" in tensors else 0
    else:
        torch.manual_seed(args.seed)
        model = RegistrationNet(toy_model_config(args))
        opt = Adam(model.named_parameters(), lr=args.lr)
    cases = benchmark_cases(args.protocol, args.pairs, args.seed, tuple(args.shapes))
    pairs = prepare_pairs(cases, model.cfg.descriptor)
    model.train()

    def evaluate():
        m = evaluate_pairs(model, cases, pairs, "fsr", args.seed).metrics()
        print(f"  precision {m['precision']:.4f} recall {m['recall']:.4f} rmse_R {m['rmse_R']:.4f}", flush=True)
        return m

    def report(epoch, loss):
        print(f"epoch {epoch} loss {loss:.6f}", flush=True)
        if args.eval_every and epoch % args.eval_every == 0:
            m = evaluate()
            # stop once both release targets hold on the training pairs
            return m["precision"] >= args.stop_precision and m["rmse_R"] <= args.stop_rmse
        return False

    history = train(model, pairs, args.epochs, args.lr, args.seed, opt, start_epoch, report)
    final = mean_loss(model, pairs)
    print(f"final loss {final:.6f}")
    if args.eval_every:
        m = evaluate()
        print(f"final precision {m['precision']:.6f}\nfinal rmse_R {m['rmse_R']:.6f}\nepochs {start_epoch + len(history)}")
    if args.out:
        save_model(model, args.out, opt, extra={"train/epoch": np.array([start_epoch + len(history)], np.float32)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    checks = run_gradcheck(args.seed, corrupt=args.corrupt_gradient)
    text = format_report(checks)
    sys.stdout.write(text)
    if args.out:
        write_json({c.layer: c.worst for c in checks}, args.out)
    bad = [c.layer for c in checks if not c.ok]
    if bad:
        print(f"gradient check failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad arguments, which would collide with the I/O code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return val


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output file, written atomically")
    common.add_argument("--deterministic", action="store_true", help="sequential, single-threaded execution")
    common.add_argument("--verbose", "-v", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--weights", help="checkpoint; omit for the handcrafted descriptor")
    model.add_argument("--k", type=_positive_int, help="neighbors per point")
    model.add_argument("--d", type=_positive_int, help="descriptor width (train-toy)")
    model.add_argument("--layers", type=_positive_int, help="rotary attention layers (train-toy)")
    for c, name in zip("APON", ("anisotropy", "planarity", "omnivariance", "normals")):
        model.add_argument(f"--no-{c}", dest=f"no_{c}", action="store_true", help=f"ablate {name}")

    proto = argparse.ArgumentParser(add_help=False)
    proto.add_argument("--protocol", choices=PROTOCOLS, default="partial-noisy")
    proto.add_argument("--pairs", type=int, default=100)
    proto.add_argument("--shapes", nargs="+", choices=SHAPES, default=list(SHAPES))

    p = _Parser(prog="logdesc", description="Hybrid local-geometry descriptor registration toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", parents=[common, model], help="register source onto target")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--estimator", choices=ESTIMATORS, default="fsr")
    r.add_argument("--gt", help="ground-truth transform record, for L_R/L_t")
    r.set_defaults(func=cmd_register)

    b = sub.add_parser("benchmark", parents=[common, model, proto], help="run a synthetic protocol")
    b.add_argument("--estimator", choices=ESTIMATORS, default="fsr")
    b.add_argument("--oracle-matches", action="store_true", help="use ground-truth correspondences")
    b.set_defaults(func=cmd_benchmark)

    t = sub.add_parser("train-toy", parents=[common, model, proto], help="train a small model on synthetic pairs")
    t.set_defaults(func=cmd_train_toy, pairs=20, shapes=["gaussian-blob"])
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--resume", help="checkpoint written by an earlier train-toy run")
    t.add_argument("--eval-every", type=int, default=25, help="evaluate on the training pairs every N epochs; 0 disables")
    t.add_argument("--stop-precision", type=float, default=0.9, help="early stop once precision reaches this ...")
    t.add_argument("--stop-rmse", type=float, default=5.0, help="... and RMSE(R) in degrees falls to this")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every layer")
    g.add_argument("--corrupt-gradient", action="store_true", help="test mode: inject a wrong gradient")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        torch.set_num_threads(1 if args.deterministic else threads())
        if args.deterministic:
            torch.use_deterministic_algorithms(True)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CloudParseError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DegeneratePairsError, GeometryError, ConfigError) as exc:
        print(f"degenerate registration: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except DivergenceError as exc:
        print(f"training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
