"""Command-line entry point: one subcommand per pipeline stage.

Every subcommand re-verifies its module's cheap invariants at runtime and
exits nonzero on any failure, so the CLI doubles as a self-test harness.
Runs are fully determined by (subcommand, flags, seed, input files); the
ROBUQ_SEED environment variable overrides --seed.

Exit codes: 0 success, 1 invariant re-check failed, 2 bad input or usage.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import allocator, deploy, gaussanalysis, hadamard, lowrank, profiler, quant, tensorio
from .errors import RobuqError

DEFAULT_SEED = 42


class InvariantFailure(Exception):
    """A runtime self-check did not hold."""


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise InvariantFailure(message)


def _write_json(payload: dict, path: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _seed(args) -> int:
    env = os.environ.get("ROBUQ_SEED")
    return int(env) if env is not None else args.seed


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_hadamard(args) -> int:
    x = tensorio.load_matrix(args.infile)
    plan = hadamard.HadamardPlan.for_dim(x.shape[1])
    y = hadamard.transform_tokens(x, plan)

    in_norms = np.linalg.norm(x.astype(np.float64), axis=1)
    out_norms = np.linalg.norm(y, axis=1)
    denom = np.maximum(in_norms, 1e-30)
    norm_drift = float(np.max(np.abs(out_norms - in_norms) / denom))
    _check(norm_drift < 1e-5, f"norm drift {norm_drift:.3e} exceeds 1e-5")

    ortho_residual = None
    if plan.block_size <= 2048:
        h = hadamard.hadamard_matrix(plan.block_size)
        ortho_residual = float(np.max(np.abs(h.T @ h - np.eye(plan.block_size))))
        _check(ortho_residual < 1e-5, f"orthogonality residual {ortho_residual:.3e}")

    roundtrip_err = None
    if args.roundtrip_check:
        back = hadamard.transform_tokens(y, plan)
        roundtrip_err = float(np.max(np.abs(back - x)))
        _check(roundtrip_err < 1e-5, f"involution residual {roundtrip_err:.3e}")

    tensorio.save_matrix(y.astype(np.float32), args.out)
    if args.report:
        _write_json(
            {
                "dim": plan.dim,
                "block_size": plan.block_size,
                "max_norm_drift": norm_drift,
                "orthogonality_residual": ortho_residual,
                "roundtrip_residual": roundtrip_err,
            },
            args.report,
        )
    return 0


def cmd_quantize(args) -> int:
    w = tensorio.load_matrix(args.weights).astype(np.float64)
    maker = quant.lloyd_max if args.lloyd else quant.uniform_gauss_codebook
    cb = maker(args.bits)
    layer = lowrank.init_layer(w, r=args.rank, codebook=cb)
    lowrank.save_layer(layer, args.out_dir)

    rec = lowrank.reconstruct_weight(layer)
    err = float(np.linalg.norm(w - rec) / max(np.linalg.norm(w), 1e-30))
    combined_err = float(
        np.linalg.norm(
            hadamard.fold_into_weights(w, layer.plan)
            - (layer.branch.matrix() + layer.wq.dequantize())
        )
    )
    direct_err = float(np.linalg.norm(w - rec))
    # Orthogonal invariance: the two Frobenius errors agree up to rounding.
    _check(
        abs(combined_err - direct_err) <= 1e-8 * max(direct_err, 1.0),
        f"orthogonal-invariance mismatch: {direct_err} vs {combined_err}",
    )
    branch_sq = float(np.sum(layer.branch.matrix() ** 2))
    ternary_sq = float(np.sum(layer.wq.dequantize() ** 2))
    share = branch_sq / (branch_sq + ternary_sq) if branch_sq + ternary_sq > 0 else 0.0
    _write_json(
        {
            "rank": layer.branch.rank,
            "bits": args.bits,
            "uniform": not args.lloyd,
            "reconstruction_rel_error": err,
            "branch_energy_share": share,
        },
        args.summary,
    )
    return 0


def cmd_gauss_report(args) -> int:
    x = tensorio.load_matrix(args.activations).astype(np.float64)
    report, meta = gaussanalysis.build_report(x, bins=args.bins, seed=_seed(args))
    _check(report.tv_bound >= 0.0, "tv bound must be nonnegative")
    _check(np.isfinite(report.ks_distance), "ks distance must be finite")
    text = gaussanalysis.report_to_json(report, meta)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_profile(args) -> int:
    widths = tuple(int(w) for w in args.widths.split(","))
    bits = tuple(int(b) for b in args.bits.split(","))
    seed = _seed(args)
    model = profiler.make_toy_model(widths, seed=seed)
    data = profiler.make_toy_data(widths[0], seed=seed)
    config = profiler.TrainConfig(
        steps=args.steps, learning_rate=args.lr, batch=args.batch,
        seed=seed, optimizer=args.optimizer,
    )
    table = profiler.profile_sensitivity(model, data, bits, config)
    for b in bits:
        if b >= 32:
            col = table.bits.index(b)
            _check(
                np.all(table.delta_loss[:, col] == 0.0),
                "loss gap at 32 bits must be exactly zero",
            )
    tensorio.save_sensitivity(table, args.out)
    return 0


def cmd_allocate(args) -> int:
    table = tensorio.load_sensitivity(args.sensitivity)
    bit_set = tuple(int(b) for b in args.bits.split(","))
    problem = allocator.AllocationProblem(
        table=table, target_avg_bits=args.target, beta=args.beta, bit_set=bit_set
    )
    alloc = allocator.dp_allocate(problem)
    slack = max(bit_set) / args.beta
    _check(
        alloc.achieved_avg_bits <= args.target + slack,
        f"achieved {alloc.achieved_avg_bits} exceeds target {args.target} + {slack}",
    )
    _write_json(
        {
            "bits_per_layer": alloc.bits_per_layer,
            "achieved_avg_bits": alloc.achieved_avg_bits,
            "predicted_loss": alloc.predicted_loss,
            "target_avg_bits": args.target,
            "beta": args.beta,
            "whole_network_avg_bits": allocator.achieved_average(alloc, table),
        },
        args.out,
    )
    return 0


def cmd_pack(args) -> int:
    if args.unpack:
        packed = deploy.load_packed(args.infile)
        values = deploy.unpack_ternary(packed)
        rows = args.rows or 1
        if packed.count % rows:
            raise RobuqError(f"count {packed.count} not divisible by --rows {rows}")
        tensorio.save_matrix(
            values.reshape(rows, -1).astype(np.float32), args.out
        )
        return 0
    m = tensorio.load_matrix(args.infile)
    packed = deploy.pack_ternary(m.astype(np.int8).ravel())
    roundtrip = deploy.unpack_ternary(packed)
    _check(
        bool(np.array_equal(roundtrip, m.astype(np.int8).ravel())),
        "pack/unpack round trip failed",
    )
    deploy.save_packed(packed, args.out)
    return 0


def cmd_flops(args) -> int:
    if args.config:
        text = Path(args.config).read_text()
    else:
        text = resources.files("robuq.fixtures").joinpath("dit_xl2_flops.json").read_text()
    config = deploy.FlopsConfig.from_json(text)
    result = deploy.model_flops(config)
    total_again = sum(result["classes"].values())
    _check(
        abs(result["total_gflops"] - total_again) < 1e-12,
        "total does not equal the sum of class values",
    )
    width = max(len(name) for name in result["classes"])
    for name, gflops in result["classes"].items():
        print(f"{name:<{width}}  {gflops:10.4f} G")
    print(f"{'total':<{width}}  {result['total_gflops']:10.4f} G")
    if args.out:
        _write_json(result, args.out)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robuq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("hadamard", help="transform a matrix per token")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--roundtrip-check", action="store_true")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_hadamard)

    p = sub.add_parser("quantize", help="build a quantized layer from weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--rank", type=int, default=lowrank.DEFAULT_RANK)
    p.add_argument("--bits", type=int, default=4)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--uniform", action="store_true", default=True)
    group.add_argument("--lloyd", action="store_true")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--summary", default=None)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("gauss-report", help="normality and independence statistics")
    p.add_argument("--activations", required=True)
    p.add_argument("--bins", type=int, default=16)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_gauss_report)

    p = sub.add_parser("profile", help="QAT sensitivity profiling on a toy model")
    p.add_argument("--widths", default="64,64,64,64")
    p.add_argument("--bits", default="1,2,3,4")
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("allocate", help="DP bit allocation from a sensitivity CSV")
    p.add_argument("--sensitivity", required=True)
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--beta", type=int, default=1000)
    p.add_argument("--bits", default="1,2,3,4")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("pack", help="pack ternary values five per byte")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--unpack", action="store_true")
    p.add_argument("--rows", type=int, default=None, help="row count when unpacking to a matrix")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("flops", help="weighted FLOPs breakdown of a model config")
    p.add_argument("--config", default=None, help="FlopsConfig JSON; defaults to the DiT-XL/2 fixture")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_flops)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvariantFailure as exc:
        print(f"robuq: invariant check failed: {exc}", file=sys.stderr)
        return 1
    except (RobuqError, OSError, ValueError) as exc:
        print(f"robuq: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
