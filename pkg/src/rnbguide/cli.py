"""Command-line entry point.

Exit codes: 0 success, 1 a gradient check above tolerance, 2 parse or
validation error, 3 non-finite gradient, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import GuidanceConfig
from .errors import NonFiniteGradient, ParseError, ValidationError
from .harness import runner
from .harness.io import atomic_write_text
from .harness.scene import load_scene

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("rnbguide")


def _variant(value: str) -> str:
    try:
        GuidanceConfig(variant=value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return value


def _variant_list(value: str) -> list[str]:
    return [_variant(v.strip()) for v in value.split(",") if v.strip()]


def _float_list(value: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rnbguide", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="guided sampling on one scene")
    run.add_argument("--scene", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--dump-maps", action="store_true", help="write per-step PGM attention and box maps")
    run.add_argument("--ablate", type=_variant, default=None, help="variant tag, e.g. no_ste or layout_guidance")
    run.add_argument("--grad-through-tau", action="store_true")

    gc = sub.add_parser("gradcheck", help="finite-difference check of the full energy on a random 8x8 scene")
    gc.add_argument("--seed", type=int, required=True)
    gc.add_argument("--probes", type=int, default=64)
    gc.add_argument("--h", type=float, default=1e-4)
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.add_argument("--ablate", type=_variant, default="rnb")
    gc.add_argument("--grad-through-tau", action="store_true")

    sw = sub.add_parser("sweep", help="final mIoU over values of one config field")
    sw.add_argument("--scene", required=True, type=Path)
    sw.add_argument("--param", required=True)
    sw.add_argument("--values", required=True, type=_float_list)
    sw.add_argument("--out", type=Path, default=None, help="also write sweep.csv here")
    sw.add_argument("--ablate", type=_variant, default=None)

    su = sub.add_parser("suite", help="every scene in a directory under several variants")
    su.add_argument("--scenes", required=True, type=Path)
    su.add_argument("--out", required=True, type=Path)
    su.add_argument("--variants", type=_variant_list, default=["rnb"])
    su.add_argument("--grad-through-tau", action="store_true")
    return p


def _cmd_run(args) -> int:
    report = runner.run_experiment(
        args.scene, args.out, variant=args.ablate, dump_maps=args.dump_maps, grad_through_tau=args.grad_through_tau
    )
    print(f"{report.scene} [{report.variant}] final mIoU {report.final_miou:.4f} ({len(report.rows)} rows)")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    rep = runner.gradcheck_scene(
        args.seed, args.probes, args.h, grad_through_tau=args.grad_through_tau, variant=args.ablate
    )
    ok = rep.max_rel_error <= args.tol
    print(
        f"seed {args.seed}: max_rel {rep.max_rel_error:.3e} max_abs {rep.max_abs_error:.3e} "
        f"compared {rep.num_compared} skipped_nonsmooth {rep.num_skipped_nonsmooth} -> {'PASS' if ok else 'FAIL'}"
    )
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def _cmd_sweep(args) -> int:
    scene = load_scene(args.scene)
    try:
        table = runner.sweep(scene, args.param, args.values, variant=args.ablate)
    except KeyError as exc:
        raise ValidationError(exc.args[0]) from None
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    text = runner.sweep_csv(args.param, table)
    if args.out is not None:
        atomic_write_text(args.out / "sweep.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def _cmd_suite(args) -> int:
    summary = runner.run_suite(args.scenes, args.out, args.variants, grad_through_tau=args.grad_through_tau)
    for v, m in summary["mean_final_miou"].items():
        print(f"{v}: mean final mIoU {m:.4f} over {len(summary['scenes'])} scenes")
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "gradcheck": _cmd_gradcheck, "sweep": _cmd_sweep, "suite": _cmd_suite}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteGradient as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
