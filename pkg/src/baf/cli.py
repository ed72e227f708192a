"""Command-line entry points.

Subcommands:
  filter    score and gate an adapter, write the filtered checkpoint
  inspect   score only, emit the report (and optional CSV/figures)
  split     keep only channels on one side of the null baseline
  lab       synthetic checks: Monte-Carlo null baseline, planted ablation

Exit codes: 0 success, 2 config error, 3 parse/corrupt file, 4 pairing
failure in strict mode, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from ._version import __version__
from .core import GateConfig
from .errors import BafError, ConfigError
from .lab import PlantSpec, monte_carlo_null, run_ablation
from .lora import KeyMap
from .pipeline import RunConfig, ablation_split, inspect_adapter, run_filter


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="baf",
        description="Filter memorization-prone spectral channels out of LoRA adapters "
        "by anchoring them against the pretrained base model.",
    )
    parser.add_argument("--version", action="version", version=f"baf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_filter = sub.add_parser("filter", help="write a filtered copy of an adapter")
    _add_run_args(p_filter, need_out=True)
    p_filter.add_argument("--mode", choices=["hard", "soft"], default="soft",
                          help="binary removal vs continuous down-weighting (default: soft)")
    p_filter.add_argument("--alpha", type=float, default=1.0,
                          help="soft-gate exponent; 0 passes everything through (default: 1)")
    p_filter.set_defaults(func=_cmd_filter)

    p_inspect = sub.add_parser("inspect", help="score an adapter and write the report")
    _add_run_args(p_inspect, need_out=False)
    p_inspect.add_argument("--mode", choices=["hard", "soft"], default="soft")
    p_inspect.add_argument("--alpha", type=float, default=1.0)
    p_inspect.set_defaults(func=_cmd_inspect)

    p_split = sub.add_parser("split", help="keep only high- or low-anchoring channels")
    p_split.add_argument("--direction", choices=["high", "low"], required=True,
                         help="high keeps anchoring >= baseline, low keeps the rest")
    _add_run_args(p_split, need_out=True)
    p_split.set_defaults(func=_cmd_split)

    p_lab = sub.add_parser("lab", help="synthetic validation utilities")
    lab_sub = p_lab.add_subparsers(dest="lab_command", required=True)

    p_null = lab_sub.add_parser("null", help="Monte-Carlo check of the null baseline")
    p_null.add_argument("--m", type=int, required=True)
    p_null.add_argument("--n", type=int, required=True)
    p_null.add_argument("--k", type=int, required=True)
    p_null.add_argument("--trials", type=int, default=10000)
    p_null.add_argument("--seed", type=int, default=0)
    p_null.set_defaults(func=_cmd_lab_null)

    p_abl = lab_sub.add_parser("ablation", help="planted-channel separation experiment")
    p_abl.add_argument("--spec", required=True, help="JSON plant spec file")
    p_abl.add_argument("--tau-energy", type=float, default=0.85)
    p_abl.set_defaults(func=_cmd_lab_ablation)

    return parser


def _add_run_args(p: argparse.ArgumentParser, need_out: bool) -> None:
    p.add_argument("--lora", required=True, help="input LoRA checkpoint")
    p.add_argument("--base", required=True, help="base model checkpoint to anchor against")
    if need_out:
        p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--tau-energy", type=float, default=0.85,
                   help="spectral energy captured by the principal subspace (default: 0.85)")
    p.add_argument("--keymap", default="kohya-unet",
                   help="preset name (kohya-unet, diffusers-attn) or JSON keymap file")
    p.add_argument("--strict", action="store_true",
                   help="fail when any LoRA stem has no matching base weight")
    p.add_argument("--include", action="append", default=[], metavar="GLOB",
                   help="only filter stems matching a glob (repeatable)")
    p.add_argument("--exclude", action="append", default=[], metavar="GLOB",
                   help="pass through stems matching a glob (repeatable)")
    p.add_argument("--workers", default="auto",
                   help="layer-level parallelism: a positive integer or 'auto'")
    p.add_argument("--out-dtype", default="preserve",
                   choices=["preserve", "f64", "f32", "f16", "bf16"],
                   help="storage dtype for rewritten factors (default: preserve)")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--csv", help="write a per-channel CSV dump here")
    p.add_argument("--figures", help="render report figures into this directory")


def _parse_workers(raw: str) -> int | None:
    if raw == "auto":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"--workers must be an integer or 'auto', got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"--workers must be >= 1, got {value}")
    return value


def _run_config(args, mode: str = "soft", alpha: float = 1.0) -> RunConfig:
    gate = GateConfig(mode=mode, alpha=alpha, tau_energy=args.tau_energy)
    return RunConfig(
        lora_path=args.lora,
        base_path=args.base,
        output_path=getattr(args, "out", None),
        report_path=args.report,
        csv_path=args.csv,
        figures_dir=args.figures,
        gate=gate,
        keymap=KeyMap.resolve(args.keymap),
        strict=args.strict,
        include=tuple(args.include),
        exclude=tuple(args.exclude),
        workers=_parse_workers(args.workers),
        out_dtype=args.out_dtype,
    )


def _print_summary(report, action: str) -> None:
    agg = report.aggregates
    print(
        f"{action}: {len(report.layers)} layers, "
        f"kept {agg.total_kept}/{agg.total_channels} channels"
        + (f", {len(report.unfiltered_layers)} passed through" if report.unfiltered_layers else "")
    )


def _cmd_filter(args) -> int:
    report = run_filter(_run_config(args, mode=args.mode, alpha=args.alpha))
    _print_summary(report, f"filtered ({args.mode})")
    return 0


def _cmd_inspect(args) -> int:
    report = inspect_adapter(_run_config(args, mode=args.mode, alpha=args.alpha))
    _print_summary(report, "inspected")
    if args.report is None:
        print(report.to_json())
    return 0


def _cmd_split(args) -> int:
    report = ablation_split(_run_config(args, mode="hard"), args.direction)
    _print_summary(report, f"split ({args.direction})")
    return 0


def _cmd_lab_null(args) -> int:
    mean = monte_carlo_null(args.m, args.n, args.k, args.trials, args.seed)
    expected = (args.k * args.k) / (args.m * args.n)
    print(json.dumps({
        "m": args.m,
        "n": args.n,
        "k": args.k,
        "trials": args.trials,
        "seed": args.seed,
        "empirical_mean": mean,
        "expected": expected,
        "relative_error": abs(mean - expected) / expected,
    }, indent=2))
    return 0


def _cmd_lab_ablation(args) -> int:
    spec = PlantSpec.from_file(args.spec)
    cfg = GateConfig(mode="hard", tau_energy=args.tau_energy)
    result = run_ablation(spec, cfg)
    print(json.dumps(result.to_dict(), indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BafError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
