"""
Command-line entry point: `python -m src <command> --out DIR [options]`.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import structlog
from pydantic import ValidationError

from src.cli.reports import write_report, write_table
from src.domain.metrics import EvalReport, LatencyReport
from src.infrastructure.logging import configure_logging
from src.run_config import RunConfig
from src.worker.main import execute_run

logger = structlog.get_logger()

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

COMMANDS = {
    "gen-data": "write the synthetic dataset",
    "train-ae": "train the autoencoder",
    "train-flow": "train the latent flow model on an autoencoder's latents",
    "reconstruct": "round-trip the dataset through an autoencoder",
    "sample": "generate images with a flow model and an autoencoder",
    "eval": "reconstruction (and optionally generation) metrics",
    "bench": "decoder latency per resolution and attention mode",
    "ablate-loss": "train and evaluate every loss preset",
    "ablate-reg": "train and evaluate every latent regularizer",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def _mode_list(text: str) -> list[str]:
    modes = [v for v in text.split(",") if v]
    bad = [m for m in modes if m not in ("full", "swa")]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown attention mode(s) {bad}")
    return modes


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vitok", description="Desk-scale native-resolution ViT autoencoder toolkit.")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, help_text in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--out", type=Path, required=True, help="output directory")
        cmd.add_argument("--config", type=Path, help="TOML run configuration")
        cmd.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        cmd.add_argument("--seed", type=int)
        cmd.add_argument("--data-dir", type=Path)
        if name in ("train-flow", "reconstruct", "sample", "eval"):
            cmd.add_argument("--checkpoint", type=Path, required=True, help="autoencoder checkpoint")
        if name == "bench":
            cmd.add_argument("--checkpoint", type=Path, help="autoencoder checkpoint (default: fresh model)")
        if name == "sample":
            cmd.add_argument("--flow", type=Path, required=True, help="flow checkpoint")
            cmd.add_argument("--count", type=int)
            cmd.add_argument("--size", type=int)
        if name == "eval":
            cmd.add_argument("--flow", type=Path, help="flow checkpoint for generation metrics")
            cmd.add_argument("--bench", action="store_true", help="also record decoder latency")
        if name in ("reconstruct", "eval", "ablate-loss", "ablate-reg"):
            cmd.add_argument("--window-radius", type=int)
        if name in ("eval", "bench"):
            cmd.add_argument("--attention", type=_mode_list)
            cmd.add_argument("--resolutions", type=_int_list)
    return parser


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _nest(target: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    for key in keys[:-1]:
        target = target.setdefault(key, {})
        if not isinstance(target, dict):
            raise UsageError(f"'{dotted}' overrides a scalar setting")
    target[keys[-1]] = value


def collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Flag overrides as a nested dict; dedicated flags win over --set."""
    overrides: dict[str, Any] = {}
    for item in args.overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got '{item}'")
        _nest(overrides, key, _parse_value(raw))
    flags = {
        "seed": args.seed,
        "data.dir": getattr(args, "data_dir", None),
        "eval.window_radius": getattr(args, "window_radius", None),
        "eval.bench_modes": getattr(args, "attention", None),
        "eval.bench_resolutions": getattr(args, "resolutions", None),
    }
    for key, value in flags.items():
        if value is not None:
            _nest(overrides, key, str(value) if isinstance(value, Path) else value)
    return overrides


def _write_outputs(command: str, result: dict[str, Any], out_dir: Path) -> None:
    if "report" in result:
        model = LatencyReport if command == "bench" else EvalReport
        report = model.model_validate(result["report"])
        write_report(report, out_dir / "report.json", "json")
        write_report(report, out_dir / "report.csv", "csv")
    if "rows" in result:
        write_table(result["rows"], out_dir / "ablation.csv")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE

    configure_logging(level=args.log_level)

    try:
        config = RunConfig.load(args.config, collect_overrides(args))
    except (UsageError, ValidationError, ValueError, OSError) as e:
        print(f"vitok: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE

    options = {k: getattr(args, k, None) for k in ("checkpoint", "flow", "count", "size", "bench")}
    try:
        result = execute_run(args.command, config, args.out, options)
        _write_outputs(args.command, result, args.out)
    except Exception as e:
        print(f"vitok: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    print(json.dumps(result, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
