"""Command-line client for the engine.

Exit codes: 0 success, 2 infeasible (hw/oracle), 3 configuration error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ConfigError,
    LockError,
    canonical_json,
    load_run_config,
    resume,
    run_hw_only,
    run_search,
    write_report,
)
from .hw_model import QceCostLibrary
from .hw_search import SearchSpaceTooLarge, Specification
from .space import network_from_json

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_CONFIG = 3
EXIT_IO = 4


def _load_json(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _json_error(path: str, exc: json.JSONDecodeError) -> str:
    return f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantnas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_search = sub.add_parser("search", help="run a controller-driven search")
    p_search.add_argument("--config", required=True, help="run config JSON file")
    p_search.add_argument("--seed", type=int, default=None)
    p_search.add_argument("--episodes", type=int, default=None)
    p_search.add_argument("--out", default=None, help="output directory override")
    p_search.add_argument("--mode", default=None, choices=["joint", "quant_only", "arch_only", "hw_only", "oracle"])

    p_resume = sub.add_parser("resume", help="continue a checkpointed search")
    p_resume.add_argument("checkpoint", help="checkpoint.json written by a previous run")
    p_resume.add_argument("--config", required=True)
    p_resume.add_argument("--seed", type=int, default=None)
    p_resume.add_argument("--episodes", type=int, default=None)
    p_resume.add_argument("--out", default=None)
    p_resume.add_argument("--mode", default=None, choices=["joint", "quant_only", "arch_only"])

    for name, help_text in (
        ("hw", "hardware feasibility search for one network"),
        ("oracle", "brute-force hardware search (small instances only)"),
    ):
        p_hw = sub.add_parser(name, help=help_text)
        p_hw.add_argument("network", help="network JSON file")
        p_hw.add_argument("--spec", default=None, help='spec JSON file {"rL":..,"rT":..,"clock_hz":..}')
        p_hw.add_argument("--rl", type=int, default=None, help="maximum LUTs")
        p_hw.add_argument("--rt", type=float, default=None, help="minimum throughput (frames/s)")
        p_hw.add_argument("--clock", type=float, default=100_000_000.0, help="clock rate in Hz")
        p_hw.add_argument("--cost-lib", default=None, help="QCE cost-library JSON file")
        p_hw.add_argument("--out", default=None, help="write solutions JSON here as well")

    p_report = sub.add_parser("report", help="export an episode log to CSV")
    p_report.add_argument("log", help="episodes.jsonl of a run")
    p_report.add_argument("--out", default=None, help="CSV path (default: report.csv next to the log)")

    p_serve = sub.add_parser("serve", help="start the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8000)

    return parser


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "episodes": args.episodes,
        "out_dir": args.out,
        "mode": args.mode,
    }


def _cmd_search(args) -> int:
    config = load_run_config(_load_json(args.config), _overrides(args))
    summary = run_search(config)
    print(canonical_json({
        "episodes_run": summary.episodes_run,
        "feasible_count": summary.feasible_count,
        "best_reward": summary.best_reward,
        "best": summary.best,
    }))
    return EXIT_OK


def _cmd_resume(args) -> int:
    config = load_run_config(_load_json(args.config), _overrides(args))
    summary = resume(Path(args.checkpoint), config)
    print(canonical_json({
        "episodes_run": summary.episodes_run,
        "feasible_count": summary.feasible_count,
        "best_reward": summary.best_reward,
        "best": summary.best,
    }))
    return EXIT_OK


def _cmd_hw(args, oracle: bool) -> int:
    try:
        network = network_from_json(_load_json(args.network))
    except json.JSONDecodeError as exc:
        raise ConfigError(_json_error(args.network, exc)) from None
    except ValueError as exc:
        raise ConfigError(f"{args.network}: {exc}") from None
    if args.spec is not None:
        spec = Specification.from_json(_load_json(args.spec))
    elif args.rl is not None and args.rt is not None:
        spec = Specification(max_luts=args.rl, min_fps=args.rt, clock_hz=args.clock)
    else:
        raise ConfigError("give --spec FILE or both --rl and --rt")
    lib = QceCostLibrary.from_file(args.cost_lib) if args.cost_lib else QceCostLibrary()
    result = run_hw_only(network, spec, lib, oracle=oracle)
    text = canonical_json(result)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK if result["feasible"] else EXIT_INFEASIBLE


def _cmd_report(args) -> int:
    out = args.out or str(Path(args.log).parent / "report.csv")
    rows, skipped = write_report(args.log, out)
    if skipped:
        print(f"warning: skipped {skipped} corrupt line(s)", file=sys.stderr)
    print(f"wrote {rows} row(s) to {out}")
    return EXIT_OK


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "search":
            return _cmd_search(args)
        if args.command == "resume":
            return _cmd_resume(args)
        if args.command == "hw":
            return _cmd_hw(args, oracle=False)
        if args.command == "oracle":
            return _cmd_hw(args, oracle=True)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "serve":
            return _cmd_serve(args)
        raise AssertionError(f"unhandled command {args.command!r}")
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: line {exc.lineno}, column {exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, SearchSpaceTooLarge, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
