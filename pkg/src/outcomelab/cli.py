"""Command-line entry point.

    outcomelab run --config cfg.json [--out results.csv] [--threads N]
                   [--figures DIR]
    outcomelab validate --config cfg.json
    outcomelab show-mdp --spec mdp.txt

Exit codes: 0 all pass flags true, 1 some pass flag false, 2 config or
spec error. OUTCOMELAB_ENUM_CAP overrides the default enumeration cap.
"""

from __future__ import annotations

import argparse
import sys

from . import serialize
from .experiments import (
    ExperimentConfig,
    ExperimentError,
    render_figures,
    result_to_csv,
    run,
    write_result,
)
from .mdp import MdpValidationError, optimal_value, path_sum_extrema


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="outcomelab",
        description="Finite-MDP experiments for outcome vs. process supervision",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a registry experiment")
    p_run.add_argument("--config", required=True, help="experiment config (JSON)")
    p_run.add_argument("--out", help="CSV output path (overrides config)")
    p_run.add_argument("--threads", type=int, help="parallel workers across seeds")
    p_run.add_argument(
        "--figures", help="directory for rendered PNG figures (optional)"
    )

    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("--config", required=True)

    p_show = sub.add_parser("show-mdp", help="summarize an MDP spec file")
    p_show.add_argument("--spec", required=True)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_json(args.config)
    if args.out:
        config.out = args.out
    result = run(config, threads=args.threads)
    if config.out:
        write_result(result, config.out)
        print(f"wrote {config.out}")
    else:
        sys.stdout.write(result_to_csv(result))
    if args.figures:
        for path in render_figures(result, args.figures):
            print(f"wrote {path}")
    for metric, ok in sorted(result.pass_flags().items()):
        print(f"{metric}: {'ok' if ok else 'FAILED'}")
    return 0 if result.passed else 1


def _cmd_validate(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_json(args.config)
    config.validate()
    print(f"config ok: experiment={config.experiment} seeds={len(config.seeds)}")
    return 0


def _cmd_show_mdp(args: argparse.Namespace) -> int:
    mdp = serialize.load_mdp(args.spec)
    lo, hi = path_sum_extrema(mdp, mdp.reward)
    print(f"horizon: {mdp.horizon}")
    print(f"actions: {mdp.n_actions}")
    print(f"layers:  {' '.join(str(len(l)) for l in mdp.layers)}")
    for h, names in enumerate(mdp.layers):
        print(f"  layer {h + 1}: {' '.join(names)}")
    print(f"initial state: {mdp.initial_state}")
    print(f"total reward range: [{serialize.fmt(lo)}, {serialize.fmt(hi)}]")
    print(f"optimal return: {serialize.fmt(optimal_value(mdp))}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "validate":
            return _cmd_validate(args)
        return _cmd_show_mdp(args)
    except ExperimentError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except (MdpValidationError, OSError) as exc:
        print(f"error[bad-config]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
