"""Command-line entry point for the confidence-scored parser pipeline.

Every command takes a workspace directory and an optional TOML config file;
omitting the config runs the defaults. Stages refuse to mix artifacts
produced under different config hashes, so a changed config means rerunning
from `generate`.
"""

import argparse
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .pipeline import (
    PipelineError,
    Workspace,
    run_all,
    stage_eval,
    stage_generate,
    stage_interpret,
    stage_report,
    stage_score,
    stage_train,
)

REPORT_HELP = """\
Write plot-ready CSVs from the evaluation report.

Columns:
  coverage.csv     threshold,coverage,f1,f1_smoothed
                   one row per threshold; the first row is full coverage
                   (coverage = 1.0) and f1_smoothed is the isotonic fit
  correlation.csv  label,<one column per label>
                   pairwise Spearman correlation of F1 and every feature
  importance.csv   feature,gain
                   mean split gain per feature, normalized so max = 1.0

Every CSV starts with a `# config_hash=<hash>` stamp line.
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parseconf",
        description="Train a neural semantic parser, score its confidence, "
                    "and explain which input tokens drive uncertainty.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, **kwargs) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text, **kwargs)
        p.add_argument("--workspace", "-w", required=True, metavar="DIR",
                       help="directory holding all artifacts of this run")
        p.add_argument("--config", "-c", metavar="FILE", default=None,
                       help="TOML config file (defaults used when omitted)")
        return p

    add("generate", "Generate the synthetic corpus into the workspace.")
    add("train", "Train the parser on the generated corpus.")
    add("score", "Extract confidence features and fit the scorer on dev.")
    add("eval", "Evaluate confidence and interpretation quality on test.")
    add("interpret", "Write per-example uncertainty reports for test items.")
    add("report", "Write plot-ready CSVs from the evaluation report.",
        formatter_class=argparse.RawDescriptionHelpFormatter).description = \
        REPORT_HELP
    add("run", "Run every stage in order (generate through report).")
    return parser


def _dispatch(args, cfg: RunConfig, ws: Workspace) -> None:
    if args.command == "generate":
        split = stage_generate(cfg, ws)
        counts = split.manifest["counts"]
        print(f"corpus written to {ws.path('corpus')} "
              f"(train={counts['train']} dev={counts['dev']} "
              f"test={counts['test']})")
    elif args.command == "train":
        stage_train(cfg, ws)
        print(f"checkpoint written to {ws.path('checkpoint')}")
    elif args.command == "score":
        fitted = stage_score(cfg, ws)
        print(f"scorer written to {ws.path('scorer')} "
              f"(trees={len(fitted.trees)})")
    elif args.command == "eval":
        report = stage_eval(cfg, ws)
        rho = report.spearman_by_method
        print(f"eval report written to {ws.path('eval')} "
              f"(rho conf={rho['conf']:.3f} posterior={rho['posterior']:.3f})")
    elif args.command == "interpret":
        written = stage_interpret(cfg, ws)
        print(f"{len(written)} uncertainty reports under {ws.path('interpret')}")
    elif args.command == "report":
        paths = stage_report(cfg, ws)
        for path in paths.values():
            print(f"wrote {path}")
    elif args.command == "run":
        report = run_all(cfg, ws)
        rho = report.spearman_by_method
        print(f"pipeline complete under {ws.root} "
              f"(rho conf={rho['conf']:.3f} posterior={rho['posterior']:.3f})")
    else:  # pragma: no cover - argparse enforces the choices
        raise PipelineError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg.validate()
        _dispatch(args, cfg, Workspace(Path(args.workspace)))
    except (PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"config hash {cfg.hash()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
