"""``sage <stage> --config <path> [--seed S] [--workers N] [--out DIR]``.

Stages: preprocess, train-baseline, attack, train-defenses, matrix, acquire,
train-selector, eval, report, plus ``run-all`` and ``init-config``. On
failure the last stderr line is a single JSON object
``{"error": <kind>, "stage": <stage>, "message": <text>}`` and the exit code
is nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline

EXIT_CODES = {
    "config_error": 2,
    "missing_dependency": 3,
    "stale_artifact": 4,
    "pipeline_error": 5,
    "invalid_input": 6,
    "internal_error": 70,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sage", description="Per-sample adversarial defense selection pipeline.")
    p.add_argument("stage", choices=[*pipeline.STAGES, "run-all", "init-config"])
    p.add_argument("--config", type=Path, help="YAML pipeline config (required except for init-config)")
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument("--workers", type=int, default=None, help="within-stage worker processes")
    p.add_argument("--out", type=Path, default=None, help="output directory (overrides config 'out')")
    p.add_argument("--force", action="store_true", help="rerun even when the stage is up to date")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(kind: str, stage: str, message: str) -> int:
    print(json.dumps({"error": kind, "stage": stage, "message": message}), file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.stage == "init-config":
        text = pipeline.default_config_yaml()
        if args.config:
            args.config.write_text(text)
        else:
            sys.stdout.write(text)
        return 0
    if args.config is None:
        return _fail("config_error", args.stage, "--config is required")
    try:
        cfg = pipeline.load_config(args.config).with_overrides(args.seed, args.workers, args.out)
        if args.stage == "run-all":
            report = pipeline.run_all(cfg, force=args.force)
            print(json.dumps({"status": "ok", "stage": "run-all", "report": str(cfg.out / "report.json"),
                              "average": {k: report.average(k) for k in report.policies}}))
        else:
            ran = pipeline.run_stage(args.stage, cfg, force=args.force)
            print(json.dumps({"status": "ok" if ran else "skipped", "stage": args.stage, "out": str(cfg.out)}))
    except pipeline.PipelineError as exc:
        return _fail(exc.code, args.stage, str(exc))
    except ValueError as exc:
        return _fail("invalid_input", args.stage, str(exc))
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).debug("unhandled error", exc_info=True)
        return _fail("internal_error", args.stage, f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
