"""Command-line entry point: ``racsim {simulate,tune,train,compare}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import harness as H
from .policy import save_policy
from .sfcore import IntegrationError
from .tuner import InfeasibleBoxError

log = logging.getLogger("racsim")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        # fall back to the bundled scenarios by name
        builtin = Path(__file__).parent / "scenarios" / f"{p.stem}.yaml"
        if p.suffix == "" and builtin.exists():
            return H.load_scenario(builtin)
        raise H.ScenarioError(f"{path}: no such scenario file")
    return H.load_scenario(p)


def _outdir(arg) -> Path:
    out = Path(arg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _load(args.scenario)
    if args.seed is not None:
        cfg["seed"] = args.seed
    trace, metrics = H.run_scenario(cfg)
    out = _outdir(args.out)
    trace.to_csv(out / "trace.csv")
    H.rows_to_csv([{"scenario": cfg.get("name", ""), **metrics.row()}], out / "metrics.csv")
    if trace.shutdown:
        log.warning("supervised shutdown at t=%.6g s", trace.event_time("shutdown"))
    log.info("wrote %s", out / "trace.csv")
    return 0


def cmd_tune(args) -> int:
    cfg = _load(args.scenario)

    def report(it, best):
        if it % 10 == 0:
            log.info("iter %d best %.6g", it, best)

    best, history, tuned = H.tune_scenario(cfg, args.pop, args.iters, args.seed, callback=report)
    out = _outdir(args.out)
    with open(out / "gains.yaml", "w") as fh:
        yaml.safe_dump({"controller": {"gains": tuned["controller"]["gains"]}}, fh, sort_keys=False)
    with open(out / "history.csv", "w") as fh:
        fh.write("iteration,best_cost\n")
        for i, c in enumerate(history):
            fh.write(f"{i},{float(c)!r}\n")
    log.info("best cost %.6g", best.cost)
    return 0


def cmd_train(args) -> int:
    cfg = _load(args.scenario)
    net, history, data = H.train_policy(cfg)
    out = _outdir(args.out)
    save_policy(net, out / "policy.txt")
    with open(out / "training.csv", "w") as fh:
        fh.write("accepted_step,sse\n")
        for i, c in enumerate(history):
            fh.write(f"{i},{float(c)!r}\n")
    log.info("trained on %d rows, final SSE %.6g", len(data.y), history[-1])
    return 0


def cmd_compare(args) -> int:
    manifest_path = Path(args.manifest)
    with open(manifest_path) as fh:
        manifest = yaml.safe_load(fh)
    if not isinstance(manifest, dict) or "scenarios" not in manifest:
        raise H.ScenarioError("manifest.scenarios: missing required field")
    scenarios = []
    for entry in manifest["scenarios"]:
        p = Path(entry)
        if not p.is_absolute():
            p = manifest_path.parent / p
        scenarios.append(_load(str(p)))
    controllers = manifest.get("controllers") or [{"label": "default"}]
    rows = H.compare(scenarios, controllers)
    out = _outdir(args.out)
    H.rows_to_csv(rows, out / "comparison.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="racsim", description="Robust adaptive control simulation harness.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario and write trace and metrics CSVs")
    p.add_argument("scenario")
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune", help="JAYA gain tuning on the scenario's tuning block")
    p.add_argument("scenario")
    p.add_argument("--pop", type=int, default=20)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train", help="fit the neural policy on ramp data")
    p.add_argument("scenario")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="metrics table over scenarios x controllers")
    p.add_argument("manifest")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (H.ScenarioError, InfeasibleBoxError, yaml.YAMLError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
