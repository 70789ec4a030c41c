"""Command line entry point: ``csflab <mode> [--config PATH] [--seed N] [--out DIR] [--workers N]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, RunConfig
from .report import ReportError, emit_report

OUT_ENV = "CSFLAB_OUT_DIR"
MODES = ("train", "eval", "ablate-skills", "ablate-dim", "ablate-objective", "lemma-check", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csflab", description="Contrastive successor-feature identifiability lab")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", type=Path, help="JSON file mirroring RunConfig (defaults used when absent)")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit); overrides the config")
    p.add_argument("--out", type=Path, help=f"output directory (${OUT_ENV} overrides the default)")
    p.add_argument("--workers", type=int, default=1, help="worker processes for ablation cells")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs")) / args.mode


def _print_checks(checks: dict) -> bool:
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return all(checks.values())


def skill_checks(table: dict, d: int) -> dict:
    rows = {r["label"]: r for r in table["rows"]}
    checks = {}
    for lab, r in rows.items():
        if lab.startswith("fixed-"):
            n = int(lab.split("-")[1])
            checks[f"{lab}_affine_verdict"] = r["affine_generator"] == (n >= d + 1)
        else:
            checks[f"{lab}_affine_verdict"] = bool(r["affine_generator"])
    if "fixed-2" in rows and "fixed-16" in rows:
        two, sixteen = rows["fixed-2"], rows["fixed-16"]
        checks["fixed-2_r2_diff_0.2_below_fixed-16"] = two["r2_diff"] <= sixteen["r2_diff"] - 0.2
        checks["fixed-2_coverage_below_fixed-16"] = two["coverage"] < sixteen["coverage"]
        if "resample" in rows:
            res = rows["resample"]
            checks["fixed-2_r2_diff_0.2_below_resample"] = two["r2_diff"] <= res["r2_diff"] - 0.2
            checks["fixed-2_coverage_below_resample"] = two["coverage"] < res["coverage"]
    return checks


def dim_checks(table: dict, d: int) -> dict:
    rows = {r["dim"]: r for r in table["rows"]}
    checks = {}
    if 2 in rows and d in rows:
        checks[f"dim-2_r2_diff_0.2_below_dim-{d}"] = rows[2]["r2_diff"] <= rows[d]["r2_diff"] - 0.2
        checks[f"dim-{d}_oracle_return_at_least_dim-2"] = rows[d]["oracle_return"] >= rows[2]["oracle_return"]
    return checks


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.mode == "report":
            print(emit_report(_out_dir(args)).read_text(), end="")
            return 0
        if args.mode == "eval":
            metrics = harness.evaluate_run(_out_dir(args))
            print(json.dumps({k: metrics[k] for k in ("r2_state", "r2_diff")}))
            return 0
        cfg = _config(args)
        out = _out_dir(args)
        if args.mode == "train":
            rep = harness.run_csf(cfg, out)
            emit_report(out)
            print(f"r2_state={rep.r2_state:.4f} r2_diff={rep.r2_diff:.4f} status={rep.status}")
            ok = _print_checks({"status_ok": rep.status == "ok",
                                f"r2_diff>={harness.R2_DIFF_MIN}": rep.r2_diff >= harness.R2_DIFF_MIN,
                                f"r2_state>={harness.R2_STATE_MIN}": rep.r2_state >= harness.R2_STATE_MIN})
        elif args.mode == "ablate-skills":
            table = harness.ablate_skills(cfg, out_dir=out, workers=args.workers)
            ok = _print_checks(skill_checks(table, cfg.env.d))
        elif args.mode == "ablate-dim":
            table = harness.ablate_dim(cfg, out_dir=out, workers=args.workers)
            ok = _print_checks(dim_checks(table, cfg.env.d))
        elif args.mode == "ablate-objective":
            ok = _print_checks(harness.ablate_objective(cfg, out_dir=out, workers=args.workers)["checks"])
        else:
            ok = _print_checks(harness.lemma_check(cfg, out_dir=out, workers=args.workers)["checks"])
        return 0 if ok else 1
    except (ConfigError, ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
