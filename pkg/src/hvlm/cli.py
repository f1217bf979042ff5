"""Command-line entry point: ``hvlm --stage <stage> [--config cfg.yaml] [--seed N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import torch

from .config import ABLATIONS, ConfigError, load_config
from .pipeline import MAIN_PIPELINE, STAGES, MissingArtifact, RunDir, run_stage

PRODUCES = {
    "generate": ("cohort",),
    "train-tokenizer": ("tokenizer",),
    "tokenize": ("tokens",),
    "pretrain-text": ("text",),
    "train-clip": ("clip",),
    "probe": ("heads",),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hvlm", description="Hierarchical volume-language model pipeline.")
    p.add_argument("--config", help="YAML or JSON experiment config (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--stage", required=True, choices=STAGES + ("all",),
                   help="stage to run; 'all' runs generate through fairness")
    p.add_argument("--run-dir", help="run directory (default: runs/<config hash>)")
    p.add_argument("--runs-root", default="runs", help="parent of hashed run directories")
    p.add_argument("--resume", action="store_true",
                   help="skip stages whose artifacts already exist and verify")
    p.add_argument("--ablation", choices=ABLATIONS, help="design toggle for the ablate stage")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-step records")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    try:
        run = RunDir.open(cfg, args.runs_root, args.run_dir)
    except ValueError as e:
        print(str(e), file=sys.stderr)
        return 2
    stages = MAIN_PIPELINE if args.stage == "all" else (args.stage,)
    for stage in stages:
        if args.resume and stage in PRODUCES and all(run.has(a) for a in PRODUCES[stage]):
            print(f"[{stage}] up to date, skipped")
            continue
        try:
            out = run_stage(run, stage, args.ablation)
        except MissingArtifact as e:
            print(f"[{stage}] {e}", file=sys.stderr)
            return 3
        except ValueError as e:
            print(f"[{stage}] {e}", file=sys.stderr)
            return 2
        print(f"[{stage}] done: {summary(stage, out)}")
    print(f"run directory: {run.root}")
    return 0


def summary(stage: str, out: dict) -> str:
    """Short human line for the end of a stage."""
    pick = {
        "generate": ("n_studies", "n_abnormal"),
        "train-tokenizer": ("codes_used",),
        "tokenize": ("sequences", "mean_kept_tokens"),
        "probe": ("diagnosis_mauc", "acuity_accuracy", "age_mae"),
        "explain": ("class", "hit_rate"),
        "scale-sweep": ("medians", "passes"),
    }.get(stage)
    if stage == "train-clip":
        last = out["history"][-1]
        return f"top1={last['top1']:.3f} top5={last['top5']:.3f} cpu={out['cpu_seconds']:.0f}s"
    if stage == "evaluate":
        r = out["retrieval"]
        return f"test top1={r['test_top1']:.3f} top5={r['test_top5']:.3f} mAUC={out['diagnosis_mauc']:.3f}"
    if stage == "fairness":
        flagged = sum(r["flagged"] for r in out["disparities"])
        return f"{len(out['disparities'])} disparities, {flagged} flagged"
    if stage == "ablate":
        name = out["ablation"]
        return (f"baseline top1={out['baseline']['test_top1']:.3f} steps={out['baseline']['steps_to_target']}; "
                f"{name} top1={out[name]['test_top1']:.3f} steps={out[name]['steps_to_target']}")
    if pick is None:
        return "ok"
    return json.dumps({k: out.get(k) for k in pick})


if __name__ == "__main__":
    sys.exit(main())
