"""Train on the synthetic tasks and summarize the dev MM loss before and after the MM phase.

    python scripts/run_training.py --tasks length_control token_map --out runs
"""
import argparse
import json
import sys
from pathlib import Path

from mmseq.cli import main as mmseq_main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def summarize(out: Path) -> dict:
    records = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    mm = [r for r in records if r["phase"] == "mm"]
    best = min(mm, key=lambda r: r["mm_loss_dev"])
    return {
        "mm_loss_dev_start": mm[0]["mm_loss_dev"],
        "mm_loss_dev_best": best["mm_loss_dev"],
        "best_step": best["step"],
        "ce_loss_dev_start": mm[0]["ce_loss_dev"],
        "ce_loss_dev_best": best["ce_loss_dev"],
        "exact_match_best": best["exact_match"],
    }


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--tasks", nargs="+", default=["length_control", "token_map"])
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--override", action="append", default=[], help="dotted key=value, repeatable")
    args = p.parse_args(argv)

    summary = {}
    for task in args.tasks:
        out = args.out / task
        cmd = ["train", "--config", str(CONFIGS / f"{task}.yaml"), "--out", str(out)]
        if args.seed is not None:
            cmd += ["--seed", str(args.seed)]
        for o in args.override:
            cmd += ["--override", o]
        code = mmseq_main(cmd)
        if code != 0:
            return code
        summary[task] = summarize(out)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    print(f"{'task':16s} {'mm start':>10s} {'mm best':>10s} {'ratio':>6s} {'ce start':>9s} {'ce best':>9s}")
    for task, s in summary.items():
        print(f"{task:16s} {s['mm_loss_dev_start']:10.4g} {s['mm_loss_dev_best']:10.4g} "
              f"{s['mm_loss_dev_best'] / s['mm_loss_dev_start']:6.3f} "
              f"{s['ce_loss_dev_start']:9.4f} {s['ce_loss_dev_best']:9.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
