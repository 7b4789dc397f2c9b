"""Evaluate a saved checkpoint on the dev set of a training run.

    python scripts/eval_checkpoint.py runs/length_control
"""
import argparse
import sys
from pathlib import Path

from mmseq.cli import main as mmseq_main


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run_dir", type=Path, help="output directory of an 'mmseq train' run")
    p.add_argument("--which", choices=["best", "final"], default="best")
    args = p.parse_args(argv)
    return mmseq_main(["eval", "--config", str(args.run_dir / "config.yaml"),
                       "--checkpoint", str(args.run_dir / "checkpoints" / f"{args.which}.json"),
                       "--out", str(args.run_dir / f"eval_{args.which}")])


if __name__ == "__main__":
    sys.exit(main())
