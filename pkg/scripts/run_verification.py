"""Run the finite-difference gradient check and the estimator bias checks.

    MM_THREADS=4 python scripts/run_verification.py --out runs/verify
"""
import argparse
import sys
from pathlib import Path

from mmseq.cli import main as mmseq_main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/verify"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicates", type=int, default=None, help="override verify.replicates")
    p.add_argument("--skip-bias", action="store_true", help="only run the gradient check")
    args = p.parse_args(argv)

    common = ["--out", str(args.out), "--seed", str(args.seed)]
    codes = {"gradcheck": mmseq_main(["gradcheck", "--config", str(CONFIGS / "gradcheck.yaml"), *common])}
    if not args.skip_bias:
        extra = [] if args.replicates is None else ["--override", f"verify.replicates={args.replicates}"]
        codes["verify"] = mmseq_main(["verify", "--config", str(CONFIGS / "verify.yaml"), *common, *extra])
    for name, code in codes.items():
        print(f"{name}: {'ok' if code == 0 else f'exit {code}'}")
    return max(codes.values())


if __name__ == "__main__":
    sys.exit(main())
