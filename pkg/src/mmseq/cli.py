"""Command-line entry point: ``mmseq {train,verify,gradcheck,eval}``.

Exit codes: 0 success, 1 runtime failure (including a failed check),
2 configuration or input failure.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .config import RunConfig, build_corpora, build_features, build_model, load_config
from .data import encode_with
from .errors import ConfigError, MMError
from .estimators import EstimatorConfig, mm_gradient_exact
from .features import ConstantFeature, FeatureSet
from .seqmodel import load_model, save_model
from .training import dev_ce_loss, dev_moments, exact_match_rate, train
from .verification import (designed_unmatched_instance, estimator_bias_report, gradcheck, gradcheck_instance,
                           lemma1_check, lemma_instance, standard_instance, worker_count)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _versions() -> dict:
    return {"mmseq": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pyyaml": yaml.__version__}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(cfg: RunConfig, command: str) -> Path:
    """Resolved config plus hash, seed and versions; ``--config <out>/config.yaml`` reruns it."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
    _write_json(out / "run_manifest.json", {
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.config_hash(),
        "seed": cfg.seed,
        "versions": _versions(),
        "rerun": f"mmseq {command} --config {out / 'config.yaml'}",
    })
    return out


# -- train ---------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    train_corpus, dev_corpus = build_corpora(cfg)
    fs = build_features(cfg, train_corpus.vocab_src, train_corpus.vocab_tgt)
    model = build_model(cfg, train_corpus.vocab_src, train_corpus.vocab_tgt)
    out = write_manifest(cfg, "train")
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    best = {"step": None, "mm_loss_dev": float("inf")}

    with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics, \
            open(out / "timing.jsonl", "w", encoding="utf-8") as timing:
        def on_eval(rec, model):
            metrics.write(json.dumps(rec.to_dict()) + "\n")
            metrics.flush()
            timing.write(json.dumps({"step": rec.step, "wall_time": rec.wall_time}) + "\n")
            # same rule as the trainer: MM phase only, strict improvement
            if rec.phase == "mm" and rec.mm_loss_dev < best["mm_loss_dev"]:
                best.update(step=rec.step, mm_loss_dev=rec.mm_loss_dev)
                save_model(model, ckpt / "best.json")

        result = train(cfg.train, model, fs, train_corpus, dev_corpus, on_eval=on_eval)

    save_model(result.model, ckpt / "final.json")
    final = result.metrics[-1]
    _write_json(ckpt / "manifest.json", {
        "best": "best.json", "best_step": best["step"], "best_mm_loss_dev": best["mm_loss_dev"],
        "final": "final.json", "final_step": final.step,
    })
    start = result.phase_start.mm_loss_dev
    print(f"mm_loss_dev: start {start:.6g}  best {best['mm_loss_dev']:.6g} (step {best['step']})  "
          f"final {final.mm_loss_dev:.6g}")
    print(f"ce_loss_dev: start {result.phase_start.ce_loss_dev:.6g}  final {final.ce_loss_dev:.6g}  "
          f"mm_samples {result.mm_samples}")
    print(f"wrote {out}")
    return EXIT_OK


# -- verify --------------------------------------------------------------------

def cmd_verify(cfg: RunConfig) -> int:
    v = cfg.verify
    out = write_manifest(cfg, "verify")
    workers = worker_count()
    model, fs, x, refs = standard_instance(v.instance_seed)
    results = {}
    for strategy in v.strategies:
        if strategy == "economical":
            m, f, xx, rr = designed_unmatched_instance()
            est = EstimatorConfig("economical", J=v.economical_J)
        else:
            m, f, xx, rr = model, fs, x, refs
            J = {"jackknife": v.J, "simplistic": v.simplistic_J}.get(strategy, 1)
            est = EstimatorConfig(strategy, J=J, K=v.K)
        try:
            report = estimator_bias_report(m, f, xx, rr, est, v.replicates, cfg.seed, cfg.enum_cap, workers)
        except ConfigError as exc:
            print(f"inconclusive: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if strategy == "exact":
            ok = report.exact_match
        elif strategy == "economical":
            ok = not report.passes()  # the biased estimator must be caught
        else:
            ok = report.passes()
        results[strategy] = (report, ok)
    if v.lemma:
        lm, lfs, zeta = lemma_instance(v.instance_seed)
        try:
            report = lemma1_check(lm, lfs, zeta, v.lemma_J, v.replicates, cfg.seed, cap=cfg.enum_cap,
                                  workers=workers)
        except ConfigError as exc:
            print(f"inconclusive: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        results["lemma1"] = (report, report.passes())

    summary = {}
    for label, (report, ok) in results.items():
        _write_json(out / "verify" / f"{label}.json", report.to_dict())
        summary[label] = dict(report.summary(), expected_outcome_met=ok)
        print(f"{label:11s} max|z|={report.max_abs_z:8.3f}  within4={report.fraction_within_4:.4f}  "
              f"{'OK' if ok else 'UNEXPECTED'}")
    all_ok = all(ok for _, ok in results.values())
    _write_json(out / "verify" / "summary.json", {"all_ok": all_ok, "reports": summary})
    return EXIT_OK if all_ok else EXIT_FAIL


# -- gradcheck -----------------------------------------------------------------

def _half_gradient(model, fs, batch, cap):
    return 0.5 * mm_gradient_exact(model, fs, batch, cap)


def cmd_gradcheck(cfg: RunConfig) -> int:
    g = cfg.gradcheck
    out = write_manifest(cfg, "gradcheck")
    grad_fn = _half_gradient if g.drop_factor_two else None
    errors = []
    for i in range(g.seeds):
        model, fs, batch = gradcheck_instance(cfg.seed + i)
        if g.features == "constant":
            fs = FeatureSet([ConstantFeature(1.0)])
        errors.append(gradcheck(model, fs, batch, g.h, cfg.enum_cap, grad_fn))
    worst = max(errors)
    ok = worst <= g.tol
    _write_json(out / "gradcheck.json", {"relative_errors": errors, "max_relative_error": worst,
                                         "tol": g.tol, "passes": ok})
    print(f"gradcheck: {g.seeds} instances, max relative error {worst:.3e} (tol {g.tol:g}) "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# -- eval ----------------------------------------------------------------------

def cmd_eval(cfg: RunConfig, checkpoint) -> int:
    if checkpoint is None or not Path(checkpoint).is_file():
        print(f"error: checkpoint not found: {checkpoint}", file=sys.stderr)
        return EXIT_CONFIG
    model = load_model(checkpoint)
    _, dev = build_corpora(cfg)
    if (dev.vocab_src, dev.vocab_tgt) != (model.vocab_src, model.vocab_tgt):
        dev = encode_with(dev.to_lines(), model.vocab_src, model.vocab_tgt)
    fs = build_features(cfg, model.vocab_src, model.vocab_tgt)
    loss, gap = dev_moments(model, fs, dev.examples, cfg.train.dev_samples, cfg.seed)
    report = {
        "checkpoint": str(checkpoint),
        "mm_loss_dev": loss,
        "moment_gap": gap.tolist(),
        "ce_loss_dev": dev_ce_loss(model, dev.examples),
        "exact_match": exact_match_rate(model, dev.examples),
        "dev_samples": cfg.train.dev_samples,
        "eval_seed": cfg.seed,
    }
    print(json.dumps(report))
    _write_json(Path(cfg.out) / "eval.json", report)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config key, value parsed as YAML (repeatable)")
    parser = argparse.ArgumentParser(prog="mmseq", description="Moment-matching training for tabular sequence models.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="CE warm start then MM training")
    sub.add_parser("verify", parents=[common], help="Monte Carlo unbiasedness checks")
    sub.add_parser("gradcheck", parents=[common], help="exact gradient vs finite differences")
    ev = sub.add_parser("eval", parents=[common], help="dev-set metrics of a checkpoint")
    ev.add_argument("--checkpoint", metavar="PATH", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.override, args.seed, args.out)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return cmd_eval(cfg, args.checkpoint)
    except (MMError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
