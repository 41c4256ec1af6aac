"""Command-line entry point: ``stereo-selftrain <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig, dump_config, load_config, parse_assignment, train_config_with
from .data import DatasetManifest, load_manifest, write_dataset, write_manifest, write_pfm
from .errors import ConfigError, FormatError, StructureMismatchError
from .experiment import (DEFAULT_CELLS, TABLES, Splits, analyze_sample, mean_correlations,
                         report_lines, run_grid, synthetic_splits)
from .metrics import EvalReport, evaluate_many, write_report_json
from .model import load_checkpoint
from .training import MetricsLog, evaluate_model, predict, pretrain, run_selftraining

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

logger = logging.getLogger("stereo_selftrain")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(config: RunConfig, text: str, out: Path):
    (out / "config.resolved.yaml").write_text(dump_config(config))
    if text:
        (out / "config.input.yaml").write_text(text)


def _manifest(config: RunConfig) -> DatasetManifest:
    if not config.manifest:
        raise ConfigError("this command needs a manifest (--manifest or 'manifest:' in the config)")
    return load_manifest(config.manifest)


def _checkpoint(config: RunConfig, required: bool = True):
    if not config.checkpoint:
        if required:
            raise ConfigError("this command needs a checkpoint (--checkpoint or 'checkpoint:')")
        return None
    path = Path(config.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    model, _ = load_checkpoint(path, config.model)
    return model


def _train_config(config: RunConfig):
    return train_config_with(config.train, {}, config.seed)


def _print_table(rows: list[dict], keys: list[str], stream=None):
    """Tab-delimited table on stdout."""
    stream = stream or sys.stdout
    print("\t".join(keys), file=stream)
    for r in rows:
        print("\t".join(_cell(r.get(k)) for k in keys), file=stream)


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _write_tsv(path: Path, rows: list[dict], keys: list[str]):
    with open(path, "w") as f:
        _print_table(rows, keys, f)


def _plot_log(records: list[dict], key: str, path: Path, title: str):
    from .plotting import plot_curves

    rows = [r for r in records if key in r and "step" in r and "event" not in r]
    if rows:
        plot_curves(rows, key, path, title=title)


def _report_record(report: EvalReport, **extra) -> dict:
    rec = {"epe": report.epe, "d1": report.d1, "avgerr": report.avgerr, "n_valid": report.n_valid}
    rec.update({f"bad{k:g}": v for k, v in report.bad.items()})
    rec.update(extra)
    return rec


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(config: RunConfig, out: Path) -> int:
    """Synthetic source (labeled) and target (unlabeled + eval) splits plus a manifest."""
    d = config.data
    splits = synthetic_splits(d.source.build(), d.target.build(), config.seed,
                              d.n_labeled, d.n_unlabeled, d.n_eval)
    labeled = write_dataset(splits.labeled, out, "labeled", gt_format=d.gt_format)
    unlabeled = write_dataset(splits.unlabeled, out, "unlabeled", with_gt=False)
    held_out = write_dataset(splits.eval, out, "eval", gt_format=d.gt_format)
    write_manifest(out / "manifest.yaml", labeled, unlabeled, held_out,
                   kinds={"labeled": "synthetic-source", "unlabeled": "synthetic-target",
                          "eval": "synthetic-target"})
    _print_table([{"split": "labeled", "n": len(labeled)}, {"split": "unlabeled", "n": len(unlabeled)},
                  {"split": "eval", "n": len(held_out)}], ["split", "n"])
    print(f"manifest\t{out / 'manifest.yaml'}")
    return EXIT_OK


def cmd_pretrain(config: RunConfig, out: Path) -> int:
    manifest = _manifest(config)
    labeled = manifest.load("labeled")
    if not labeled:
        raise ConfigError("manifest has no labeled entries to pretrain on")
    log = MetricsLog(out / "metrics.log")
    init = _checkpoint(config, required=False)
    model = pretrain(labeled, config.model, _train_config(config), log,
                     checkpoint_path=out / "model.pt", model=init)
    _plot_log(log.records, "loss", out / "loss_pretrain.png", "pretraining loss")
    rows = [{"key": "checkpoint", "value": str(out / "model.pt")},
            {"key": "final_loss", "value": log.records[-1].get("final_loss")}]
    eval_samples = [s for s in manifest.load("eval") if s.has_gt]
    if eval_samples:
        report = evaluate_model(model, eval_samples)
        write_report_json(out / "report.json", {"command": "pretrain", "report": report.to_dict()})
        rows += [{"key": "eval_epe", "value": report.epe}, {"key": "eval_d1", "value": report.d1}]
    _print_table(rows, ["key", "value"])
    return EXIT_OK


def cmd_selftrain(config: RunConfig, out: Path) -> int:
    manifest = _manifest(config)
    init = _checkpoint(config, required=True)
    unlabeled = manifest.load("unlabeled")
    if not unlabeled:
        raise ConfigError("manifest has no unlabeled entries to self-train on")
    eval_samples = [s for s in manifest.load("eval") if s.has_gt]
    log = MetricsLog(out / "metrics.log")
    student = run_selftraining(unlabeled, init, _train_config(config), log,
                               eval_samples=eval_samples, eval_every=config.eval_every,
                               checkpoint_path=out / "student.pt",
                               checkpoint_every=config.checkpoint_every)
    _plot_log(log.records, "loss", out / "loss_selftrain.png", "self-training loss")
    _plot_log(log.records, "w_mean", out / "weight_selftrain.png", "mean reliability weight")
    n_ema = sum(1 for r in log.records if r.get("event") == "ema")
    rows = [{"key": "checkpoint", "value": str(out / "student.pt")},
            {"key": "steps", "value": config.train.steps_selftrain},
            {"key": "ema_updates", "value": n_ema}]
    if eval_samples:
        report = evaluate_model(student, eval_samples)
        write_report_json(out / "report.json", {"command": "selftrain", "report": report.to_dict()})
        rows += [{"key": "eval_epe", "value": report.epe}, {"key": "eval_d1", "value": report.d1}]
    _print_table(rows, ["key", "value"])
    return EXIT_OK


def cmd_eval(config: RunConfig, out: Path, gt_as_pred: bool = False) -> int:
    manifest = _manifest(config)
    samples = [s for s in manifest.load("eval") if s.has_gt]
    if not samples:
        raise ConfigError("manifest has no eval entries with ground truth")
    if gt_as_pred:
        # debugging path: a perfect predictor, exercising IO and metrics only
        preds = [s.gt_disparity.values for s in samples]
        source = "ground-truth"
    else:
        preds = predict(_checkpoint(config, required=True), samples)
        source = str(config.checkpoint)
    gts = [s.gt_disparity.values for s in samples]
    valids = [s.validity for s in samples]
    report = evaluate_many(preds, gts, valids)
    per_sample = [_report_record(evaluate_many([p], [g], [v]), id=s.id)
                  for p, g, v, s in zip(preds, gts, valids, samples)]
    keys = ["id", "epe", "d1", "bad1", "bad2", "bad4", "n_valid"]
    _write_tsv(out / "per_sample.tsv", per_sample, keys)
    write_report_json(out / "report.json", {"command": "eval", "prediction_source": source,
                                            "report": report.to_dict()})
    _print_table([_report_record(report, id="all")], keys)
    return EXIT_OK


def cmd_analyze(config: RunConfig, out: Path) -> int:
    from .plotting import ensure_dir, save_reliability_png, save_triptych

    manifest = _manifest(config)
    model = _checkpoint(config, required=True)
    train_cfg = _train_config(config)
    figures = ensure_dir(out / "figures")
    records, analyses, warnings = [], [], 0
    for s in manifest.load("eval")[: config.analyze.max_samples]:
        if not s.has_gt:
            warnings += 1
            logger.warning("sample %s has no ground truth; skipped", s.id)
            continue
        a = analyze_sample(model, s, train_cfg)
        analyses.append(a)
        records.append({"id": s.id, "rho_sigma": a.rho_sigma, "rho_delta": a.rho_delta,
                        "w_mean": float(a.w_soft.mean())})
        if config.analyze.figures:
            save_triptych(s.left, a.error, a.sigma, figures / f"{s.id}_sigma.png",
                          title=f"{s.id}: multi-resolution variance", consistency_label="sigma",
                          valid=s.validity)
            save_triptych(s.left, a.error, a.delta, figures / f"{s.id}_delta.png",
                          title=f"{s.id}: iterative delta", consistency_label="delta",
                          valid=s.validity)
            save_reliability_png(a.w_soft, figures / f"{s.id}_weight.png")
            write_pfm(a.w_soft.astype(np.float32), figures / f"{s.id}_weight.pfm")
    keys = ["id", "rho_sigma", "rho_delta", "w_mean"]
    _write_tsv(out / "correlations.tsv", records, keys)
    mean_s, mean_d = mean_correlations(analyses) if analyses else (float("nan"), float("nan"))
    write_report_json(out / "correlations.json", {"command": "analyze", "samples": records,
                                                  "mean_rho_sigma": mean_s, "mean_rho_delta": mean_d,
                                                  "warnings": warnings})
    _print_table(records, keys)
    print(f"mean\t{_cell(mean_s)}\t{_cell(mean_d)}\t-")
    print(f"warnings\t{warnings}")
    return EXIT_OK


def cmd_ablate(config: RunConfig, out: Path) -> int:
    from .plotting import plot_ablation

    cells = config.ablate.cells or DEFAULT_CELLS
    seeds = list(config.ablate.seeds)
    manifest = load_manifest(config.manifest) if config.manifest else None
    d = config.data

    def splits_for_seed(seed: int) -> Splits:
        if manifest is not None:
            return Splits(manifest.load("labeled"), manifest.load("unlabeled"),
                          [s for s in manifest.load("eval") if s.has_gt])
        return synthetic_splits(d.source.build(), d.target.build(), seed,
                                d.n_labeled, d.n_unlabeled, d.n_eval)

    logs = out / "logs"

    def metrics_log_for(cell: str, seed: int) -> MetricsLog:
        return MetricsLog(logs / f"{cell}_seed{seed}.log")

    result = run_grid(splits_for_seed, config.model, config.train, cells, seeds,
                      log=lambda m: print(f"# {m}", flush=True), metrics_log_for=metrics_log_for)
    records = result.to_records()
    _write_tsv(out / "cells.tsv", records, ["cell", "seed", "epe", "d1", "seconds", "error"])
    tables = {}
    for name, rows in TABLES.items():
        if any(c in cells for c in rows):
            tab = result.table(name)
            tables[name] = tab["rows"]
            _write_tsv(out / f"table_{name}.tsv", tab["rows"], ["name", "epe", "d1", "n", "ref_epe"])
            if any(r["n"] for r in tab["rows"]):
                plot_ablation(tab["rows"], out / f"ablation_{name}.png", title=f"{name} ablation")
    (out / "ablation.txt").write_text("\n".join(report_lines(result)) + "\n")
    write_report_json(out / "ablation.json", {"command": "ablate", "seeds": seeds, "cells": records,
                                              "tables": tables})
    print("\n".join(report_lines(result)))
    if result.all_failed():
        return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "selftrain": cmd_selftrain,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides 'seed'")
    common.add_argument("--out", help="output directory (overrides 'out')")
    common.add_argument("--checkpoint", help="model checkpoint (overrides 'checkpoint')")
    common.add_argument("--manifest", help="dataset manifest (overrides 'manifest')")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set train.steps_pretrain=10")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stereo-selftrain",
                                     description="Consistency-filtered teacher-student self-training "
                                                 "for iterative stereo matching.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write synthetic source/target splits and a manifest",
        "pretrain": "supervised pretraining on the labeled split",
        "selftrain": "teacher-student self-training on the unlabeled split",
        "eval": "evaluate a checkpoint on the eval split",
        "analyze": "consistency-vs-error heatmaps and rank correlations",
        "ablate": "run the ablation grid over seeds",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "eval":
            p.add_argument("--gt-as-pred", action="store_true",
                           help="debug: score the ground truth as the prediction")
    return parser


def run(args: argparse.Namespace) -> int:
    overrides = dict(parse_assignment(a) for a in args.set)
    for key in ("seed", "out", "checkpoint", "manifest"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    config, text = load_config(args.config, overrides)
    out = _out_dir(config)
    _echo_config(config, text, out)
    started = time.time()
    fn = COMMANDS[args.command]
    code = fn(config, out, args.gt_as_pred) if args.command == "eval" else fn(config, out)
    logger.info("%s finished in %.1fs", args.command, time.time() - started)
    return code


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, StructureMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FloatingPointError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
