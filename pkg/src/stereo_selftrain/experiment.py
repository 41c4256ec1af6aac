"""Desk-scale experiment harness: source/target splits, ablation grids, analysis.

Every cell of a grid starts from the same pretrained weights and sees the same
unlabeled batch order for a given seed, so cells are paired comparisons.
"""

from __future__ import annotations

import logging
import time
import traceback
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import StereoSample
from .data import SyntheticConfig, generate_set
from .filters import csf_weights
from .metrics import EvalReport, ablation_report, consistency_error_correlation
from .model import IterativeStereoNet, ModelConfig
from .training import (MetricsLog, SelfTrainConfig, evaluate_model, pretrain, run_selftraining,
                       teacher_predict)

logger = logging.getLogger(__name__)

BASELINE = "baseline"

# Overrides of the self-training config per ablation cell; the baseline cell
# evaluates the pretrained model without self-training.
CELLS: dict[str, Optional[dict]] = {
    BASELINE: None,
    "st": {"csf": {"mode": "none"}},
    "st_hard": {"csf": {"mode": "hard"}},
    "full": {},
    "mrpcf": {"csf": {"enable_ipcf": False}},
    "ipcf": {"csf": {"enable_mrpcf": False}},
    "ema_1": {"ema_interval": 1},
    "ema_10": {"ema_interval": 10},
    "ema_100": {"ema_interval": 100},
    "ema_1000": {"ema_interval": 1000},
    "ema_inf": {"ema_interval": None},
}

# Row groups of the three ablation tables; "full" stands in for the
# both-filters and interval-100 rows, which are the same configuration.
TABLES = {
    "filter": [BASELINE, "st", "st_hard", "full"],
    "components": ["mrpcf", "ipcf", "full"],
    "ema": ["ema_1", "ema_10", "full", "ema_1000", "ema_inf"],
}

# mapping of table rows to the keys of REFERENCE_TABLES
REFERENCE_KEYS = {
    "filter": {BASELINE: "baseline", "st": "st", "st_hard": "st_hard", "full": "full"},
    "components": {"mrpcf": "mrpcf", "ipcf": "ipcf", "full": "both"},
    "ema": {"ema_1": 1, "ema_10": 10, "full": 100, "ema_1000": 1000, "ema_inf": None},
}

DEFAULT_CELLS = [BASELINE, "st", "st_hard", "full", "mrpcf", "ipcf", "ema_1", "ema_inf"]


@dataclass
class Splits:
    labeled: list
    unlabeled: list
    eval: list


def synthetic_splits(source: SyntheticConfig, target: SyntheticConfig, seed: int,
                     n_labeled: int, n_unlabeled: int, n_eval: int) -> Splits:
    """Labeled source pairs, unlabeled target pairs (gt stripped), held-out target pairs."""
    base = 1000 * (seed + 1)
    labeled = generate_set(source, n_labeled, base + 1, "src")
    unlabeled = [StereoSample(s.left, s.right, id=s.id)
                 for s in generate_set(target, n_unlabeled, base + 2, "tgt")]
    held_out = generate_set(target, n_eval, base + 3, "eval")
    return Splits(labeled, unlabeled, held_out)


def cell_config(base: SelfTrainConfig, name: str, seed: int) -> Optional[SelfTrainConfig]:
    from .config import train_config_with

    if name not in CELLS:
        raise KeyError(f"unknown ablation cell {name!r}; known: {sorted(CELLS)}")
    overrides = CELLS[name]
    if overrides is None:
        return None
    return train_config_with(base, overrides, seed)


@dataclass
class GridResult:
    cells: list
    seeds: list
    reports: dict = field(default_factory=dict)    # (cell, seed) -> EvalReport
    errors: dict = field(default_factory=dict)     # (cell, seed) -> message
    timings: dict = field(default_factory=dict)    # (cell, seed) -> seconds

    def epe(self, cell: str) -> list:
        return [self.reports[(cell, s)].epe for s in self.seeds if (cell, s) in self.reports]

    def median_epe(self, cell: str) -> float:
        vals = self.epe(cell)
        return float(np.median(vals)) if vals else float("nan")

    def table(self, name: str, reference: Optional[dict] = None) -> dict:
        from .metrics import REFERENCE_TABLES

        rows = [c for c in TABLES[name] if c in self.cells]
        runs = [(c, [self.reports[(c, s)] for s in self.seeds if (c, s) in self.reports]) for c in rows]
        if reference is None:
            ref = REFERENCE_TABLES[name]
            reference = {c: ref.get(REFERENCE_KEYS[name][c]) for c in rows}
        return ablation_report(runs, title=f"{name} ablation (median over seeds {self.seeds})",
                               reference=reference)

    def all_failed(self) -> bool:
        return not self.reports and bool(self.errors)

    def to_records(self) -> list[dict]:
        out = []
        for cell in self.cells:
            for seed in self.seeds:
                rec = {"cell": cell, "seed": seed, "seconds": self.timings.get((cell, seed))}
                if (cell, seed) in self.reports:
                    rec.update(self.reports[(cell, seed)].to_dict())
                else:
                    rec["error"] = self.errors.get((cell, seed), "not run")
                out.append(rec)
        return out


def run_grid(splits_for_seed: Callable[[int], Splits], model_config: ModelConfig,
             train_config: SelfTrainConfig, cells: Sequence[str], seeds: Sequence[int],
             log: Optional[Callable[[str], None]] = None,
             pretrained_for_seed: Optional[Callable[[int, Splits], IterativeStereoNet]] = None,
             metrics_log_for: Optional[Callable[[str, int], MetricsLog]] = None) -> GridResult:
    """Pretrain once per seed, then self-train every non-baseline cell from those weights.

    A failing cell is recorded and the grid continues.
    """
    say = log or logger.info
    for c in cells:
        if c not in CELLS:
            raise KeyError(f"unknown ablation cell {c!r}; known: {sorted(CELLS)}")
    result = GridResult(list(cells), list(seeds))
    for seed in seeds:
        t0 = time.time()
        splits = splits_for_seed(seed)
        try:
            if pretrained_for_seed is not None:
                pre = pretrained_for_seed(seed, splits)
            else:
                cfg = SelfTrainConfig(**{**train_config.__dict__, "seed": seed})
                pre = pretrain(splits.labeled, model_config, cfg,
                               metrics_log_for("pretrain", seed) if metrics_log_for else None)
        except Exception as exc:  # every cell of this seed depends on the pretrain
            msg = f"pretrain failed: {exc}"
            say(f"seed {seed}: {msg}")
            for c in cells:
                result.errors[(c, seed)] = msg
            continue
        say(f"seed {seed}: pretrain done in {time.time() - t0:.0f}s")
        for cell in cells:
            t = time.time()
            try:
                cfg = cell_config(train_config, cell, seed)
                if cfg is None:
                    model = pre
                else:
                    mlog = metrics_log_for(cell, seed) if metrics_log_for else None
                    model = run_selftraining(splits.unlabeled, pre, cfg, mlog)
                report = evaluate_model(model, splits.eval)
                result.reports[(cell, seed)] = report
                say(f"seed {seed} {cell:<10} EPE {report.epe:.4f}  D1 {report.d1:.2f}  "
                    f"({time.time() - t:.0f}s)")
            except Exception as exc:
                result.errors[(cell, seed)] = f"{type(exc).__name__}: {exc}"
                say(f"seed {seed} {cell}: FAILED {exc}")
                logger.debug(traceback.format_exc())
            result.timings[(cell, seed)] = time.time() - t
    return result


@dataclass
class SampleAnalysis:
    id: str
    rho_sigma: float
    rho_delta: float
    error: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray
    w_soft: np.ndarray
    valid: np.ndarray


def analyze_sample(model: IterativeStereoNet, sample: StereoSample, config: SelfTrainConfig) -> SampleAnalysis:
    """Teacher-side consistency maps of ``model`` on one labeled sample, and their
    rank correlation with the absolute error of the original-scale prediction."""
    if not sample.has_gt:
        raise ValueError(f"sample {sample.id!r} has no ground truth")
    ms, trace = teacher_predict(model, sample, config)
    maps = csf_weights(ms.p_high.values, ms.p_orig.values, ms.p_low.values, trace.stack(), config.csf)
    error = np.abs(ms.p_orig.values - sample.gt_disparity.values)
    sigma, delta = maps["sigma"].numpy(), maps["delta"].numpy()

    def rho(stat):
        try:
            return consistency_error_correlation(stat, error, sample.validity)
        except ValueError:
            return float("nan")

    return SampleAnalysis(sample.id, rho(sigma), rho(delta), error, sigma, delta,
                          maps["w_soft"].numpy(), sample.validity)


def mean_correlations(analyses: Sequence[SampleAnalysis]) -> tuple[float, float]:
    rs = [a.rho_sigma for a in analyses if np.isfinite(a.rho_sigma)]
    rd = [a.rho_delta for a in analyses if np.isfinite(a.rho_delta)]
    return (float(np.mean(rs)) if rs else float("nan"), float(np.mean(rd)) if rd else float("nan"))


def report_lines(result: GridResult) -> list[str]:
    lines = []
    for name, rows in TABLES.items():
        if any(c in result.cells for c in rows):
            lines.append(result.table(name)["text"])
            lines.append("")
    if result.errors:
        lines.append("failed cells:")
        lines += [f"  {c} seed {s}: {m}" for (c, s), m in sorted(result.errors.items(), key=str)]
    return lines


__all__ = ["CELLS", "TABLES", "DEFAULT_CELLS", "BASELINE", "Splits", "synthetic_splits", "cell_config",
           "GridResult", "run_grid", "SampleAnalysis", "analyze_sample", "mean_correlations",
           "report_lines", "EvalReport"]
