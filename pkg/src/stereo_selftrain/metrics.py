"""Disparity error metrics, consistency-vs-error correlation, ablation tables.

Conventions (the benchmarks differ, so they are pinned here):

* EPE / Avgerr: mean absolute disparity error over valid pixels.
* bad-t: percentage of valid pixels with error strictly greater than t.
* D1: percentage of valid pixels whose error exceeds both 3 px and 5% of
  the ground-truth disparity (KITTI outlier rule, strict inequalities).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from statistics import median
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

BAD_THRESHOLDS = (1.0, 2.0, 4.0)

# Full-scale reference EPE values, shown as context next to desk-scale ablations.
# Keys of "ema" are EMA intervals; None means the teacher is never updated.
REFERENCE_TABLES = {
    "filter": {"baseline": 5.28, "st": 6.15, "st_hard": 2.85, "full": 1.32},
    "components": {"mrpcf": 1.58, "ipcf": 1.70, "both": 1.32},
    "ema": {1: 4.15, 10: 1.51, 100: 1.32, 1000: 2.88, None: 3.46},
}


def _prepare(pred, gt, valid):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
    if valid is None:
        valid = np.ones(gt.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != gt.shape:
        raise ValueError("valid mask shape mismatch")
    if not valid.any():
        raise ValueError("no valid pixels")
    return pred[valid], gt[valid]


def epe(pred, gt, valid=None) -> float:
    p, g = _prepare(pred, gt, valid)
    return float(np.abs(p - g).mean())


def bad_n(pred, gt, valid=None, t: float = 1.0) -> float:
    if not t > 0:
        raise ValueError("threshold must be positive")
    p, g = _prepare(pred, gt, valid)
    return float(100.0 * (np.abs(p - g) > t).mean())


def d1(pred, gt, valid=None) -> float:
    p, g = _prepare(pred, gt, valid)
    err = np.abs(p - g)
    outlier = (err > 3.0) & (err > 0.05 * np.abs(g))
    return float(100.0 * outlier.mean())


@dataclass
class EvalReport:
    epe: float
    d1: float
    bad: dict
    avgerr: float
    n_valid: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bad"] = {str(k): v for k, v in self.bad.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(epe=float(d["epe"]), d1=float(d["d1"]),
                   bad={float(k): float(v) for k, v in d["bad"].items()},
                   avgerr=float(d["avgerr"]), n_valid=int(d["n_valid"]))


def evaluate(pred, gt, valid=None) -> EvalReport:
    p, g = _prepare(pred, gt, valid)
    err = np.abs(p - g)
    return EvalReport(
        epe=float(err.mean()),
        d1=float(100.0 * ((err > 3.0) & (err > 0.05 * np.abs(g))).mean()),
        bad={t: float(100.0 * (err > t).mean()) for t in BAD_THRESHOLDS},
        avgerr=float(err.mean()),
        n_valid=int(err.size),
    )


def evaluate_many(preds: Iterable, gts: Iterable, valids: Iterable) -> EvalReport:
    """Pool all valid pixels of several images into one report."""
    ps, gs = [], []
    for p, g, v in zip(preds, gts, valids):
        a, b = _prepare(p, g, v)
        ps.append(a)
        gs.append(b)
    if not ps:
        raise ValueError("no samples to evaluate")
    return evaluate(np.concatenate(ps), np.concatenate(gs))


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties."""
    ra, rb = rankdata(a), rankdata(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float((ra * ra).sum() * (rb * rb).sum()))
    if denom == 0:
        raise ValueError("correlation undefined for constant input")
    return float((ra * rb).sum() / denom)


def consistency_error_correlation(consistency_map, error_map, valid=None) -> float:
    """Spearman rho between an inconsistency statistic and |error| over valid pixels."""
    c = np.asarray(consistency_map, dtype=np.float64)
    e = np.asarray(error_map, dtype=np.float64)
    if c.shape != e.shape:
        raise ValueError(f"consistency {c.shape} and error {e.shape} differ")
    if valid is None:
        valid = np.ones(c.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    c, e = c[valid], e[valid]
    if c.size < 2:
        raise ValueError("need at least 2 valid pixels")
    return spearman(c, e)


# --------------------------------------------------------------------------
# ablation tables
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.3f}"


def ablation_report(runs: Sequence, title: str = "", reference: Optional[dict] = None) -> dict:
    """Table of EPE/D1 per configuration.

    ``runs`` holds (name, EvalReport) or (name, [EvalReport, ...]) pairs; a list
    is summarised by per-metric medians. ``reference`` maps row names to a
    context EPE printed in an extra column. Returns ``{"text": str, "rows": [...]}``.
    """
    if not runs:
        raise ValueError("ablation report needs at least one run")
    rows = []
    for name, result in runs:
        reports = result if isinstance(result, (list, tuple)) else [result]
        reports = [r for r in reports if r is not None]
        if reports:
            row = {
                "name": name,
                "epe": median(r.epe for r in reports),
                "d1": median(r.d1 for r in reports),
                "n": len(reports),
                "epe_all": [r.epe for r in reports],
            }
        else:
            row = {"name": name, "epe": float("nan"), "d1": float("nan"), "n": 0, "epe_all": []}
        if reference is not None:
            row["ref_epe"] = reference.get(name)
        rows.append(row)
    width = max(len("config"), *(len(r["name"]) for r in rows))
    lines = []
    if title:
        lines.append(title)
    ref = "  ref EPE" if reference is not None else ""
    lines.append(f"{'config':<{width}}  {'EPE':>8}  {'D1':>8}  {'n':>3}{ref}")
    lines.append("-" * (width + 25 + len(ref)))
    for r in rows:
        line = f"{r['name']:<{width}}  {_fmt(r['epe']):>8}  {_fmt(r['d1']):>8}  {r['n']:>3}"
        if reference is not None:
            line += f"  {_fmt(r['ref_epe']):>7}"
        lines.append(line)
    return {"text": "\n".join(lines), "rows": rows}


def write_report_json(path, record: dict):
    with open(path, "w") as f:
        json.dump(record, f, indent=2, default=float)


def read_eval_report(path) -> EvalReport:
    with open(path) as f:
        d = json.load(f)
    return EvalReport.from_dict(d.get("report", d))
