"""Per-case Dice, summary statistics and report files."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .volcore import LabelVolume, PathLike

log = logging.getLogger(__name__)

METRICS = ("dice_kidney_composite", "dice_kidney_label", "dice_tumor")
SUMMARY_STATS = ("mean", "median", "std", "min", "q1", "q3", "max")


@dataclass
class CaseResult:
    case_id: str
    dice_kidney_label: float
    dice_kidney_composite: float
    dice_tumor: float
    pred_bg: int
    pred_kidney: int
    pred_tumor: int
    gt_bg: int
    gt_kidney: int
    gt_tumor: int


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Hard Dice of two boolean masks; two empty masks agree perfectly."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def dice_per_case(pred: LabelVolume, gt: LabelVolume, case_id: str = "") -> CaseResult:
    p, g = np.asarray(pred.data), np.asarray(gt.data)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    pc = np.bincount(p.ravel(), minlength=3)
    gc = np.bincount(g.ravel(), minlength=3)
    return CaseResult(
        case_id=case_id,
        dice_kidney_label=dice(p == 1, g == 1),
        dice_kidney_composite=dice(p > 0, g > 0),
        dice_tumor=dice(p == 2, g == 2),
        pred_bg=int(pc[0]), pred_kidney=int(pc[1]), pred_tumor=int(pc[2]),
        gt_bg=int(gc[0]), gt_kidney=int(gc[1]), gt_tumor=int(gc[2]),
    )


def aggregate(results: Sequence[CaseResult]) -> Dict[str, Dict[str, float]]:
    if not results:
        raise ValueError("need at least one case result")
    summary = {}
    for m in METRICS:
        v = np.array([getattr(r, m) for r in results], dtype=np.float64)
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        summary[m] = {"mean": float(v.mean()), "median": float(med), "std": float(v.std()),
                      "min": float(v.min()), "q1": float(q1), "q3": float(q3),
                      "max": float(v.max()), "n": len(v)}
    return summary


# ---------------------------------------------------------------- CSV

def write_results_csv(path: PathLike, results: Sequence[CaseResult]) -> None:
    names = [f.name for f in fields(CaseResult)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for r in results:
            writer.writerow({k: repr(v) if isinstance(v, float) else v
                             for k, v in asdict(r).items()})


def read_results_csv(path: PathLike) -> List[CaseResult]:
    types = {f.name: f.type for f in fields(CaseResult)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            conv = {}
            for k, v in row.items():
                t = types[k]
                conv[k] = float(v) if t in (float, "float") else int(v) if t in (int, "int") else v
            out.append(CaseResult(**conv))
    return out


def write_summary_csv(path: PathLike, summary: Dict[str, Dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("metric",) + SUMMARY_STATS + ("n",))
        for m, stats in summary.items():
            writer.writerow([m] + [repr(stats[s]) for s in SUMMARY_STATS] + [stats["n"]])


def render_reports(summary, results: Sequence[CaseResult], history: Optional[Sequence[dict]],
                   out_dir: PathLike) -> Dict[str, Path]:
    """Write results/summary CSVs, the Dice boxplot and (if a log exists) the loss curve."""
    from . import plotting

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"results": out / "results.csv", "summary": out / "summary.csv",
             "boxplot": out / "dice_boxplot.png"}
    write_results_csv(files["results"], results)
    write_summary_csv(files["summary"], summary)
    plotting.dice_boxplot(summary, files["boxplot"])
    if history:
        files["loss_curve"] = out / "loss_curve.png"
        plotting.loss_curve(history, files["loss_curve"])
    else:
        log.warning("no training log given; skipping loss curve")
    return files
