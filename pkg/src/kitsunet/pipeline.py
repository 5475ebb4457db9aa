"""Dataset-level steps wired from the per-case modules.

Directory layout produced by the steps:

    <out>/data/<case>/imaging.*, segmentation.*         raw phantom cases
    <out>/preprocessed/stats.json                       DatasetStats
    <out>/preprocessed/<case>/imaging.*, segmentation.*, geometry.json
    <out>/train/metrics.csv, epoch_XXXX.pt, last.pt, best.pt
    <out>/predictions/<case>/segmentation.*             native geometry, before cleanup
    <out>/postprocessed/<case>/segmentation.*
    <out>/report/results.csv, summary.csv, dice_boxplot.png, loss_curve.png
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import evalreport, phantom, plotting
from .config import RunConfig
from .inference import CaseGeometry, finalize, pad_for_window, predict_volume
from .postprocess import apply_rules
from .preprocess import DatasetStats, compute_dataset_stats, preprocess_case
from .trainer import load_checkpoint, read_metrics, train
from .volcore import (LabelVolume, PathLike, ProbabilityVolume, list_cases, load_case_dir,
                      load_label_dir, save_case_dir, save_nifti, save_raw)

log = logging.getLogger(__name__)

STATS_FILE = "stats.json"
GEOMETRY_FILE = "geometry.json"


class MissingCasesError(ValueError):
    def __init__(self, missing_pred: Sequence[str], missing_gt: Sequence[str]):
        self.missing_pred, self.missing_gt = list(missing_pred), list(missing_gt)
        parts = []
        if self.missing_pred:
            parts.append("no prediction for: " + ", ".join(self.missing_pred))
        if self.missing_gt:
            parts.append("no ground truth for: " + ", ".join(self.missing_gt))
        super().__init__("case sets differ; " + "; ".join(parts))


def split_cases(case_ids: Sequence[str], val_cases: int = 1,
                test_fraction: float = 0.25) -> Tuple[List[str], List[str], List[str]]:
    """Deterministic split in listing order: tail is test, the val block precedes it."""
    ids = list(case_ids)
    n_test = min(max(1, math.ceil(len(ids) * test_fraction)), max(len(ids) - 1, 0))
    test = ids[len(ids) - n_test:] if n_test else []
    rest = ids[:len(ids) - n_test]
    n_val = min(val_cases, max(len(rest) - 1, 1))
    val = rest[len(rest) - n_val:]
    train_ids = rest[:len(rest) - n_val] or list(val)
    return train_ids, val, test


def preprocess_dataset(data_dir: PathLike, out_dir: PathLike,
                       case_ids: Optional[Sequence[str]] = None,
                       stats: Optional[DatasetStats] = None,
                       percentiles: Tuple[float, float] = (0.5, 99.5)) -> DatasetStats:
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    ids = list(case_ids) if case_ids is not None else list_cases(data_dir)
    if not ids:
        raise FileNotFoundError(f"no cases in {data_dir}")
    if stats is None:
        stats = compute_dataset_stats((load_case_dir(data_dir / c) for c in ids), *percentiles)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats.save(out_dir / STATS_FILE)
    for c in ids:
        vol, lab = load_case_dir(data_dir / c)
        pvol, plab = preprocess_case(vol, stats, lab)
        save_case_dir(out_dir / c, pvol, plab)
        geom = {"original_shape": list(vol.shape),
                "original_spacing": list(vol.spacing.as_tuple())}
        (out_dir / c / GEOMETRY_FILE).write_text(json.dumps(geom))
    return stats


def load_training_arrays(pre_dir: PathLike, ids: Sequence[str]):
    out = []
    for c in ids:
        vol, lab = load_case_dir(Path(pre_dir) / c)
        if lab is None:
            raise FileNotFoundError(f"case {c} has no segmentation")
        out.append((vol.data, lab.data))
    return out


def train_from_dir(cfg: RunConfig, pre_dir: PathLike, out_dir: PathLike,
                   train_ids: Optional[Sequence[str]] = None,
                   val_ids: Optional[Sequence[str]] = None,
                   resume: Optional[PathLike] = None, max_iterations: Optional[int] = None):
    pre_dir = Path(pre_dir)
    ids = list_cases(pre_dir)
    if train_ids is None:
        train_ids, val_ids, _ = split_cases(ids, cfg.split.val_cases, 1e-9)
        if not train_ids:
            train_ids = list(val_ids)
    stats = DatasetStats.load(pre_dir / STATS_FILE).to_dict()
    extra = {"stats": stats, "train_ids": list(train_ids), "val_ids": list(val_ids),
             "inference": {"window": list(cfg.window), "overlap": cfg.inference.overlap,
                           "mirror_axes": list(cfg.inference.mirror_axes)}}
    network = None
    if resume is not None:
        network, _ = load_checkpoint(resume, cfg.trainer.device)
    return train(cfg.trainer, load_training_arrays(pre_dir, train_ids),
                 load_training_arrays(pre_dir, val_ids), network, out_dir,
                 spec=cfg.network, augment=cfg.augment, loss_config=cfg.loss,
                 resume=resume, extra=extra, max_iterations=max_iterations)


def predict_case(network, vol, stats: DatasetStats, window, overlap=0.5,
                 mirror_axes=(0, 1, 2), device="cpu") -> Tuple[LabelVolume, ProbabilityVolume]:
    """Raw image in, label volume on the image's own grid out."""
    pvol, _ = preprocess_case(vol, stats)
    padded, crop = pad_for_window(pvol, window)
    prob = predict_volume(network, padded, window, overlap, mirror_axes, device)
    geom = CaseGeometry(crop, vol.shape, vol.spacing)
    return finalize(prob, geom), prob


def predict_dir(checkpoint: PathLike, data_dir: PathLike, out_dir: PathLike,
                case_ids: Optional[Sequence[str]] = None, cfg: Optional[RunConfig] = None,
                stats: Optional[DatasetStats] = None) -> List[str]:
    device = cfg.trainer.device if cfg else "cpu"
    network, payload = load_checkpoint(checkpoint, device)
    extra = payload.get("extra", {})
    if stats is None:
        if "stats" not in extra:
            raise ValueError(f"{checkpoint} carries no dataset stats; pass them explicitly")
        stats = DatasetStats.from_dict(extra["stats"])
    if cfg is not None:
        window, overlap, mirrors = cfg.window, cfg.inference.overlap, cfg.inference.mirror_axes
    else:
        inf = extra.get("inference", {})
        window = tuple(inf.get("window") or payload["train_config"]["patch_size"])
        overlap, mirrors = inf.get("overlap", 0.5), tuple(inf.get("mirror_axes", (0, 1, 2)))
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    ids = list(case_ids) if case_ids is not None else list_cases(data_dir)
    for c in ids:
        vol, _ = load_case_dir(data_dir / c, with_label=False)
        seg, prob = predict_case(network, vol, stats, window, overlap, mirrors, device)
        save_case_dir(out_dir / c, label=seg)
        if cfg is not None and cfg.inference.write_nifti:
            save_nifti(out_dir / c / "segmentation.nii.gz", seg.data, seg.spacing.as_tuple())
        if cfg is not None and cfg.inference.save_probabilities:
            save_raw(out_dir / c / "probabilities", prob.data, prob.spacing.as_tuple())
        log.info("predicted %s", c)
    return ids


def postprocess_dir(in_dir: PathLike, out_dir: PathLike, enabled: bool = True,
                    connectivity: int = 26) -> List[str]:
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    ids = sorted(p.name for p in in_dir.iterdir() if p.is_dir())
    for c in ids:
        seg = load_label_dir(in_dir / c)
        if enabled:
            seg = apply_rules(seg, connectivity)
        save_case_dir(out_dir / c, label=seg)
    return ids


def _label_ids(d: Path) -> List[str]:
    return sorted(p.name for p in d.iterdir()
                  if p.is_dir() and any(p.glob("segmentation.*")))


def evaluate_dirs(pred_dir: PathLike, gt_dir: PathLike, out_dir: PathLike,
                  metrics_csv: Optional[PathLike] = None,
                  image_dir: Optional[PathLike] = None) -> Dict[str, Path]:
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_ids = _label_ids(pred_dir)
    gt_ids = _label_ids(gt_dir)
    if set(pred_ids) != set(gt_ids):
        raise MissingCasesError(sorted(set(gt_ids) - set(pred_ids)),
                                sorted(set(pred_ids) - set(gt_ids)))
    results = []
    out_dir = Path(out_dir)
    for c in pred_ids:
        pred, gt = load_label_dir(pred_dir / c), load_label_dir(gt_dir / c)
        results.append(evalreport.dice_per_case(pred, gt, c))
        if image_dir is not None:
            vol, _ = load_case_dir(Path(image_dir) / c, with_label=False)
            plotting.slice_overlay(vol.data, gt.data, pred.data,
                                   out_dir / "overlays" / f"{c}.png", title=c)
    history = None
    if metrics_csv is not None and Path(metrics_csv).exists():
        history = read_metrics(metrics_csv)
    summary = evalreport.aggregate(results)
    return evalreport.render_reports(summary, results, history, out_dir)


def run_pipeline(cfg: RunConfig, out_dir: PathLike, max_iterations: Optional[int] = None):
    """Phantoms -> preprocess -> train -> predict -> postprocess -> evaluate."""
    out = Path(out_dir)
    data = Path(cfg.paths.data) if cfg.paths.data else out / "data"
    if not cfg.paths.data:
        base = phantom.default_spec()
        base.noise_sigma = cfg.phantom.noise_sigma
        phantom.make_dataset(data, cfg.phantom.n_cases, cfg.seeds.seed, base,
                             cfg.phantom.jitter_spacing)
    train_ids, val_ids, test_ids = split_cases(list_cases(data), cfg.split.val_cases,
                                               cfg.split.test_fraction)
    log.info("split: train %s val %s test %s", train_ids, val_ids, test_ids)
    fit_ids = sorted(set(train_ids) | set(val_ids))
    preprocess_dataset(data, out / "preprocessed", fit_ids,
                       percentiles=(cfg.preprocess.lo_percentile, cfg.preprocess.hi_percentile))
    train_from_dir(cfg, out / "preprocessed", out / "train", train_ids, val_ids,
                   max_iterations=max_iterations)
    ckpt = out / "train" / cfg.inference.checkpoint
    predict_dir(ckpt, data, out / "predictions", test_ids, cfg)
    postprocess_dir(out / "predictions", out / "postprocessed", cfg.postprocess.enabled,
                    cfg.postprocess.connectivity)
    gt = out / "ground_truth"
    for c in test_ids:
        save_case_dir(gt / c, label=load_label_dir(data / c))
    return evaluate_dirs(out / "postprocessed", gt, out / "report",
                         out / "train" / "metrics.csv", image_dir=data)


def mean_dice(results_csv: PathLike) -> Dict[str, float]:
    rows = evalreport.read_results_csv(results_csv)
    return {m: float(np.mean([getattr(r, m) for r in rows])) for m in evalreport.METRICS}
