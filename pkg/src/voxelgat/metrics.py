"""Voxel-level Dice and HD95 over the WT / TC / ET tumor regions."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .volume import N_CLASSES, LabelVolume

REGIONS = {
    "WT": (1, 2, 3),
    "TC": (1, 3),
    "ET": (3,),
}


def _check(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def confusion(pred, gt) -> tuple[int, int, int]:
    pred, gt = _check(pred, gt)
    return int(np.sum(pred & gt)), int(np.sum(pred & ~gt)), int(np.sum(~pred & gt))


def dice_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def dice(pred, gt) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    return dice_from_counts(*confusion(pred, gt))


def directed_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distance in mm from every voxel of ``a`` to the nearest voxel of ``b``."""
    dist = ndi.distance_transform_edt(~b, sampling=spacing)
    return dist[a]


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """95th percentile of the pooled pred->gt and gt->pred voxel distances.

    Returns 0 when both masks are empty and NaN (undefined) when exactly
    one is.
    """
    pred, gt = _check(pred, gt)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if not has_p or not has_g:
        return math.nan
    spacing = tuple(float(s) for s in spacing)
    d = np.concatenate([directed_distances(pred, gt, spacing),
                        directed_distances(gt, pred, spacing)])
    return float(np.percentile(d, 95))


@dataclass
class RegionScore:
    dice: float
    hd95: float | None
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    case: str
    regions: dict[str, RegionScore]
    voxel_counts_pred: list[int] = field(default_factory=list)
    voxel_counts_gt: list[int] = field(default_factory=list)
    node_counts_pred: list[int] | None = None
    node_counts_gt: list[int] | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        regions = {k: RegionScore(**v) for k, v in d["regions"].items()}
        return cls(d["case"], regions, d.get("voxel_counts_pred", []), d.get("voxel_counts_gt", []),
                   d.get("node_counts_pred"), d.get("node_counts_gt"))

    def csv_row(self) -> list:
        row = [self.case]
        for name in REGIONS:
            r = self.regions[name]
            row += [r.dice, "" if r.hd95 is None else r.hd95]
        return row


CSV_HEADER = ["case"] + [f"{m}_{r}" for r in REGIONS for m in ("dice", "hd95")]


def evaluate(pred: LabelVolume, gt: LabelVolume, spacing=None, case: str = "",
             node_pred=None, node_gt=None) -> EvalReport:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    spacing = gt.spacing if spacing is None else spacing
    regions = {}
    for name, members in REGIONS.items():
        p = np.isin(pred.labels, members)
        g = np.isin(gt.labels, members)
        tp, fp, fn = confusion(p, g)
        h = hd95(p, g, spacing)
        regions[name] = RegionScore(dice_from_counts(tp, fp, fn),
                                    None if math.isnan(h) else h, tp, fp, fn)
    counts = lambda a: np.bincount(np.asarray(a, dtype=np.int64).ravel(),
                                   minlength=N_CLASSES).tolist()
    return EvalReport(case, regions, counts(pred.labels), counts(gt.labels),
                      None if node_pred is None else counts(node_pred),
                      None if node_gt is None else counts(node_gt))


def write_reports_csv(path, reports: list[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def aggregate(reports: list[EvalReport]) -> dict:
    """Mean and median Dice / HD95 per region; undefined HD95 values are skipped."""
    out = {}
    for name in REGIONS:
        d = np.array([r.regions[name].dice for r in reports])
        h = np.array([r.regions[name].hd95 for r in reports if r.regions[name].hd95 is not None])
        out[name] = {
            "dice_mean": float(d.mean()) if d.size else None,
            "dice_median": float(np.median(d)) if d.size else None,
            "hd95_mean": float(h.mean()) if h.size else None,
            "hd95_median": float(np.median(h)) if h.size else None,
            "n_cases": int(d.size),
            "n_hd95_undefined": int(d.size - h.size),
        }
    return out


def format_table(agg: dict) -> str:
    lines = ["region  dice_mean  dice_median  hd95_mean  hd95_median"]
    fmt = lambda x: "   n/a" if x is None else f"{x:8.4f}"
    for name, s in agg.items():
        lines.append(f"{name:6s}  {fmt(s['dice_mean'])}  {fmt(s['dice_median'])}     "
                     f"{fmt(s['hd95_mean'])}  {fmt(s['hd95_median'])}")
    return "\n".join(lines)
