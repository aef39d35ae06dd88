"""Segmentation metrics: per-class IoU, mIoU, and the robustness ratio.

mIoU is computed from one confusion matrix accumulated over a whole subset
(dataset-level convention). The robustness ratio divides the mean mIoU over
edited subsets by a baseline subset's mIoU: the reconstruction set for
appearance edits, the untouched originals for geometry edits. Rounding
happens only at presentation time (two decimals).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import scenes

APPEARANCE_SUBSETS = ("color", "material", "weather", "style")
BASELINE_SUBSETS = ("recon", "original")


class MetricsError(ValueError):
    pass


def confusion_matrix(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    eval_mask: np.ndarray | None = None,
    ignore_index: int = scenes.IGNORE_INDEX,
) -> np.ndarray:
    """num_classes × num_classes counts over evaluated pixels (gt rows)."""
    if pred.shape != gt.shape:
        raise MetricsError("pred/gt shape mismatch")
    counted = gt != ignore_index
    if eval_mask is not None:
        if eval_mask.shape != gt.shape:
            raise MetricsError("eval mask shape mismatch")
        counted &= eval_mask.astype(bool)
    g = gt[counted].astype(np.int64)
    p = pred[counted].astype(np.int64)
    if g.size and (g.max() >= num_classes or p.max() >= num_classes or g.min() < 0 or p.min() < 0):
        raise MetricsError("class index outside [0, num_classes)")
    flat = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def miou_from_confusion(conf: np.ndarray) -> tuple[dict[int, float], float]:
    """Per-class IoU (percent) for classes present in gt, and their mean."""
    gt_totals = conf.sum(axis=1)
    present = np.nonzero(gt_totals > 0)[0]
    if present.size == 0:
        raise MetricsError("no evaluated pixels")
    per_class = {}
    for g in present:
        tp = conf[g, g]
        fp = conf[:, g].sum() - tp
        fn = gt_totals[g] - tp
        per_class[int(g)] = 100.0 * tp / (tp + fp + fn)
    mean = float(np.mean(list(per_class.values())))
    return per_class, mean


def miou(
    pred: scenes.SegLabel,
    gt: scenes.SegLabel,
    num_classes: int | None = None,
    eval_mask: scenes.BinaryMask | None = None,
) -> tuple[dict[int, float], float]:
    """Per-class IoU and mean over the classes present in gt.

    ``eval_mask`` restricts counted pixels (object-only geometry scoring);
    gt ignore_index pixels are always excluded.
    """
    k = num_classes or gt.num_classes
    conf = confusion_matrix(
        pred.classes, gt.classes, k,
        eval_mask=None if eval_mask is None else eval_mask.bits,
        ignore_index=gt.ignore_index,
    )
    return miou_from_confusion(conf)


def mr_from_subsets(subset_mious: dict[str, float], baseline_miou: float) -> tuple[float, float]:
    """(RmIoU, mR): mean of the edited-subset mIoUs and its ratio to baseline."""
    if not subset_mious:
        raise MetricsError("no edited subsets")
    if baseline_miou <= 0:
        raise MetricsError("baseline mIoU must be positive")
    rmiou = float(np.mean(list(subset_mious.values())))
    return rmiou, rmiou / baseline_miou


@dataclass
class RobustnessReport:
    """Per-subset mIoU plus the aggregate robustness ratio for one family."""

    model: str
    benchmark: str
    family: str  # "appearance" | "geometry"
    baseline_name: str  # "recon" | "original"
    baseline_miou: float
    subsets: dict[str, dict]  # name -> {"miou": float, "per_class": {id: float}}
    rmiou: float
    mr: float
    eval_region: str  # "full" | "object-only"
    config_hash: str = ""

    def __post_init__(self):
        expected_rmiou, expected_mr = mr_from_subsets(
            {name: s["miou"] for name, s in self.subsets.items()}, self.baseline_miou
        )
        if self.rmiou != expected_rmiou or self.mr != expected_mr:
            raise MetricsError("stored aggregates disagree with the subset table")

    @classmethod
    def from_subset_mious(
        cls,
        model: str,
        benchmark: str,
        family: str,
        baseline_name: str,
        baseline_miou: float,
        subsets: dict[str, float] | dict[str, dict],
        eval_region: str,
        config_hash: str = "",
        per_class: dict[str, dict] | None = None,
    ) -> "RobustnessReport":
        table = {}
        for name, value in subsets.items():
            if isinstance(value, dict):
                table[name] = value
            else:
                table[name] = {"miou": float(value), "per_class": (per_class or {}).get(name, {})}
        rmiou, mr = mr_from_subsets({n: s["miou"] for n, s in table.items()}, baseline_miou)
        return cls(
            model=model,
            benchmark=benchmark,
            family=family,
            baseline_name=baseline_name,
            baseline_miou=float(baseline_miou),
            subsets=table,
            rmiou=rmiou,
            mr=mr,
            eval_region=eval_region,
            config_hash=config_hash,
        )

    @property
    def mr_presented(self) -> float:
        return round(self.mr, 2)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "benchmark": self.benchmark,
            "family": self.family,
            "baseline": {"name": self.baseline_name, "miou": self.baseline_miou},
            "subsets": self.subsets,
            "rmiou": self.rmiou,
            "mr": self.mr,
            "eval_region": self.eval_region,
            "config_hash": self.config_hash,
        }


def split_plan_families(subset_names) -> dict[str, list[str]]:
    """Group edited subset names into the appearance and geometry families."""
    families: dict[str, list[str]] = {"appearance": [], "geometry": []}
    for name in subset_names:
        if name in BASELINE_SUBSETS:
            continue
        if name in APPEARANCE_SUBSETS:
            families["appearance"].append(name)
        else:
            families["geometry"].append(name)
    return {k: v for k, v in families.items() if v}
