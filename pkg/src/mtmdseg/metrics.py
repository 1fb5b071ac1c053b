"""Post-processing chain, overlap / surface-distance metrics and the two-sample KS test.

Metrics that are undefined for a given pair (empty ground truth, empty
prediction for surface distances) are returned as ``None`` and excluded from
averages; reports carry the count of excluded values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, special
from scipy.spatial import cKDTree

METRICS = ("dice", "assd_mm", "mssd_mm", "sensitivity", "specificity", "ravd")

CONNECTIVITY_26 = ndimage.generate_binary_structure(3, 3)
CONNECTIVITY_6 = ndimage.generate_binary_structure(3, 1)


def ball(radius: int = 2) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    z, y, x = np.meshgrid(r, r, r, indexing="ij")
    return z * z + y * y + x * x <= radius * radius


CLOSING_KERNEL = ball(2)


# ---------------------------------------------------------------- post-processing

def stack_and_binarize(slices, cls: int) -> np.ndarray:
    """Stack per-slice class maps ``[C, H, W]`` into ``[Z, H, W]`` and take the indicator
    of ``cls`` after a per-pixel argmax (ties go to the lowest class index)."""
    slices = list(slices)
    shapes = {np.shape(s) for s in slices}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent slice shapes: {sorted(shapes)}")
    vol = np.stack(slices)
    return vol.argmax(axis=1) == cls


def largest_component(volume: np.ndarray) -> np.ndarray:
    """Largest 26-connected foreground component. Ties keep the component whose
    first voxel in raster order comes first."""
    volume = np.asarray(volume, dtype=bool)
    labels, n = ndimage.label(volume, structure=CONNECTIVITY_26)
    if n == 0:
        return volume.copy()
    counts = np.bincount(labels.ravel())[1:]
    # ndimage.label numbers components in raster order of their first voxel
    return labels == (int(np.argmax(counts)) + 1)


def morphological_closing(volume: np.ndarray, kernel: np.ndarray = CLOSING_KERNEL) -> np.ndarray:
    volume = np.asarray(volume, dtype=bool)
    r = kernel.shape[0] // 2
    padded = np.pad(volume, r)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, kernel), kernel, border_value=0)
    return closed[(slice(r, -r),) * volume.ndim]


def postprocess(mask: np.ndarray) -> np.ndarray:
    return morphological_closing(largest_component(mask))


# ---------------------------------------------------------------- overlap metrics

def _pair(gt, p):
    gt, p = np.asarray(gt, dtype=bool), np.asarray(p, dtype=bool)
    if gt.shape != p.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {p.shape}")
    return gt, p


def dice(gt, p) -> float | None:
    gt, p = _pair(gt, p)
    n_gt = int(gt.sum())
    if n_gt == 0:
        return None
    return 2.0 * int((gt & p).sum()) / (n_gt + int(p.sum()))


def sensitivity(gt, p) -> float | None:
    gt, p = _pair(gt, p)
    n_gt = int(gt.sum())
    return None if n_gt == 0 else int((gt & p).sum()) / n_gt


def specificity(gt, p) -> float | None:
    gt, p = _pair(gt, p)
    n_bg = int((~gt).sum())
    return None if n_bg == 0 else int((~gt & ~p).sum()) / n_bg


def ravd(gt, p) -> float | None:
    gt, p = _pair(gt, p)
    n_gt = int(gt.sum())
    return None if n_gt == 0 else abs(n_gt - int(p.sum())) / n_gt


# ---------------------------------------------------------------- surface distances

def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground voxels with a background face-neighbour
    (outside the array counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, CONNECTIVITY_6, border_value=0)
    return np.argwhere(mask & ~interior)


def _directed_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cKDTree(b).query(a, k=1)[0]


def surface_distances(gt, p, spacing=(1.0, 1.0, 1.0)):
    gt, p = _pair(gt, p)
    if not gt.any() or not p.any():
        return None
    sp = np.asarray(spacing, dtype=float)
    s_gt = surface_voxels(gt) * sp
    s_p = surface_voxels(p) * sp
    return _directed_distances(s_gt, s_p), _directed_distances(s_p, s_gt)


def assd(gt, p, spacing=(1.0, 1.0, 1.0)) -> float | None:
    d = surface_distances(gt, p, spacing)
    if d is None:
        return None
    return float((d[0].sum() + d[1].sum()) / (len(d[0]) + len(d[1])))


def mssd(gt, p, spacing=(1.0, 1.0, 1.0)) -> float | None:
    d = surface_distances(gt, p, spacing)
    if d is None:
        return None
    return float(max(d[0].max(), d[1].max()))


def all_metrics(gt, p, spacing) -> dict[str, float | None]:
    d = surface_distances(gt, p, spacing)
    out = {"dice": dice(gt, p)}
    if d is None:
        out["assd_mm"] = out["mssd_mm"] = None
    else:
        out["assd_mm"] = float((d[0].sum() + d[1].sum()) / (len(d[0]) + len(d[1])))
        out["mssd_mm"] = float(max(d[0].max(), d[1].max()))
    out["sensitivity"] = sensitivity(gt, p)
    out["specificity"] = specificity(gt, p)
    out["ravd"] = ravd(gt, p)
    return out


# ---------------------------------------------------------------- KS test

def ks_two_sample(a, b) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.

    The p-value uses the Kolmogorov distribution at
    ``(sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D`` with ``ne = na * nb / (na + nb)``.
    """
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two non-empty samples")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    d = float(np.abs(cdf_a - cdf_b).max())
    ne = a.size * b.size / (a.size + b.size)
    lam = (np.sqrt(ne) + 0.12 + 0.11 / np.sqrt(ne)) * d
    p = float(np.clip(special.kolmogorov(lam), 0.0, 1.0))
    return d, p


# ---------------------------------------------------------------- reports

@dataclass
class MetricsReport:
    per_class: dict[int, dict[str, float | None]]
    mean: dict[str, float | None] = field(default_factory=dict)
    undefined: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.mean:
            for m in METRICS:
                vals = [c[m] for c in self.per_class.values() if c[m] is not None]
                self.mean[m] = float(np.mean(vals)) if vals else None
                self.undefined[m] = len(self.per_class) - len(vals)

    @property
    def dice(self):
        return self.mean["dice"]

    def to_json(self) -> dict:
        return {"mean": self.mean, "undefined": self.undefined,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def postprocessed_masks(pred_slices, num_classes: int) -> dict[int, np.ndarray]:
    vol = np.stack(list(pred_slices))
    labels = vol.argmax(axis=1)
    return {c: postprocess(labels == c) for c in range(1, num_classes)}


def per_bone_report(gt_labels: np.ndarray, pred_slices, spacing) -> MetricsReport:
    """Stack, binarize per foreground class, keep the largest component, close,
    and score each class against the ground truth."""
    pred = np.stack(list(pred_slices))
    if pred.ndim != 4 or pred.shape[0] != gt_labels.shape[0] or pred.shape[2:] != gt_labels.shape[1:]:
        raise ValueError(f"prediction {pred.shape} does not match labels {gt_labels.shape}")
    masks = postprocessed_masks(pred, pred.shape[1])
    per_class = {c: all_metrics(gt_labels == c, m, spacing) for c, m in masks.items()}
    return MetricsReport(per_class)


def slice_dice_scores(gt_labels: np.ndarray, masks: dict[int, np.ndarray]) -> np.ndarray:
    """Per-slice Dice, averaged over classes present in the slice's ground truth.
    Slices without any foreground ground truth are skipped."""
    scores = []
    for z in range(gt_labels.shape[0]):
        vals = [dice(gt_labels[z] == c, m[z]) for c, m in masks.items()]
        vals = [v for v in vals if v is not None]
        if vals:
            scores.append(float(np.mean(vals)))
    return np.asarray(scores)
