"""Per-class Dice score and average symmetric surface distance (mm)."""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from utils.errors import ShapeMismatchError
from utils.volume_core import check_same_grid

DEFAULT_CLASSES = (1, 2)
CSV_HEADER = ("case", "class", "dice", "assd_mm")

# 6-connectivity: a foreground voxel is on the surface if a face neighbor is not.
_FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ClassMetrics:
    dice: float
    assd_mm: float


@dataclass(frozen=True)
class MetricsRecord:
    per_class: dict = field(default_factory=dict)  # class label -> ClassMetrics


def _check_pair(pred, gt, spacing=False):
    check_same_grid(pred, gt, "prediction and ground truth")
    if spacing and pred.spacing != gt.spacing:
        raise ShapeMismatchError(
            f"prediction and ground truth differ in spacing: {pred.spacing.as_tuple()} vs {gt.spacing.as_tuple()}"
        )


def dice_score(pred, gt, class_label):
    """2|A∩B| / (|A| + |B|); 1.0 when both masks are empty, 0.0 when only one is."""
    _check_pair(pred, gt)
    a = pred.data == class_label
    b = gt.data == class_label
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def surface_mask(mask, class_label):
    binary = mask.data == class_label
    interior = ndimage.binary_erosion(binary, structure=_FACE_NEIGHBORS, border_value=0)
    return binary & ~interior


def extract_surface(mask, class_label):
    """Coordinates (m x 3, lexicographic order) of the class's 6-neighborhood boundary voxels."""
    return np.argwhere(surface_mask(mask, class_label))


def _distances_to(surface, target_surface, spacing):
    # Exact Euclidean distance to the nearest target surface voxel, in mm.
    field_ = ndimage.distance_transform_edt(~target_surface, sampling=spacing.as_tuple())
    return field_[surface]


def assd(pred, gt, class_label):
    """Average symmetric surface distance in mm; 0 for two empty masks, inf when only one is empty."""
    _check_pair(pred, gt, spacing=True)
    sp = surface_mask(pred, class_label)
    sg = surface_mask(gt, class_label)
    n_p, n_g = int(sp.sum()), int(sg.sum())
    if n_p == 0 and n_g == 0:
        return 0.0
    if n_p == 0 or n_g == 0:
        return math.inf
    total = _distances_to(sp, sg, pred.spacing).sum() + _distances_to(sg, sp, pred.spacing).sum()
    return float(total / (n_p + n_g))


def evaluate(pred, gt, classes=DEFAULT_CLASSES):
    _check_pair(pred, gt, spacing=True)
    return MetricsRecord({int(c): ClassMetrics(dice_score(pred, gt, c), assd(pred, gt, c)) for c in classes})


def format_number(value):
    return "inf" if math.isinf(value) else f"{value:.6f}"


def csv_rows(case, record):
    for label, m in record.per_class.items():
        yield (case, str(label), format_number(m.dice), format_number(m.assd_mm))


def to_csv(results):
    """CSV text for ``[(case, MetricsRecord), ...]``; dice is a fraction, not a percentage."""
    lines = [",".join(CSV_HEADER)]
    for case, record in results:
        lines.extend(",".join(row) for row in csv_rows(case, record))
    return "\n".join(lines) + "\n"


def summarize(results):
    """Mean and population std per class over cases; infinite ASSDs are counted, not averaged."""
    by_class = {}
    for _, record in results:
        for label, m in record.per_class.items():
            by_class.setdefault(label, []).append(m)
    summary = {}
    for label, values in by_class.items():
        dice = np.array([m.dice for m in values])
        finite = np.array([m.assd_mm for m in values if not math.isinf(m.assd_mm)])
        summary[label] = {
            "n": len(values),
            "dice_mean": float(dice.mean()),
            "dice_std": float(dice.std()),
            "assd_mean": float(finite.mean()) if finite.size else "inf",
            "assd_std": float(finite.std()) if finite.size else "inf",
            "assd_inf": len(values) - int(finite.size),
        }
    return summary


if __name__ == "__main__":
    from utils.volume_core import LabelVolume, Spacing

    spacing = Spacing(1.0, 1.0, 1.5)
    a = np.zeros((1, 1, 5), dtype=np.uint8)
    b = np.zeros((1, 1, 5), dtype=np.uint8)
    a[0, 0, 0] = 1
    b[0, 0, 3] = 1
    pred, gt = LabelVolume(a, spacing), LabelVolume(b, spacing)
    print(f"Dice: {dice_score(pred, gt, 1)}")
    print(f"ASSD (expect 4.5 mm): {assd(pred, gt, 1)}")
