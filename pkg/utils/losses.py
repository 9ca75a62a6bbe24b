"""Segmentation and consistency losses with analytic gradients w.r.t. the probabilities.

All sums run in float64 over the whole ``[x, y, z, k]`` array, so the values
are deterministic for a given input.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from utils.errors import ShapeMismatchError
from utils.volume_core import ProbVolume, check_label_prob_pair, check_same_grid

DEFAULT_EPS = 1e-5
CE_CLIP = 1e-12
FD_STEP = 1e-5


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: Optional[np.ndarray] = None


def _one_hot_array(labels, k):
    return np.eye(k, dtype=np.float64)[labels]


def dice_terms(p, y, eps=DEFAULT_EPS, with_grad=False):
    """Soft Dice with squared denominator, pooled over classes and voxels."""
    intersection = np.sum(p * y)
    denominator = np.sum(p * p) + np.sum(y * y) + eps
    numerator = 2.0 * intersection + eps
    value = 1.0 - numerator / denominator
    grad = None
    if with_grad:
        grad = -(2.0 * y * denominator - numerator * 2.0 * p) / (denominator * denominator)
    return value, grad


def ce_terms(p, y, with_grad=False):
    n = p.shape[0] * p.shape[1] * p.shape[2]
    clipped = np.clip(p, CE_CLIP, 1.0)
    value = -np.sum(y * np.log(clipped)) / n
    grad = None
    if with_grad:
        inside = clipped == p
        grad = np.where(inside, -y / (n * clipped), 0.0)
    return value, grad


def consistency_terms(p_teacher, p_student, with_grad=False):
    n = p_student.shape[0] * p_student.shape[1] * p_student.shape[2]
    diff = p_student - p_teacher
    value = np.sum(diff * diff) / n
    grad = 2.0 * diff / n if with_grad else None
    return value, grad


def mae_terms(p_teacher, p_student, with_grad=False):
    n = p_student.shape[0] * p_student.shape[1] * p_student.shape[2]
    diff = p_student - p_teacher
    value = np.sum(np.abs(diff)) / n
    grad = np.sign(diff) / n if with_grad else None
    return value, grad


def _seg_inputs(p, y):
    check_label_prob_pair(y, p)
    return p.data.astype(np.float64), _one_hot_array(y.data, p.k)


def _pair_inputs(p_teacher, p_student):
    check_same_grid(p_teacher, p_student, "teacher and student probabilities")
    if p_teacher.k != p_student.k:
        raise ShapeMismatchError(f"teacher has k={p_teacher.k} but student has k={p_student.k}")
    return p_teacher.data.astype(np.float64), p_student.data.astype(np.float64)


def _loss(value, grad):
    return LossValue(float(value), grad)


def dice_loss(p: ProbVolume, y, eps=DEFAULT_EPS, with_grad=False):
    return _loss(*dice_terms(*_seg_inputs(p, y), eps=eps, with_grad=with_grad))


def ce_loss(p: ProbVolume, y, with_grad=False):
    return _loss(*ce_terms(*_seg_inputs(p, y), with_grad=with_grad))


def seg_loss(p: ProbVolume, y, eps=DEFAULT_EPS, with_grad=False):
    """Dice + cross entropy; value and gradient are the plain sums of the two."""
    pa, ya = _seg_inputs(p, y)
    dice_value, dice_grad = dice_terms(pa, ya, eps=eps, with_grad=with_grad)
    ce_value, ce_grad = ce_terms(pa, ya, with_grad=with_grad)
    grad = dice_grad + ce_grad if with_grad else None
    return LossValue(float(dice_value) + float(ce_value), grad)


def consistency_loss(p_teacher: ProbVolume, p_student: ProbVolume, with_grad=False):
    """Mean squared teacher/student difference; the gradient is w.r.t. the student."""
    return _loss(*consistency_terms(*_pair_inputs(p_teacher, p_student), with_grad=with_grad))


def mae_loss(p_teacher: ProbVolume, p_student: ProbVolume, with_grad=False):
    """Mean absolute teacher/student difference; subgradient 0 where they agree."""
    return _loss(*mae_terms(*_pair_inputs(p_teacher, p_student), with_grad=with_grad))


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn, p, step=FD_STEP):
    """Central finite differences of the scalar ``fn`` at every entry of ``p``."""
    p = np.array(p, dtype=np.float64, copy=True)
    grad = np.zeros_like(p)
    flat, out = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        upper = fn(p)
        flat[i] = saved - step
        lower = fn(p)
        flat[i] = saved
        out[i] = (upper - lower) / (2.0 * step)
    return grad


def random_probabilities(rng, dims, k):
    logits = rng.normal(size=tuple(dims) + (k,))
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_one(name, p, y_or_teacher, eps):
    if name == "dice":
        fn = lambda q: dice_terms(q, y_or_teacher, eps=eps)[0]
        analytic = dice_terms(p, y_or_teacher, eps=eps, with_grad=True)[1]
    elif name == "ce":
        fn = lambda q: ce_terms(q, y_or_teacher)[0]
        analytic = ce_terms(p, y_or_teacher, with_grad=True)[1]
    elif name == "seg":
        fn = lambda q: dice_terms(q, y_or_teacher, eps=eps)[0] + ce_terms(q, y_or_teacher)[0]
        analytic = (
            dice_terms(p, y_or_teacher, eps=eps, with_grad=True)[1]
            + ce_terms(p, y_or_teacher, with_grad=True)[1]
        )
    elif name == "consistency":
        fn = lambda q: consistency_terms(y_or_teacher, q)[0]
        analytic = consistency_terms(y_or_teacher, p, with_grad=True)[1]
    elif name == "mae":
        fn = lambda q: mae_terms(y_or_teacher, q)[0]
        analytic = mae_terms(y_or_teacher, p, with_grad=True)[1]
    else:
        raise ValueError(f"Unknown loss {name!r}")
    return relative_error(analytic, numeric_gradient(fn, p))


GRADIENT_CHECKED_LOSSES = ("dice", "ce", "seg", "consistency", "mae")


def gradient_check(trials=100, seed=0, max_dims=4, k=3, eps=DEFAULT_EPS, losses=GRADIENT_CHECKED_LOSSES, volume=None):
    """Largest analytic-vs-finite-difference relative error per loss over random volumes.

    With ``volume`` (a ``(ProbVolume, LabelVolume or ProbVolume)`` pair) each trial
    checks a random crop of at most ``max_dims`` voxels per axis of that pair
    instead of a synthetic volume.
    """
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in losses}
    for _ in range(trials):
        if volume is None:
            dims = tuple(int(d) for d in rng.integers(1, max_dims + 1, size=3))
            p = random_probabilities(rng, dims, k)
            labels = rng.integers(0, k, size=dims)
            y = _one_hot_array(labels, k)
            other = _away_from_kinks(p, random_probabilities(rng, dims, k))
        else:
            p, y, other = _random_crop(rng, volume, max_dims)
            if other is not None:
                other = _away_from_kinks(p, other)
        for name in losses:
            target = other if name in ("consistency", "mae") else y
            if target is None:
                continue
            worst[name] = max(worst[name], _check_one(name, p, target, eps))
    return worst


def _away_from_kinks(p, other, margin=1e-3):
    # |q - other| has a kink where they meet; finite differences must not straddle it.
    close = np.abs(p - other) < margin
    shifted = np.where(p > 0.5, p - 2 * margin, p + 2 * margin)
    return np.where(close, shifted, other)


def _blend_to_interior(p, k):
    # Saved probabilities are often exactly 0 or 1, where the CE clip kinks.
    return 0.9 * p + 0.1 / k


def _random_crop(rng, volume, max_dims):
    probs, second = volume
    dims = probs.dims
    size = [int(rng.integers(1, min(max_dims, n) + 1)) for n in dims]
    start = [int(rng.integers(0, n - s + 1)) for n, s in zip(dims, size)]
    region = tuple(slice(a, a + s) for a, s in zip(start, size))
    p = _blend_to_interior(probs.data[region].astype(np.float64), probs.k)
    if isinstance(second, ProbVolume):
        return p, None, _blend_to_interior(second.data[region].astype(np.float64), probs.k)
    return p, _one_hot_array(second.data[region], probs.k), None


if __name__ == "__main__":
    from utils.volume_core import LabelVolume, Spacing

    spacing = Spacing(1.0, 1.0, 1.0)
    y = LabelVolume(np.array([[[1]]]), spacing, k=2)
    p = ProbVolume(np.array([[[[0.5, 0.5]]]]), spacing)
    print(f"Dice loss (expect 1/3): {dice_loss(p, y, eps=0.0).value}")
    print(f"CE loss (expect ln 2): {ce_loss(p, y).value}")
    print(f"Gradient check: {gradient_check(trials=5, seed=7)}")
