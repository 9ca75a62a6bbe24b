"""Confident-learning label-error finding and multi-model label fusion.

One model's labels are treated as noisy and checked against another model's
softmax output.  Per class ``j`` the self-confidence threshold ``t_j`` is the
mean probability of ``j`` over voxels labelled ``j``.  A voxel labelled ``i``
is confidently ``j*`` when ``j*`` is the most probable class among those at or
above their threshold; off-diagonal ``(i, j*)`` voxels are label errors and get
replaced by the correcting model's argmax.

Voxels are streamed in fixed-size chunks (pass 1: thresholds, pass 2: joint
and flags), so memory stays at one probability volume plus one label volume.
Per-chunk partial results are reduced in chunk order, which keeps the output
identical for any thread count.

Class sums are accumulated exactly and each threshold is stored as the smallest
float64 not below the true mean, so a probability equal to the mean always
passes the inclusive test, whatever the input precision.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from utils.errors import ValidationError
from utils.volume_core import LabelVolume, argmax_labels, check_label_prob_pair

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_VOXELS = 1 << 20

_MANTISSA_BITS = 53
_LIMB_SHIFTS = (0, 18, 36)
_LIMB_MASK = (1 << 18) - 1


@dataclass(frozen=True, eq=False)
class ConfidentJoint:
    counts: np.ndarray  # K x K, row = noisy label, column = confident label
    thresholds: np.ndarray  # length K, +inf for classes absent from the noisy labels
    n: int
    label_counts: np.ndarray  # length K, voxels per noisy label

    @property
    def k(self):
        return self.counts.shape[0]

    def to_dict(self):
        return {
            "counts": self.counts.astype(int).tolist(),
            "thresholds": [_json_number(t) for t in self.thresholds],
            "n": int(self.n),
            "label_counts": self.label_counts.astype(int).tolist(),
            "calibrated": calibrate_joint(self).tolist(),
        }


@dataclass(frozen=True, eq=False)
class ErrorFlags:
    flags: np.ndarray  # bool [x, y, z]
    suggested: np.ndarray  # uint8 [x, y, z]; meaningful only where flagged

    @property
    def count(self):
        return int(self.flags.sum())


@dataclass(frozen=True, eq=False)
class FusionStep:
    labels: LabelVolume
    joint: ConfidentJoint
    flags: ErrorFlags
    changed: int  # flagged voxels whose label actually changed


def _json_number(value):
    return "inf" if np.isinf(value) else float(value)


def _chunks(n, chunk_voxels):
    return [(start, min(start + chunk_voxels, n)) for start in range(0, n, chunk_voxels)]


def _map_chunks(fn, bounds, threads):
    if threads <= 1 or len(bounds) <= 1:
        return [fn(b) for b in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, bounds))


def _flat(noisy, probs):
    return noisy.data.reshape(-1), probs.data.reshape(-1, probs.k)


def _exact_class_sums(lab, own, k):
    # A float64 is m * 2**(e - 53) with integer m < 2**53.  The m are summed per
    # (class, exponent) in 18-bit limbs, which float64 bincount adds without rounding.
    if own.size == 0:
        return [Fraction(0)] * k
    mantissa, exponent = np.frexp(own)
    m = (mantissa * float(1 << _MANTISSA_BITS)).astype(np.int64)
    e_min = int(exponent.min())
    span = int(exponent.max()) - e_min + 1
    cells = lab * span + (exponent - e_min)
    limbs = [
        np.bincount(cells, weights=(m >> shift) & _LIMB_MASK, minlength=k * span)
        for shift in _LIMB_SHIFTS
    ]
    sums = [Fraction(0)] * k
    for cell in np.flatnonzero(sum(limbs)):
        total = sum(int(limb[cell]) << shift for limb, shift in zip(limbs, _LIMB_SHIFTS))
        j, e = divmod(int(cell), span)
        sums[j] += Fraction(total, 1 << (_MANTISSA_BITS - e - e_min))
    return sums


def _float_at_or_above(value):
    """Smallest float64 not below the fraction ``value``; ``p >= t`` is then the exact test ``p >= value``."""
    t = float(value)
    return t if Fraction(t) >= value else float(np.nextafter(t, np.inf))


def _thresholds(labels, probs, k, chunk_voxels, threads):
    def partial(bounds):
        lo, hi = bounds
        lab = labels[lo:hi].astype(np.intp)
        own = probs[lo:hi].astype(np.float64)[np.arange(hi - lo), lab]
        return np.bincount(lab, minlength=k), _exact_class_sums(lab, own, k)

    label_counts = np.zeros(k, dtype=np.int64)
    sums = [Fraction(0)] * k
    for counts, part in _map_chunks(partial, _chunks(labels.size, chunk_voxels), threads):
        label_counts += counts
        sums = [a + b for a, b in zip(sums, part)]
    thresholds = np.full(k, np.inf)
    for j in np.flatnonzero(label_counts):
        thresholds[j] = _float_at_or_above(sums[j] / int(label_counts[j]))
    return thresholds, label_counts


def _confident_pass(labels, probs, thresholds, k, chunk_voxels, threads):
    flags = np.zeros(labels.size, dtype=bool)
    suggested = np.zeros(labels.size, dtype=np.uint8)

    def partial(bounds):
        lo, hi = bounds
        lab = labels[lo:hi].astype(np.intp)
        p = probs[lo:hi].astype(np.float64)
        above = p >= thresholds
        confident = above.any(axis=1)
        j_star = np.argmax(np.where(above, p, -np.inf), axis=1)
        cells = lab[confident] * k + j_star[confident]
        flagged = confident & (j_star != lab)
        flags[lo:hi] = flagged
        suggested[lo:hi] = np.where(flagged, np.argmax(p, axis=1), 0)
        return np.bincount(cells, minlength=k * k)

    counts = np.zeros(k * k, dtype=np.int64)
    for part in _map_chunks(partial, _chunks(labels.size, chunk_voxels), threads):
        counts += part
    return counts.reshape(k, k), flags, suggested


def correct_labels(noisy, probs, chunk_voxels=DEFAULT_CHUNK_VOXELS, threads=1):
    """Find label errors in ``noisy`` against ``probs`` and correct them, in one two-pass sweep."""
    check_label_prob_pair(noisy, probs)
    k = probs.k
    labels, flat_probs = _flat(noisy, probs)
    thresholds, label_counts = _thresholds(labels, flat_probs, k, chunk_voxels, threads)
    counts, flags, suggested = _confident_pass(labels, flat_probs, thresholds, k, chunk_voxels, threads)
    joint = ConfidentJoint(counts, thresholds, labels.size, label_counts)

    fused = np.where(flags, suggested, labels).reshape(noisy.dims)
    changed = int((flags & (suggested != labels)).sum())
    flags, suggested = flags.reshape(noisy.dims), suggested.reshape(noisy.dims)
    error_flags = ErrorFlags(flags, suggested)
    logger.debug("Thresholds %s, %d voxels flagged", thresholds.tolist(), error_flags.count)
    return FusionStep(noisy.with_data(fused), joint, error_flags, changed)


def compute_thresholds(noisy, probs):
    """Per-class self-confidence thresholds (+inf for classes absent from ``noisy``)."""
    check_label_prob_pair(noisy, probs)
    labels, flat_probs = _flat(noisy, probs)
    thresholds, _ = _thresholds(labels, flat_probs, probs.k, DEFAULT_CHUNK_VOXELS, 1)
    return thresholds


def confident_joint(noisy, probs):
    return correct_labels(noisy, probs).joint


def find_label_errors(noisy, probs):
    return correct_labels(noisy, probs).flags


def fuse_pair(noisy, probs):
    """``noisy`` with every flagged voxel replaced by the argmax of ``probs``."""
    return correct_labels(noisy, probs).labels


def calibrate_joint(joint):
    """Rescale the confident joint so rows sum to the noisy label counts and the total to ``n``."""
    counts = joint.counts.astype(np.float64)
    row_sums = np.clip(counts.sum(axis=1), 1e-6, None)
    calibrated = counts / row_sums[:, None] * joint.label_counts[:, None]
    total = np.clip(calibrated.sum(), 1e-6, None)
    return calibrated / total * joint.label_counts.sum()


def fuse_chain_with_joints(models, chunk_voxels=DEFAULT_CHUNK_VOXELS, threads=1):
    """Fold ``fuse_pair`` over the models; also return each pairwise confident joint."""
    models = list(models)
    if len(models) < 2:
        raise ValidationError(f"Label fusion needs at least 2 models, got {len(models)}")
    labels = argmax_labels(models[0])
    joints = []
    for probs in models[1:]:
        step = correct_labels(labels, probs, chunk_voxels=chunk_voxels, threads=threads)
        labels = step.labels
        joints.append(step.joint)
    return labels, joints


def fuse_chain(models, chunk_voxels=DEFAULT_CHUNK_VOXELS, threads=1):
    """Argmax of the first model, corrected in turn by each following model."""
    return fuse_chain_with_joints(models, chunk_voxels=chunk_voxels, threads=threads)[0]


if __name__ == "__main__":
    from utils.volume_core import ProbVolume, Spacing

    spacing = Spacing(1.0, 1.0, 1.0)
    noisy = LabelVolume(np.array([0, 0, 1, 1]).reshape(4, 1, 1), spacing, k=2)
    p0 = np.array([0.9, 0.2, 0.3, 0.1])
    probs = ProbVolume(np.stack([p0, 1 - p0], axis=-1).reshape(4, 1, 1, 2), spacing)
    step = correct_labels(noisy, probs)
    print(f"Thresholds: {step.joint.thresholds.tolist()}")
    print(f"Confident joint: {step.joint.counts.tolist()}")
    print(f"Fused labels: {step.labels.data.ravel().tolist()}")
