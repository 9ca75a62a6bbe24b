"""Volumetric data types and the preprocessing primitives every other module builds on.

Arrays are indexed ``[x, y, z]`` (and ``[x, y, z, channel]`` for probabilities),
which is the order nibabel hands NIfTI data back in.
"""
import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from utils.errors import ShapeMismatchError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_NUM_CLASSES = 3
# Channel sums further than this from 1 are rejected.
PROB_SUM_TOLERANCE = 1e-3
# Channel sums closer than this to 1 are left alone; float32 softmax rounding lives here.
PROB_SUM_EXACT = 1e-6


def _frozen(array):
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Spacing:
    """Millimeters per voxel along x, y and z.

    Values are kept at NIfTI ``pixdim`` (float32) precision so a save/load
    round trip gives back exactly the same spacing.
    """

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        values = []
        for name in ("dx", "dy", "dz"):
            value = float(np.float32(getattr(self, name)))
            if not np.isfinite(value) or value <= 0:
                raise ValidationError(f"Spacing {name} must be positive and finite, got {getattr(self, name)!r}")
            values.append(value)
        for name, value in zip(("dx", "dy", "dz"), values):
            object.__setattr__(self, name, value)

    @classmethod
    def of(cls, values):
        dx, dy, dz = (float(v) for v in values)
        return cls(dx, dy, dz)

    def as_tuple(self):
        return (self.dx, self.dy, self.dz)

    def scaled(self, factor):
        return Spacing(self.dx * factor, self.dy * factor, self.dz * factor)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Per-voxel class indices in ``0..k-1``."""

    data: np.ndarray
    spacing: Spacing
    k: int = DEFAULT_NUM_CLASSES

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"Label volume must be a non-empty 3D array, got shape {data.shape}")
        if not 1 <= self.k <= 255:
            raise ValidationError(f"Class count must be within 1..255, got {self.k}")
        if data.dtype.kind not in "iub":
            raise ValidationError(f"Label volume needs integer data, got {data.dtype}")
        if data.size and (data.min() < 0 or data.max() >= self.k):
            raise ValidationError(
                f"Label values must be within 0..{self.k - 1}, got range {int(data.min())}..{int(data.max())}"
            )
        object.__setattr__(self, "data", _frozen(np.array(data, dtype=np.uint8, copy=True)))

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data):
        return LabelVolume(data, self.spacing, self.k)


@dataclass(frozen=True, eq=False)
class ProbVolume:
    """Per-voxel probability vectors over ``k`` channels, stored as ``[x, y, z, k]``."""

    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValidationError(f"Probability volume must be a non-empty 4D array, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if not np.all((data >= 0) & (data <= 1)):
            raise ValidationError("Probability entries must lie within [0, 1]")
        deviation = np.abs(data.sum(axis=-1, dtype=np.float64) - 1.0)
        if not np.all(deviation <= PROB_SUM_TOLERANCE):
            raise ValidationError(
                f"probability sum out of tolerance: max deviation {float(np.nanmax(deviation)):.3g} > {PROB_SUM_TOLERANCE}"
            )
        object.__setattr__(self, "data", _frozen(np.array(data, copy=True)))

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def k(self):
        return self.data.shape[3]

    def with_data(self, data):
        return ProbVolume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Per-voxel real intensities (an image)."""

    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"Scalar volume must be a non-empty 3D array, got shape {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise ValidationError("Scalar volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(np.array(data, copy=True)))

    @property
    def dims(self):
        return self.data.shape

    def with_data(self, data):
        return ScalarVolume(data, self.spacing)


def renormalize_probabilities(data):
    """Rescale voxels whose channel sum drifted slightly from 1.

    Voxels within ``PROB_SUM_EXACT`` of 1 are returned bit-for-bit unchanged;
    drift beyond ``PROB_SUM_TOLERANCE`` is an error.
    """
    sums = data.sum(axis=-1, dtype=np.float64)
    deviation = np.abs(sums - 1.0)
    if not np.all(deviation <= PROB_SUM_TOLERANCE):
        worst = float(np.nanmax(np.where(np.isnan(deviation), np.inf, deviation)))
        raise ValidationError(f"probability sum out of tolerance: max deviation {worst:.3g} > {PROB_SUM_TOLERANCE}")
    drifted = deviation > PROB_SUM_EXACT
    if not drifted.any():
        return data
    fixed = np.array(data, copy=True)
    fixed[drifted] = (data[drifted].astype(np.float64) / sums[drifted][:, None]).astype(data.dtype)
    logger.debug("Renormalized %d voxels with drifting channel sums", int(drifted.sum()))
    return fixed


def check_same_grid(a, b, what="volumes"):
    if tuple(a.dims) != tuple(b.dims):
        raise ShapeMismatchError(f"{what} differ in dims: {tuple(a.dims)} vs {tuple(b.dims)}")


def check_label_prob_pair(labels, probs):
    check_same_grid(labels, probs, "label and probability volumes")
    if labels.k != probs.k:
        raise ShapeMismatchError(f"label volume has k={labels.k} but probability volume has k={probs.k}")


def argmax_labels(p):
    """Most probable class per voxel; ties go to the lowest class index."""
    return LabelVolume(np.argmax(p.data, axis=-1).astype(np.uint8), p.spacing, p.k)


def one_hot(labels):
    """Unit probability vector ``e_c`` for each voxel labelled ``c``."""
    return ProbVolume(np.eye(labels.k, dtype=np.float64)[labels.data], labels.spacing)


def normalize_intensity(v):
    """Affine map of the intensities onto [0, 1]."""
    data = v.data.astype(np.float64)
    low, high = float(data.min()), float(data.max())
    if high == low:
        raise ValidationError("Cannot normalize a constant volume (max == min)")
    out = (data - low) / (high - low)
    return ScalarVolume(np.clip(out, 0.0, 1.0), v.spacing)


def flip_lr(v):
    """Mirror along the x axis. Works for every volume type."""
    return v.with_data(np.ascontiguousarray(np.flip(v.data, axis=0)))


def resampled_dims(dims, spacing, target):
    return tuple(
        max(1, int(round(n * s / t)))
        for n, s, t in zip(dims, spacing.as_tuple(), target.as_tuple())
    )


def _source_coordinates(n_out, source_step, target_step):
    # Voxel centers of both grids share the same physical origin of the field of view.
    return (np.arange(n_out, dtype=np.float64) + 0.5) * (target_step / source_step) - 0.5


def resample(v, target):
    """Resample a scalar (trilinear) or label (nearest neighbor) volume onto ``target`` spacing."""
    if not isinstance(target, Spacing):
        target = Spacing.of(target)
    out_dims = resampled_dims(v.dims, v.spacing, target)
    axes = [
        _source_coordinates(n_out, s, t)
        for n_out, s, t in zip(out_dims, v.spacing.as_tuple(), target.as_tuple())
    ]
    if isinstance(v, LabelVolume):
        index = [
            np.clip(np.floor(coords + 0.5).astype(np.int64), 0, n_in - 1)
            for coords, n_in in zip(axes, v.dims)
        ]
        data = v.data[np.ix_(*index)]
        return LabelVolume(data, target, v.k)
    if isinstance(v, ScalarVolume):
        grid = np.meshgrid(*axes, indexing="ij")
        data = ndimage.map_coordinates(v.data.astype(np.float64), grid, order=1, mode="nearest")
        return ScalarVolume(data, target)
    raise ValidationError(f"resample supports scalar and label volumes, got {type(v).__name__}")


def most_common_spacing(spacings):
    """Modal spacing of a dataset; ties go to the spacing seen first."""
    spacings = list(spacings)
    if not spacings:
        raise ValidationError("Need at least one spacing to pick the most common one")
    counts = Counter(s.as_tuple() for s in spacings)
    best = max(counts.values())
    for s in spacings:
        if counts[s.as_tuple()] == best:
            return s


if __name__ == "__main__":
    spacing = Spacing(0.46875, 0.468975, 1.5)
    ramp = ScalarVolume(np.arange(24, dtype=np.float64).reshape(2, 3, 4), spacing)
    print(f"Spacing: {spacing.as_tuple()}")
    print(f"Normalized range: {normalize_intensity(ramp).data.min()}..{normalize_intensity(ramp).data.max()}")
    up = resample(ramp, Spacing(0.234375, 0.468975, 1.5))
    print(f"Resampled dims: {ramp.dims} -> {up.dims}")
    labels = LabelVolume(np.array([[[0]], [[2]]]), spacing)
    print(f"Flipped labels: {flip_lr(labels).data.ravel().tolist()}")
    print(f"Round trip one_hot/argmax: {np.array_equal(argmax_labels(one_hot(labels)).data, labels.data)}")
