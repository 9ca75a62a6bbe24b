"""Connected components and the anatomical cleanup rules for VS / cochlea masks."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from utils.errors import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_VS_LABEL = 1
DEFAULT_COCHLEA_LABEL = 2
DEFAULT_Z_MAX = 15

# 26-connectivity
_STRUCTURE = np.ones((3, 3, 3), dtype=bool)


@dataclass(frozen=True)
class ComponentStats:
    id: int
    class_label: int
    voxel_count: int
    centroid: tuple  # (x, y, z) in voxel coordinates

    def to_dict(self):
        return {
            "id": self.id,
            "class_label": self.class_label,
            "voxel_count": self.voxel_count,
            "centroid": [float(c) for c in self.centroid],
        }


@dataclass(frozen=True)
class RemovedComponent:
    rule: str  # "far_from_cochlea" or "not_largest"
    component: ComponentStats

    def to_dict(self):
        return {"rule": self.rule, **self.component.to_dict()}


def _check_label(mask, label):
    if not 0 <= label < mask.k:
        raise ValidationError(f"Class label {label} out of range for k={mask.k}")


def _linear_index(dims):
    # NIfTI storage order: x varies fastest.
    nx, ny, nz = dims
    x, y, z = np.indices(dims, dtype=np.int64)
    return x + nx * (y + ny * z)


def connected_components(mask, class_label):
    """26-connected components of one class.

    Returns ``(stats, ids)``: stats sorted by voxel count (descending, ties by
    lowest linear voxel index) and an int32 id volume where component ``stats[i]``
    has id ``i + 1`` and everything else is 0.
    """
    _check_label(mask, class_label)
    binary = mask.data == class_label
    raw, count = ndimage.label(binary, structure=_STRUCTURE)
    ids = np.zeros(mask.dims, dtype=np.int32)
    if count == 0:
        return [], ids

    raw_ids = np.arange(1, count + 1)
    sizes = np.bincount(raw.reshape(-1), minlength=count + 1)[1:]
    first_voxel = np.asarray(ndimage.minimum(_linear_index(mask.dims), raw, raw_ids), dtype=np.int64)
    centroids = ndimage.center_of_mass(binary, raw, raw_ids)
    order = np.lexsort((first_voxel, -sizes))

    relabel = np.zeros(count + 1, dtype=np.int32)
    stats = []
    for new_id, idx in enumerate(order, start=1):
        relabel[raw_ids[idx]] = new_id
        stats.append(ComponentStats(new_id, int(class_label), int(sizes[idx]), tuple(float(c) for c in centroids[idx])))
    ids = relabel[raw]
    return stats, ids


def _remove_far_vs(mask, vs_label, cochlea_label, z_max):
    cochlea, _ = connected_components(mask, cochlea_label)
    if not cochlea:
        logger.debug("No cochlea found, skipping the VS distance rule")
        return mask, []
    reference_z = cochlea[0].centroid[2]
    vs, ids = connected_components(mask, vs_label)
    far = [c for c in vs if abs(c.centroid[2] - reference_z) > z_max]
    if not far:
        return mask, []
    data = mask.data.copy()
    data[np.isin(ids, [c.id for c in far])] = 0
    return mask.with_data(data), [RemovedComponent("far_from_cochlea", c) for c in far]


def _keep_largest(mask, class_labels):
    data, removed = None, []
    for label in class_labels:
        components, ids = connected_components(mask, label)
        if len(components) <= 1:
            continue
        if data is None:
            data = mask.data.copy()
        data[ids > 1] = 0
        removed.extend(RemovedComponent("not_largest", c) for c in components[1:])
    return (mask if data is None else mask.with_data(data)), removed


def _check_pair(mask, vs_label, cochlea_label):
    _check_label(mask, vs_label)
    _check_label(mask, cochlea_label)
    if vs_label == cochlea_label:
        raise ValidationError("VS and cochlea labels must differ")


def remove_far_vs(mask, vs_label=DEFAULT_VS_LABEL, cochlea_label=DEFAULT_COCHLEA_LABEL, z_max=DEFAULT_Z_MAX):
    """Drop VS components whose centroid is more than ``z_max`` slices from the largest cochlea's centroid."""
    _check_pair(mask, vs_label, cochlea_label)
    return _remove_far_vs(mask, vs_label, cochlea_label, z_max)[0]


def keep_largest(mask, class_labels):
    """Keep only the largest component of each listed class."""
    for label in class_labels:
        _check_label(mask, label)
    return _keep_largest(mask, class_labels)[0]


def postprocess_with_report(mask, vs_label=DEFAULT_VS_LABEL, cochlea_label=DEFAULT_COCHLEA_LABEL, z_max=DEFAULT_Z_MAX):
    _check_pair(mask, vs_label, cochlea_label)
    mask, far = _remove_far_vs(mask, vs_label, cochlea_label, z_max)
    mask, small = _keep_largest(mask, [vs_label, cochlea_label])
    removed = far + small
    if removed:
        logger.info("Removed %d components (%d far from the cochlea)", len(removed), len(far))
    return mask, removed


def postprocess_pipeline(mask, vs_label=DEFAULT_VS_LABEL, cochlea_label=DEFAULT_COCHLEA_LABEL, z_max=DEFAULT_Z_MAX):
    """Far-VS removal followed by largest-component selection for VS and cochlea."""
    return postprocess_with_report(mask, vs_label, cochlea_label, z_max)[0]


if __name__ == "__main__":
    from utils.volume_core import LabelVolume, Spacing

    data = np.zeros((32, 32, 32), dtype=np.uint8)
    data[10:12, 10:12, 9:12] = 2
    data[14:16, 14:16, 11:14] = 1
    data[20:22, 20:22, 29:32] = 1
    mask = LabelVolume(data, Spacing(0.46875, 0.46875, 1.5))
    cleaned, removed = postprocess_with_report(mask)
    print(f"Removed: {[r.to_dict() for r in removed]}")
    print(f"VS voxels left: {int((cleaned.data == 1).sum())}")
