"""Deterministic 32^3 VS / cochlea fixture shared by the CLI and post-processing tests.

Model A is the noisy first model: four VS voxels missed, a far-away VS blob
and a stray cochlea voxel.  Model B puts its mass on the ground truth, so
fusing A with B recovers the ground truth exactly.  Model C is confident
about one extra VS slab next to the tumour, which a third fusion step
accepts.  Model D sees the VS but misses the cochlea entirely.
"""
import os

import numpy as np

from utils.nifti_io import save_volume
from utils.volume_core import LabelVolume, ProbVolume, Spacing

DIMS = (32, 32, 32)
SPACING = Spacing(0.46875, 0.46875, 1.5)
K = 3


def ground_truth():
    data = np.zeros(DIMS, dtype=np.uint8)
    data[10:16, 10:16, 8:14] = 1  # VS, centroid z = 10.5
    data[20:23, 20:23, 9:12] = 2  # cochlea, centroid z = 10
    return data


def noisy_labels():
    data = ground_truth()
    data[12:14, 12:14, 10] = 0  # missed VS voxels
    data[5:7, 5:7, 28:30] = 1  # VS blob 18.5 slices above the cochlea
    data[28, 28, 10] = 2  # stray cochlea voxel
    return data


def model_c_labels():
    data = ground_truth()
    data[16, 10:16, 8:14] = 1  # 36 voxel slab on the +x face of the VS
    return data


def vs_only_labels():
    data = ground_truth()
    data[data == 2] = 0
    return data


def probabilities(labels, high, k=K):
    """float32 probabilities with ``high`` on the given label and the rest spread evenly."""
    low = (1.0 - high) / (k - 1)
    data = np.full(labels.shape + (k,), low, dtype=np.float32)
    np.put_along_axis(data, labels[..., None].astype(np.intp), np.float32(high), axis=-1)
    return data


def write_fixture(directory):
    """Write the four model outputs and the ground truth; return their paths."""
    gt = ground_truth()
    volumes = {
        "model_a": ProbVolume(probabilities(noisy_labels(), 0.9), SPACING),
        "model_b": ProbVolume(probabilities(gt, 0.9), SPACING),
        "model_c": ProbVolume(probabilities(model_c_labels(), 0.8), SPACING),
        "model_d": ProbVolume(probabilities(vs_only_labels(), 0.9), SPACING),
        "gt": LabelVolume(gt, SPACING, K),
    }
    paths = {}
    for name, volume in volumes.items():
        paths[name] = os.path.join(directory, f"{name}.nii.gz")
        save_volume(volume, paths[name])
    return paths
