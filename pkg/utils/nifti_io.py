"""NIfTI-1 reading and writing for the three volume kinds.

Only ``dim``, ``pixdim``, ``datatype`` and the data block matter here; the
orientation (qform/sform) is written as a plain scaling and ignored on read.
"""
import gzip
import logging
import os
import zlib

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError

from utils.atomic_write import atomic_output
from utils.errors import ValidationError, VolumeFormatError, VolumeIOError
from utils.volume_core import (
    DEFAULT_NUM_CLASSES,
    LabelVolume,
    ProbVolume,
    ScalarVolume,
    Spacing,
    renormalize_probabilities,
)

logger = logging.getLogger(__name__)

LABEL_DTYPES = (np.uint8, np.int16, np.int32)
PROB_DTYPES = (np.float32, np.float64)
KINDS = ("label", "prob", "scalar")


def nifti_suffix(path):
    name = os.fspath(path)
    if name.endswith(".nii.gz"):
        return ".nii.gz"
    if name.endswith(".nii"):
        return ".nii"
    raise VolumeIOError(f"{name}: expected a .nii or .nii.gz file name")


def case_name(path):
    """File name without the NIfTI extension."""
    name = os.path.basename(os.fspath(path))
    return name[: -len(nifti_suffix(name))]


def _read(path):
    if not os.path.isfile(path):
        raise VolumeIOError(f"{path}: no such file")
    try:
        img = nib.load(os.fspath(path))
        if not isinstance(img, nib.Nifti1Image):
            raise VolumeFormatError(f"{path}: not a NIfTI-1 image ({type(img).__name__})")
        header = img.header
        if header.endianness != "<":
            raise VolumeFormatError(f"{path}: only little-endian NIfTI files are supported")
        data = np.asanyarray(img.dataobj)
    except (ImageFileError, HeaderDataError, EOFError, zlib.error, gzip.BadGzipFile, ValueError) as exc:
        raise VolumeFormatError(f"{path}: malformed NIfTI file ({exc})") from exc
    except PermissionError as exc:
        raise VolumeIOError(f"{path}: {exc}") from exc
    except OSError as exc:
        # nibabel reports short data blocks as plain OSError
        raise VolumeFormatError(f"{path}: truncated NIfTI file ({exc})") from exc
    zooms = header.get_zooms()
    try:
        spacing = Spacing.of(zooms[:3])
    except (ValidationError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: bad pixdim {tuple(zooms)} ({exc})") from exc
    return data, header.get_data_dtype(), spacing


def load_volume(path, kind, k=DEFAULT_NUM_CLASSES):
    """Read a LabelVolume, ProbVolume or ScalarVolume from a NIfTI-1 file."""
    if kind not in KINDS:
        raise ValidationError(f"Unknown volume kind {kind!r}, expected one of {KINDS}")
    data, dtype, spacing = _read(path)

    if kind == "label":
        if data.ndim != 3:
            raise VolumeFormatError(f"{path}: label volumes must be 3D, got {data.ndim}D")
        if dtype.type not in LABEL_DTYPES:
            raise VolumeFormatError(f"{path}: unsupported label datatype {dtype}")
        if data.min() < 0 or data.max() >= k:
            raise VolumeFormatError(
                f"{path}: label values {int(data.min())}..{int(data.max())} out of range for k={k}"
            )
        try:
            return LabelVolume(data, spacing, k)
        except ValidationError as exc:
            raise VolumeFormatError(f"{path}: {exc}") from exc

    if kind == "prob":
        if data.ndim != 4:
            raise VolumeFormatError(f"{path}: probability volumes must be 4D, got {data.ndim}D")
        if dtype.type not in PROB_DTYPES:
            raise VolumeFormatError(f"{path}: unsupported probability datatype {dtype}")
        data = np.asarray(data, dtype=dtype)
        try:
            data = renormalize_probabilities(data)
            return ProbVolume(data, spacing)
        except ValidationError as exc:
            raise VolumeFormatError(f"{path}: {exc}") from exc

    if data.ndim != 3:
        raise VolumeFormatError(f"{path}: scalar volumes must be 3D, got {data.ndim}D")
    if dtype.kind not in "iuf":
        raise VolumeFormatError(f"{path}: unsupported scalar datatype {dtype}")
    try:
        return ScalarVolume(np.asarray(data), spacing)
    except ValidationError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc


def _to_image(vol):
    if isinstance(vol, LabelVolume):
        data, zooms = vol.data.astype(np.uint8), vol.spacing.as_tuple()
    elif isinstance(vol, ProbVolume):
        data, zooms = vol.data.astype(np.float32), vol.spacing.as_tuple() + (1.0,)
    elif isinstance(vol, ScalarVolume):
        data, zooms = vol.data, vol.spacing.as_tuple()
    else:
        raise ValidationError(f"Cannot save {type(vol).__name__} as NIfTI")
    affine = np.diag(list(vol.spacing.as_tuple()) + [1.0])
    img = nib.Nifti1Image(np.asarray(data), affine)
    img.header.set_data_dtype(data.dtype)
    img.header.set_zooms(zooms)
    return img


def save_volume(vol, path):
    """Write any volume type to ``path`` (.nii or .nii.gz), atomically."""
    img = _to_image(vol)
    with atomic_output(path, suffix=nifti_suffix(path)) as tmp_path:
        nib.save(img, tmp_path)
    logger.debug("Saved %s %s to %s", type(vol).__name__, tuple(vol.data.shape), path)


if __name__ == "__main__":
    import tempfile

    labels = LabelVolume(np.zeros((4, 4, 2), dtype=np.uint8), Spacing(0.46875, 0.46875, 1.5))
    with tempfile.TemporaryDirectory() as tmp:
        target = os.path.join(tmp, "labels.nii.gz")
        save_volume(labels, target)
        back = load_volume(target, "label")
        print(f"Round trip dims={back.dims} spacing={back.spacing.as_tuple()}")
