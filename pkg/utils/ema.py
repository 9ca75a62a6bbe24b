"""Exponential-moving-average teacher update over flat parameter vectors.

Parameter files are raw: a little-endian uint64 count followed by that many
little-endian float32 values.
"""
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from utils.atomic_write import write_bytes
from utils.errors import ShapeMismatchError, ValidationError, VolumeFormatError, VolumeIOError

logger = logging.getLogger(__name__)

DEFAULT_DECAY = 0.99
_COUNT = struct.Struct("<Q")
_VALUE_DTYPE = np.dtype("<f4")


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if values.size < 1:
            raise ValidationError("Parameter vector must hold at least one value")
        if not np.all(np.isfinite(values)):
            raise ValidationError("Parameter vector contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self):
        return self.values.size


def _check_decay(decay):
    if not 0.0 <= decay <= 1.0:
        raise ValidationError(f"EMA decay must lie within [0, 1], got {decay}")


def ema_update(teacher, student, decay=DEFAULT_DECAY):
    """``decay * teacher + (1 - decay) * student``, coordinate-wise."""
    _check_decay(decay)
    if teacher.n != student.n:
        raise ShapeMismatchError(f"teacher has {teacher.n} parameters but student has {student.n}")
    t, s = teacher.values, student.values
    out = decay * t + (1.0 - decay) * s
    # Rounding must not push a coordinate outside the teacher/student interval.
    out = np.clip(out, np.minimum(t, s), np.maximum(t, s))
    return ParamVector(out)


def ema_run(teacher, students, decay=DEFAULT_DECAY):
    """Left fold of ``ema_update`` over a sequence of student snapshots."""
    _check_decay(decay)
    for student in students:
        teacher = ema_update(teacher, student, decay)
    return teacher


def load_params(path):
    if not os.path.isfile(path):
        raise VolumeIOError(f"{path}: no such file")
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as exc:
        raise VolumeIOError(f"{path}: {exc.strerror or exc}") from exc
    if len(payload) < _COUNT.size:
        raise VolumeFormatError(f"{path}: parameter file shorter than its length prefix")
    (count,) = _COUNT.unpack_from(payload)
    expected = _COUNT.size + count * _VALUE_DTYPE.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: length prefix says {count} values but file holds {len(payload)} bytes")
    values = np.frombuffer(payload, dtype=_VALUE_DTYPE, offset=_COUNT.size)
    try:
        return ParamVector(values)
    except ValidationError as exc:
        raise VolumeFormatError(f"{path}: {exc}") from exc


def params_to_bytes(params):
    return _COUNT.pack(params.n) + params.values.astype(_VALUE_DTYPE).tobytes()


def save_params(params, path):
    write_bytes(path, params_to_bytes(params))
    logger.debug("Saved %d parameters to %s", params.n, path)


if __name__ == "__main__":
    teacher = ParamVector([0.0, 1.0])
    student = ParamVector([1.0, 1.0])
    print(f"One step: {ema_update(teacher, student).values.tolist()}")
    print(f"100 steps: {ema_run(teacher, [student] * 100).values.tolist()}")
