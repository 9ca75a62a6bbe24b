import os
from dataclasses import dataclass, field, fields
from typing import List, Optional

import yaml

from utils.atomic_write import check_output_path
from utils.confident_fusion import DEFAULT_CHUNK_VOXELS
from utils.ema import DEFAULT_DECAY
from utils.errors import ValidationError, VolumeFormatError, VolumeIOError
from utils.losses import DEFAULT_EPS
from utils.postprocess import DEFAULT_COCHLEA_LABEL, DEFAULT_VS_LABEL, DEFAULT_Z_MAX
from utils.volume_core import DEFAULT_NUM_CLASSES

DEFAULT_TARGET_SPACING = (0.46875, 0.468975, 1.5)


def default_threads():
    try:
        return max(1, int(os.getenv("LABELFUSION_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class RunConfig:
    """Everything one subcommand run needs. Defaults follow the challenge conventions."""

    subcommand: str = ""
    inputs: List[str] = field(default_factory=list)
    output: Optional[str] = None
    vs_label: int = DEFAULT_VS_LABEL
    cochlea_label: int = DEFAULT_COCHLEA_LABEL
    num_classes: int = DEFAULT_NUM_CLASSES
    class_label: Optional[int] = None
    z_max: float = DEFAULT_Z_MAX
    eps: float = DEFAULT_EPS
    decay: float = DEFAULT_DECAY
    seed: int = 0
    threads: int = field(default_factory=default_threads)
    chunk_voxels: int = DEFAULT_CHUNK_VOXELS

    # fuse / postprocess
    postprocess: bool = False
    joint_json: Optional[str] = None
    stats: bool = False
    # eval
    summary_json: Optional[str] = None
    # losses
    label: Optional[str] = None
    grad_check: bool = False
    grad_trials: int = 100
    mae: bool = False
    # preprocess
    kind: str = "scalar"
    spacing: tuple = DEFAULT_TARGET_SPACING
    flip: bool = False

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}

    def validate(self):
        """Reject bad settings before any volume is touched."""
        for path in self.inputs + ([self.label] if self.label else []):
            if not os.path.exists(path):
                raise VolumeIOError(f"{path}: no such file or directory")
        for path in (self.output, self.joint_json, self.summary_json):
            if path:
                check_output_path(path)
        if self.num_classes < 1 or self.num_classes > 255:
            raise ValidationError(f"--num-classes must be within 1..255, got {self.num_classes}")
        for name in ("vs_label", "cochlea_label") + (("class_label",) if self.class_label is not None else ()):
            value = getattr(self, name)
            if not 0 <= value < self.num_classes:
                raise ValidationError(f"--{name.replace('_', '-')} {value} must be within 0..{self.num_classes - 1}")
        if self.vs_label == self.cochlea_label:
            raise ValidationError("--vs-label and --cochlea-label must differ")
        if not 0.0 <= self.decay <= 1.0:
            raise ValidationError(f"--decay must lie within [0, 1], got {self.decay}")
        if self.z_max < 0:
            raise ValidationError(f"--z-max must be non-negative, got {self.z_max}")
        if self.eps < 0:
            raise ValidationError(f"--eps must be non-negative, got {self.eps}")
        if self.threads < 1:
            raise ValidationError(f"--threads must be at least 1, got {self.threads}")
        if self.chunk_voxels < 1:
            raise ValidationError(f"--chunk-voxels must be at least 1, got {self.chunk_voxels}")
        if self.grad_trials < 1:
            raise ValidationError(f"--grad-trials must be at least 1, got {self.grad_trials}")
        return self


def load_config_file(path):
    """Read RunConfig defaults from a YAML mapping; unknown keys are an error."""
    try:
        with open(path) as f:
            values = yaml.safe_load(f) or {}
    except OSError as exc:
        raise VolumeIOError(f"{path}: {exc.strerror or exc}") from exc
    except yaml.YAMLError as exc:
        raise VolumeFormatError(f"{path}: invalid YAML ({exc})") from exc
    if not isinstance(values, dict):
        raise VolumeFormatError(f"{path}: expected a mapping of settings")
    values = {str(k).replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - RunConfig.field_names())
    if unknown:
        raise ValidationError(f"{path}: unknown settings {unknown}")
    return values
