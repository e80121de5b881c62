"""Multi-task self-supervised video pre-training.

A shared low-level 3D-conv encoder feeds two task-dependent branches: a
parsing branch distilled from a segmentation teacher, and a contrastive
branch trained on playback-speed (motion) and instance (appearance) signals.
Downstream quality is measured with a linear probe; CAM overlays visualize
where the representation looks.
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    ModelError,
    MtvsslError,
    TeacherError,
    TrainingDivergedError,
)

__all__ = [
    "__version__",
    "MtvsslError",
    "ConfigError",
    "DataError",
    "ModelError",
    "TeacherError",
    "CheckpointError",
    "TrainingDivergedError",
]
