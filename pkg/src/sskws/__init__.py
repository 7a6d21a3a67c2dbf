"""Self-supervised pretraining for small transformer keyword spotters.

The package covers the full pipeline: MFCC feature extraction, a ViT-style
transformer acoustic model over MFCC frames, student-teacher masked-prediction
pretraining with an EMA teacher, supervised baseline/fine-tune training, and
evaluation, all behind the ``sskws`` CLI.
"""

__version__ = "0.1.0"

from .audio import AudioClip, MfccConfig, SpecAugmentParams, compute_mfcc, load_clip, spec_augment
from .model import KwtConfig, count_parameters, init_params, kwt_config
from .data2vec import TauSchedule, TeacherState, build_targets, ema_update, sample_mask, tau_at

__all__ = [
    "AudioClip",
    "MfccConfig",
    "SpecAugmentParams",
    "compute_mfcc",
    "load_clip",
    "spec_augment",
    "KwtConfig",
    "kwt_config",
    "count_parameters",
    "init_params",
    "TauSchedule",
    "TeacherState",
    "sample_mask",
    "tau_at",
    "ema_update",
    "build_targets",
]
