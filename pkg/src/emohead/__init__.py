"""Emotional talking-head toy pipeline.

FACS-grounded prompt decomposition, a conditional noise predictor with
reference/text/audio/temporal attention, and progressive guidance over the
denoising trajectory, all sized to train and verify on a laptop CPU.
"""

from .config import RunConfig, load_run_config
from .cot import PromptBundle, run_cot, validate_bundle
from .facs import EMOTION_LABELS, FacsCatalog
from .guidance import (
    GuidanceSchedule,
    adjust_text_embedding,
    build_schedule,
    calculate_alpha,
    embedding_for_step,
)

__all__ = [
    "EMOTION_LABELS",
    "FacsCatalog",
    "GuidanceSchedule",
    "PromptBundle",
    "RunConfig",
    "adjust_text_embedding",
    "build_schedule",
    "calculate_alpha",
    "embedding_for_step",
    "load_run_config",
    "run_cot",
    "validate_bundle",
]

__version__ = "0.1.0"
