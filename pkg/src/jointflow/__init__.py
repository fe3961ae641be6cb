"""Joint RGB / disparity flow matching with a LoRA-adapted DiT on a procedural disk world."""

from .flow import TimestepPair, VelocityPair, euler_sample, jcfm_loss
from .model import BaseDiT, JointModel, ModelConfig
from .tasks import Task, TaskMode, run_task, tiled_sample

__all__ = [
    "BaseDiT",
    "JointModel",
    "ModelConfig",
    "Task",
    "TaskMode",
    "TimestepPair",
    "VelocityPair",
    "euler_sample",
    "jcfm_loss",
    "run_task",
    "tiled_sample",
]

__version__ = "0.1.0"
