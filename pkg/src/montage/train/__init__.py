"""Schedules, optimizer, checkpoints and the staged training loop."""
from .checkpoint import MAGIC, VERSION, Checkpoint, load_checkpoint, save_checkpoint
from .loop import LOG_HEADER, TrainConfig, load_params, load_sample, train
from .optim import AdamW, clip_grad_norm, global_norm
from .schedule import MixSchedule, StagePlan, StageSpec, lr_at, mix_weights
