"""Configuration, file formats and the experiment commands behind the CLI."""

from .config import ExperimentConfig, default_config
from .pipeline import cmd_finetune, cmd_sample_pretrained, cmd_sweep, cmd_validate

__all__ = ["ExperimentConfig", "default_config", "cmd_finetune", "cmd_sample_pretrained", "cmd_sweep",
           "cmd_validate"]
