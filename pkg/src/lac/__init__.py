"""Linear attention conformer: encoder-decoder speech recogniser on a small f64 autodiff core."""

from .model import ModelConfig, build, count_params, count_params_config, forward, load, save

__all__ = ["ModelConfig", "build", "count_params", "count_params_config", "forward", "load", "save"]
__version__ = "0.1.0"
