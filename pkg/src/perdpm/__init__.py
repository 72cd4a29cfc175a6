"""Genetics-driven disease-progression modelling: a VAE over genotypes feeding a
cluster-attention deep state-space model, on a small numpy autodiff core."""

__version__ = "0.1.0"

from .evaluation import evaluate  # noqa: E402
from .model import ModelConfig, PerDPM  # noqa: E402
from .synthgen import GenConfig, generate  # noqa: E402
from .training import TrainConfig, fit  # noqa: E402

__all__ = ["GenConfig", "ModelConfig", "PerDPM", "TrainConfig", "evaluate", "fit", "generate",
           "__version__"]
