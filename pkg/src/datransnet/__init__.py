"""Infrared small-target segmentation with difference-attention transformer stages.

Everything runs on a small numpy autodiff core (:mod:`datransnet.tensor`).
"""

from .network import DATransNet, NetworkConfig, build
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = ["DATransNet", "NetworkConfig", "TrainConfig", "build", "fit", "__version__"]
