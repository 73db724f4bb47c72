"""Slot-based visual-primitive discovery with multiplex-consensus blocks for
generalized category discovery, evaluated on a synthetic compositional
token-grid benchmark."""

from . import autodiff, consensus, data, evalstack, model, pipeline, slots
from .autodiff import Tensor

__all__ = ["autodiff", "consensus", "data", "evalstack", "model", "pipeline",
           "slots", "Tensor"]

__version__ = "0.1.0"
