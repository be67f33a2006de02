"""Native-resolution patch selection and fusion for infrared small target detection."""

from .lattice import LatticeSpec
from .model import ModelConfig, NaIRSTD, RelevanceNet

__all__ = ["LatticeSpec", "ModelConfig", "NaIRSTD", "RelevanceNet"]
__version__ = "0.1.0"
