"""Layout-aware transformer encoder with polar-coordinate relative attention.

Submodules: geometry (relative polar bins), tensor (float64 autodiff core),
model (encoder and task heads), data (documents, vocab, metrics, synthetic
corpora), training (masking, optimizer, loops), cli (batch entry points).
"""

__version__ = "0.1.0"

from .geometry import BBox, BinningConfig, Center, PolarBinPair  # noqa: F401
from .model import ModelConfig, desk_config, paper_config  # noqa: F401
from .tensor import Tape, Tensor, backward, grad_check  # noqa: F401
