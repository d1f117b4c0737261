"""bdakit: desk-scale bitemporal building damage assessment.

A numpy-backed library covering the full pipeline: polygon-label ingestion
and mask rasterization, a compact siamese localization/damage network with
optional gated skip connections and pre/post feature alignment, imbalance-
aware training objectives, xView2-style pixel-wise scoring, and a
deterministic trainer. See README.md for a tour and INTERFACES.md for the
CLI and file-format contracts.
"""

from .autodiff import (
    ConfigError,
    ContractError,
    Parameter,
    Tensor,
)
from .rng import Rng

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "Parameter",
    "Rng",
    "Tensor",
    "__version__",
]
