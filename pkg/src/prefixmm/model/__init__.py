"""Cross-modal encoder-decoder network."""

from .config import VISUAL_VARIANTS, ModelConfig, parameter_count
from .network import CrossModalModel, EncoderState, interpolate_positions

__all__ = [
    "CrossModalModel",
    "EncoderState",
    "ModelConfig",
    "VISUAL_VARIANTS",
    "interpolate_positions",
    "parameter_count",
]
