"""Multimodal masked pretraining for 3D volumes paired with text reports.

Submodules:
    tensor    autodiff tensor core and ops
    rng       deterministic PCG32 streams
    volume    volume container, preprocessing, patch geometry, masks
    text      report parsing, tokenization, token masking
    model     transformer encoders/decoders and fusion
    losses    reconstruction, alignment and report-modeling objectives
    synth     synthetic paired-data generator with ground truth
    train     AdamW, training loop, checkpoints
    evaluate  linear probe, AUC, heatmaps, gradient fidelity
    cli       command-line interface
"""

from .rng import Rng
from .tensor import Tensor, backward, no_grad, set_default_dtype, use_dtype

__version__ = "0.1.0"

__all__ = [
    "Rng", "Tensor", "backward", "no_grad", "set_default_dtype", "use_dtype",
    "__version__",
]
