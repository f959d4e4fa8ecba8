"""semvox: map free-form text queries to synthesized 3D brain activation volumes.

The pipeline has two stages: a retrieval-grounded query refinement loop that
turns a raw text query into a cleaner semantic query, and a trained
text-to-volume generator that decodes it into a dense activation map on an
MNI-like grid. Supporting machinery covers coordinate-based target synthesis,
TF-IDF retrieval, LLM-backed text augmentation with an offline mock, training
with AdamW at dual learning rates, and a top-k% retention evaluation harness.
"""

__version__ = "0.1.0"

from semvox.volgrid import BrainVolume, GridSpec, gaussian_kernel_value, synthesize_target

__all__ = [
    "BrainVolume",
    "GridSpec",
    "gaussian_kernel_value",
    "synthesize_target",
    "__version__",
]
