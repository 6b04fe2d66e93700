"""Multi-view query consolidation for a toy diffusion denoiser.

A neural query field is trained on self-attention queries extracted from
per-view denoising trajectories; its renders are fed back as soft guidance on
the latents so the views agree on a single underlying 3D structure.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DomainError, EvaluationError, FormatError, NumericError,
                     QConsolError, TrainingError)

__all__ = ["ConfigError", "DomainError", "EvaluationError", "FormatError", "NumericError",
           "QConsolError", "TrainingError", "__version__"]
