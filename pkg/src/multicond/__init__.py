"""Composable multi-condition connector with a toy diffusion pipeline.

Latent tokens pass through alternating text-resampler and gated extra-modality
blocks; independently trained gated branches can be re-assembled into one
multi-condition model without retraining.
"""

__version__ = "0.1.0"
