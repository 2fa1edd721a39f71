"""Video selective-scan blocks and low-rank bypass attention for a toy video diffusion model."""

__version__ = "0.1.0"
