"""Zero-shot CT super-resolution with diffusion-upsampled projections and signed Gaussian splatting."""

__version__ = "0.1.0"
