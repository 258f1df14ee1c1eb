"""Region-and-boundary attention guidance on a mock denoiser."""

__version__ = "0.1.0"
