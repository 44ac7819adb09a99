"""Environment-conditioned motion diffusion with simulator-corrected adapters."""

__version__ = "0.1.0"
