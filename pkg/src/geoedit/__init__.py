"""Training-free geometric image editing on a self-contained diffusion backbone."""

__version__ = "0.1.0"
