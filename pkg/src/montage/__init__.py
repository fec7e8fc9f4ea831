"""Many-in/many-out image generation with a flow-matching diffusion transformer."""

__version__ = "0.1.0"
