"""Reference-canvas conditioning for a small audio-video diffusion transformer."""

__version__ = "0.1.0"
