"""High-order flux-reconstruction compressible-flow solver with
distributed mesh preparation and performance accounting."""

__version__ = "0.1.0"
