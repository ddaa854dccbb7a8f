"""Patient-similarity graph + state-space model for ICU length-of-stay regression."""

__version__ = "0.1.0"
