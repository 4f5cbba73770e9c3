"""Age-domain voice conversion and audio kinship verification."""

__version__ = "0.1.0"
