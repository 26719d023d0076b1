"""Online SGD dynamics of shallow autoencoders."""

__version__ = "0.1.0"
