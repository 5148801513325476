"""Detection of obfuscated command lines with a small transformer."""

__version__ = "0.1.0"
