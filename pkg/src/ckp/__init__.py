"""ckp: reproducible benchmarking workflows over a filesystem component store."""

__version__ = "0.1.0"
