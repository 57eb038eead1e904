"""HoVer-Transformer: anatomy-aware hybrid CNN-transformer classifier for layered images."""

__version__ = "0.1.0"
