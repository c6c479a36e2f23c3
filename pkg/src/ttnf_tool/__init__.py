"""TTNF Tool - campos neurais em tensor-train: amostragem, denoising e renderização."""

__version__ = "0.1.0"
