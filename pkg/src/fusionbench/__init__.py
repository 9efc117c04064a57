"""Frozen video backbone + cross-attention stream fusion, trained with a staged recipe."""

__version__ = "0.1.0"
