"""Desk-scale three-stage OCR pipeline with slimming strategies."""

__version__ = "0.1.0"
