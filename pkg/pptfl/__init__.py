"""Masked peer-to-peer model aggregation and a seeded simulator around it."""

__version__ = "0.1.0"
