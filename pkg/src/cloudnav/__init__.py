"""Deterministic multi-robot exploration simulator with a cloud-offloaded navigation stack."""

__version__ = "0.1.0"
