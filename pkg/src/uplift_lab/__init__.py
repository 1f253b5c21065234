"""Uplift modeling for deposit upselling intensity."""

__version__ = "0.1.0"
