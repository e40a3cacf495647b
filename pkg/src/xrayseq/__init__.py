"""Chest disease classification from a patient's three most recent follow-up X-rays."""

__version__ = "0.1.0"
