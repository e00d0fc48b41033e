"""Desk-scale simulator for a DNPU feature front end feeding a crossbar CNN classifier."""
from __future__ import annotations

__version__ = "0.1.0"
