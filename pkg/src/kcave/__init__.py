"""Lattice LP bounds for calls on leveraged funds via K-cave barrier embeddings."""

from __future__ import annotations

__version__ = "0.1.0"
