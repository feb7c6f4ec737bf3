"""Named random sub-streams derived from a single master seed.

Every stochastic stage asks for its own stream by name (``"bootstrap/7"``,
``"draw/3"``), so inserting a new stage never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(master)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, name))
