"""Deterministic seed derivation.

Every run is driven by one master seed. Sub-generators (parameter init,
label shuffle, batch order, attack random starts) get their own seeds via
``derive_seed(master, label)`` so that adding a consumer never perturbs the
streams of existing ones.

The split function is fixed: the label is hashed with SHA-256 and the first
8 bytes (little-endian) are combined with the master seed through
``numpy.random.SeedSequence``.
"""

import hashlib

import numpy as np

__all__ = ["derive_seed", "derive_rng"]


def _label_entropy(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master: int, label: str) -> int:
    """Derive a 64-bit child seed from a master seed and a purpose label."""
    ss = np.random.SeedSequence([int(master), _label_entropy(label)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(master: int, label: str) -> np.random.Generator:
    """Generator seeded by ``derive_seed(master, label)``."""
    return np.random.default_rng(derive_seed(master, label))
