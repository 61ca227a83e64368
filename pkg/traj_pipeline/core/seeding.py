"""Named random-stream derivation.

Every random draw in the pipeline comes from ``derive_rng(seed, component, index)``
so a trial or grid point gets the same stream no matter which worker runs it.
"""
import zlib

import numpy as np


def derive_seed_sequence(seed: int, component: str, index: int = 0) -> np.random.SeedSequence:
    """Build the ``SeedSequence`` for one named component/index pair."""
    return np.random.SeedSequence([int(seed), zlib.crc32(component.encode("utf-8")), int(index)])


def derive_rng(seed: int, component: str, index: int = 0) -> np.random.Generator:
    """
    Derive an independent generator for a named pipeline component.

    Args:
        seed: Master seed (e.g. the CLI ``--seed``)
        component: Stable component name (e.g. "trial-split", "dpgp-fit")
        index: Trial / grid-point / restart index

    Returns:
        A fresh ``numpy.random.Generator``
    """
    return np.random.default_rng(derive_seed_sequence(seed, component, index))


def rng_seed(rng: np.random.Generator) -> int:
    """Draw a 32-bit integer seed from ``rng`` for libraries that want an int."""
    return int(rng.integers(0, 2**31 - 1))
