"""Counter-based random streams keyed by (master seed, purpose, path index)."""

import zlib

import numpy as np


def stream(seed, purpose, index=0):
    """Philox generator for one (seed, purpose, index) triple.

    Streams for different purposes or indices never overlap, so adding a new
    experiment (purpose) leaves every existing stream untouched.
    """
    tag = zlib.crc32(purpose.encode("utf-8"))
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag, int(index)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def brownian_increments(seed, index, steps, d, dt, purpose="path"):
    """(steps, d) array of independent N(0, dt) increments."""
    return stream(seed, purpose, index).standard_normal((steps, d)) * np.sqrt(dt)


def refine_increments(increments, dt, seed, index, level=1):
    """Levy (Brownian bridge) halving: each increment split into two summing to it."""
    z = stream(seed, f"refine-{level}", index).standard_normal(increments.shape)
    half = 0.5 * increments
    dev = np.sqrt(dt / 4.0) * z
    fine = np.empty((2 * increments.shape[0],) + increments.shape[1:])
    fine[0::2] = half + dev
    fine[1::2] = half - dev
    return fine
