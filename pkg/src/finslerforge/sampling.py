"""Deterministic randomness and direction sampling.

All randomness in the engine flows from a single 64-bit seed through
counter-based Philox streams, so independent trials reproduce bit-identically
regardless of evaluation order.  Stream ids namespace the consumers.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import qmc

# stream ids; keep stable, they are part of reproducibility
STREAM_CLASSIFY = 1
STREAM_CERTIFY = 2
STREAM_HOMOGENEITY = 3
STREAM_VOLUME = 4
STREAM_RAUCH = 5
STREAM_VERIFY = 6
STREAM_UNIFORMITY = 7
STREAM_TRANSPORT = 8
STREAM_JACOBI = 9


def rng(seed, stream=0, counter=0):
    """Philox generator keyed by (seed, stream) at the given counter offset."""
    bit_gen = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))
    if counter:
        bit_gen = bit_gen.advance(counter)
    return np.random.Generator(bit_gen)


def sphere_directions(dim, count, seed, stream=STREAM_CERTIFY):
    """Low-discrepancy unit directions: scrambled-Sobol normals, normalized."""
    if dim == 1:
        signs = np.ones(count)
        signs[1::2] = -1.0
        return signs.reshape(-1, 1)
    engine = qmc.MultivariateNormalQMC(
        mean=np.zeros(dim), seed=int(seed) % (2**32) + stream)
    pts = engine.random(count)
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    # Sobol point at the origin would break normalization; nudge it
    bad = norms[:, 0] < 1e-12
    if bad.any():
        pts[bad] = 1.0 / np.sqrt(dim)
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
    return pts / norms


def random_directions(dim, count, generator):
    """Seeded gaussian directions, unit euclidean norm."""
    pts = generator.standard_normal((count, dim))
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return pts / norms
