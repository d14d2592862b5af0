from __future__ import annotations

from multiprocessing import Pool
from typing import Any, Callable, Iterable

import numpy as np


UINT64_LIMIT = 2**64


def wrap_angle(theta):
    """Wrap angle(s) into the half-open interval (-pi, pi].

    Scalars already inside the interval are returned untouched, so fixed points stay bit-exact.
    """
    if np.ndim(theta) == 0:
        theta = float(theta)
        if -np.pi < theta <= np.pi:
            return theta
        return float(np.pi - np.mod(np.pi - theta, 2 * np.pi))

    theta = np.asarray(theta, dtype=float)
    inside = (theta > -np.pi) & (theta <= np.pi)
    return np.where(inside, theta, np.pi - np.mod(np.pi - theta, 2 * np.pi))


def circular_distance(theta_a, theta_b):
    """Geodesic distance between angles on the circle, in [0, pi]."""
    return np.abs(wrap_angle(np.asarray(theta_a, dtype=float) - np.asarray(theta_b, dtype=float)))


def make_rng(seed: None | int, stream: None | int = None) -> np.random.Generator:
    """Build a counter-based generator for one random stream.

    Stream ``k`` of master seed ``s`` is ``SeedSequence(s, spawn_key=(k,))`` fed to Philox, so an
    ensemble member draws the same numbers no matter which worker runs it.

    Args:
        seed: Master seed (unsigned 64-bit) or None for fresh OS entropy.
        stream: Index of the stream derived from the master seed.

    Returns:
        A numpy Generator on a Philox bit generator.
    """
    spawn_key = () if stream is None else (int(stream),)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=spawn_key)))


def fan_out(func: Callable[[Any], Any], items: Iterable[Any], workers: int = 1) -> list[Any]:
    """Map ``func`` over ``items``, on a process pool when more than one worker is requested.

    Results always come back in input order.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with Pool(processes=min(workers, len(items))) as pool:
        return pool.map(func, items)
