"""
General utility functions used across the application.
"""

import time
from contextlib import contextmanager
from typing import Iterator, List

import numpy as np


def logit(p: float) -> float:
    """Inverse of the logistic sigmoid."""
    return float(np.log(p) - np.log1p(-p))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; every random draw in the package goes through one of these."""
    return np.random.default_rng(seed)


def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


@contextmanager
def stopwatch(timings: List[float]) -> Iterator[None]:
    """Append the elapsed wall time of the block (milliseconds) to `timings`."""
    start = time.perf_counter()
    try:
        yield
    finally:
        timings.append((time.perf_counter() - start) * 1000.0)
