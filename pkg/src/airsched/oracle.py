"""Exhaustive subset search used to check the scheduler."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from .scheduler import select_lyapunov

MAX_DEVICES = 12


def _subset_masks(n: int) -> np.ndarray:
    codes = np.arange(1, 1 << n)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def subset_objective(mask, quality, alpha, delta2, snr_threshold, G2, batch_size) -> float:
    """``alpha * U(|S|) - sum_{n in S} I_n`` written out directly."""
    size = int(np.sum(mask))
    u = delta2 / (snr_threshold * size * size) + G2 / (size * batch_size)
    return alpha * u - float(np.sum(np.asarray(quality)[np.asarray(mask, dtype=bool)]))


def exhaustive_min(quality, alpha, delta2, snr_threshold, G2, batch_size, size=None):
    """Best non-empty subset (optionally of a fixed size) by full enumeration.

    Returns ``(objective, mask)``.
    """
    quality = np.asarray(quality, dtype=np.float64)
    n = quality.size
    if n > MAX_DEVICES:
        raise ValueError(f"exhaustive search is limited to N <= {MAX_DEVICES}")
    masks = _subset_masks(n)
    sizes = masks.sum(axis=1)
    if size is not None:
        masks, sizes = masks[sizes == size], sizes[sizes == size]
    u = delta2 / (snr_threshold * sizes.astype(float) ** 2) + G2 / (sizes * batch_size)
    values = alpha * u - masks.astype(float) @ quality
    best = int(np.argmin(values))
    return float(values[best]), masks[best]


@dataclass
class OracleReport:
    instances: int
    agreements: int
    seconds: float

    @property
    def rate(self) -> float:
        return self.agreements / self.instances if self.instances else 1.0


def random_instance(gen: np.random.Generator, n: int):
    quality = gen.uniform(-1.0, 1.0, n)
    alpha = float(gen.choice([0.0, 1.0, 5e3]))
    delta2 = float(gen.choice([0.0, 1.0]))
    G2 = float(gen.choice([0.0, 1.0]))
    return quality, alpha, delta2, G2


def check_scheduler(n: int, instances: int, seed: int = 0, snr_threshold: float = 1.0,
                    batch_size: int = 10, tol: float = 1e-9) -> OracleReport:
    """Compare the sorted-prefix scheduler against enumeration on random instances."""
    if n < 1 or n > MAX_DEVICES:
        raise ValueError(f"N must be in [1, {MAX_DEVICES}]")
    gen = rngs.stream(seed, rngs.ORACLE, n)
    start = time.perf_counter()
    agree = 0
    for _ in range(instances):
        quality, alpha, delta2, G2 = random_instance(gen, n)
        best, _ = exhaustive_min(quality, alpha, delta2, snr_threshold, G2, batch_size)
        decision = select_lyapunov(quality, alpha, delta2, snr_threshold, G2, batch_size)
        got = subset_objective(decision.selected, quality, alpha, delta2, snr_threshold, G2, batch_size)
        if abs(got - best) <= tol * max(1.0, abs(best)):
            agree += 1
    return OracleReport(instances, agree, time.perf_counter() - start)
