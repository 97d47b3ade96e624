"""Rayleigh fading, channel-inversion power control and AirComp aggregation.

Channel inversion makes every selected device's contribution arrive at the
server with the common amplitude ``sigma_t``, so the received superposition
is simulated directly in its post-processed form: the mean of the
transmitted updates plus Gaussian noise of per-entry standard deviation
``nu / (sqrt(gamma_thr) * |S|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAGNITUDE_FLOOR = 1e-3


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class PowerPolicy:
    noise_var: float
    snr_threshold: float

    def __post_init__(self):
        if self.noise_var <= 0 or self.snr_threshold <= 0:
            raise ValueError("noise variance and SNR threshold must be positive")

    @classmethod
    def from_db(cls, noise_var: float, snr_db: float) -> "PowerPolicy":
        return cls(noise_var, db_to_linear(snr_db))

    @property
    def scaling(self) -> float:
        """Squared power scaling factor, ``gamma_thr * sigma_0^2``."""
        return self.snr_threshold * self.noise_var


@dataclass(frozen=True)
class ChannelRealization:
    round: int
    gains: np.ndarray
    floor: float = MAGNITUDE_FLOOR

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.gains)

    @property
    def feasible(self) -> np.ndarray:
        """Devices whose gain is above the clamp floor and may transmit."""
        return self.magnitude > self.floor


@dataclass(frozen=True)
class AggregateResult:
    aggregate: np.ndarray
    noise_std: float
    noise_norm: float


def draw_channels(num_devices: int, round_idx: int, rng: np.random.Generator) -> ChannelRealization:
    """i.i.d. CN(0, 1) gains: real and imaginary parts each N(0, 1/2)."""
    parts = rng.normal(0.0, np.sqrt(0.5), size=(2, num_devices))
    return ChannelRealization(round_idx, parts[0] + 1j * parts[1])


def transmit_energy(policy: PowerPolicy, magnitude, floor: float = MAGNITUDE_FLOOR):
    """Channel-inversion energy ``gamma_thr * sigma_0^2 / |h|^2``.

    Magnitudes at or below ``floor`` are clamped to it; callers flag those
    devices as infeasible via :attr:`ChannelRealization.feasible`.
    """
    mag = np.maximum(np.asarray(magnitude, dtype=np.float64), floor)
    energy = policy.scaling / mag**2
    return float(energy) if energy.ndim == 0 else energy


def effective_noise_std(policy: PowerPolicy, norm_scale: float, num_selected: int) -> float:
    return norm_scale / (np.sqrt(policy.snr_threshold) * num_selected)


def aircomp_aggregate(
    updates: Sequence[np.ndarray] | np.ndarray,
    policy: PowerPolicy,
    norm_scale: float,
    rng: np.random.Generator,
    noiseless: bool = False,
) -> AggregateResult:
    """Post-processed AirComp estimate of the mean of ``updates``."""
    updates = np.asarray(updates, dtype=np.float64)
    if updates.ndim != 2 or updates.shape[0] == 0:
        raise ValueError("aggregation needs at least one selected update")
    k = updates.shape[0]
    mean = updates.sum(axis=0) / k
    if noiseless:
        return AggregateResult(mean, 0.0, 0.0)
    std = effective_noise_std(policy, norm_scale, k)
    noise = rng.normal(0.0, std, size=mean.shape)
    return AggregateResult(mean + noise, std, float(np.linalg.norm(noise)))


def received_snr(policy: PowerPolicy, signal_power: float = 1.0) -> float:
    """``sigma_t^2 * E||x||^2 / sigma_0^2`` under unit-power normalization."""
    return policy.scaling * signal_power / policy.noise_var
