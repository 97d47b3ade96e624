"""Device quality indicators, drift-plus-penalty selection and baseline policies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROPOSED = "proposed"
BENCHMARK = "benchmark"
BASELINES = ("baseline1", "baseline2", "baseline3", "baseline4")
POLICIES = (PROPOSED, BENCHMARK) + BASELINES


@dataclass(frozen=True)
class DeviceReport:
    v_dsi: float
    v_csi: float
    energy: float


@dataclass(frozen=True)
class QualityWeights:
    rho1: float = 0.5
    lambda_e: float = 0.5
    alpha: float = 5e3

    def __post_init__(self):
        if not (0.0 <= self.rho1 <= 1.0 and 0.0 <= self.lambda_e <= 1.0):
            raise ValueError("rho1 and lambda_e must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    @property
    def rho2(self) -> float:
        return 1.0 - self.rho1

    @property
    def lambda_v(self) -> float:
        return 1.0 - self.lambda_e


@dataclass
class ScheduleDecision:
    selected: np.ndarray
    k_star: int
    penalties: np.ndarray = field(default_factory=lambda: np.empty(0))
    quality: np.ndarray = field(default_factory=lambda: np.empty(0))
    noiseless: bool = False

    @property
    def selected_ids(self) -> list[int]:
        return np.flatnonzero(self.selected).tolist()

    @property
    def penalty_at_k_star(self) -> float:
        if self.k_star == 0 or self.penalties.size == 0:
            return float("nan")
        return float(self.penalties[self.k_star - 1])


def device_value(report: DeviceReport, weights: QualityWeights) -> float:
    return weights.rho1 * report.v_dsi + weights.rho2 * report.v_csi


def device_quality(report: DeviceReport, weights: QualityWeights) -> float:
    return weights.lambda_v * device_value(report, weights) - weights.lambda_e * report.energy


def quality_vector(reports, weights: QualityWeights) -> np.ndarray:
    return np.array([device_quality(r, weights) for r in reports], dtype=np.float64)


def normalize_reports(grad_norms_sq, magnitudes, energies=None, g_max=None, h_max=None) -> list[DeviceReport]:
    """Scale update significance and channel magnitude into [0, 1].

    By default the maxima are taken over this round's devices; pass ``g_max``
    / ``h_max`` to normalize against a longer horizon.  A zero maximum yields
    all-zero indicators.
    """
    gn = np.asarray(grad_norms_sq, dtype=np.float64)
    hm = np.asarray(magnitudes, dtype=np.float64)
    if gn.size == 0 or gn.shape != hm.shape:
        raise ValueError("need matching, non-empty gradient-norm and magnitude arrays")
    if np.any(gn < 0) or np.any(hm < 0):
        raise ValueError("raw indicator values must be non-negative")
    g_max = gn.max() if g_max is None else g_max
    h_max = hm.max() if h_max is None else h_max
    v_dsi = gn / g_max if g_max > 0 else np.zeros_like(gn)
    v_csi = hm / h_max if h_max > 0 else np.zeros_like(hm)
    e = np.zeros_like(gn) if energies is None else np.asarray(energies, dtype=np.float64)
    return [DeviceReport(float(a), float(b), float(c)) for a, b, c in zip(v_dsi, v_csi, e)]


def penalty_term(k, delta2: float, snr_threshold: float, G2: float, batch_size: int):
    """Noise-plus-sampling penalty ``delta^2 / (gamma k^2) + G^2 / (k |D^m|)``."""
    k_arr = np.asarray(k, dtype=np.float64)
    if np.any(k_arr <= 0):
        raise ValueError("k must be >= 1")
    if snr_threshold <= 0 or batch_size < 1:
        raise ValueError("snr_threshold must be positive and batch_size >= 1")
    u = delta2 / (snr_threshold * k_arr**2) + G2 / (k_arr * batch_size)
    return float(u) if u.ndim == 0 else u


def rank_devices(quality: np.ndarray) -> np.ndarray:
    """Device ids ordered by quality descending, id ascending on ties."""
    quality = np.asarray(quality, dtype=np.float64)
    return np.lexsort((np.arange(quality.size), -quality))


def select_lyapunov(
    quality,
    alpha: float,
    delta2: float,
    snr_threshold: float,
    G2: float,
    batch_size: int,
    eligible=None,
) -> ScheduleDecision:
    """Pick the top-``k*`` devices minimizing ``alpha * U(k) - sum of top-k quality``.

    ``quality`` may be a sequence of :class:`DeviceReport`-derived qualities.
    Devices outside ``eligible`` are never ranked; with nobody eligible the
    selection is empty.
    """
    quality = np.asarray(quality, dtype=np.float64)
    n = quality.size
    eligible = np.ones(n, dtype=bool) if eligible is None else np.asarray(eligible, dtype=bool)
    candidates = np.flatnonzero(eligible)
    selected = np.zeros(n, dtype=bool)
    if candidates.size == 0:
        return ScheduleDecision(selected, 0, np.empty(0), quality)
    order = candidates[rank_devices(quality[candidates])]
    ks = np.arange(1, candidates.size + 1)
    penalties = alpha * penalty_term(ks, delta2, snr_threshold, G2, batch_size) - np.cumsum(quality[order])
    k_star = int(np.argmin(penalties)) + 1
    selected[order[:k_star]] = True
    return ScheduleDecision(selected, k_star, penalties, quality)


def select_baseline(
    policy_id: str,
    grad_norms_sq,
    magnitudes,
    rng: np.random.Generator | None = None,
    *,
    k: int = 30,
    h_threshold: float = 1.0,
    k_c: int = 50,
    c: float = 1.0,
    p_on: float = 4.0,
    probabilistic: bool = False,
    eligible=None,
) -> ScheduleDecision:
    """Comparison policies.

    ``baseline1`` picks ``k`` devices uniformly at random; ``baseline2`` keeps
    every device with ``|h| >= h_threshold``; ``baseline3`` takes the ``k_c``
    strongest channels and then the ``k`` largest update norms among them;
    ``baseline4`` activates a device when
    ``||g~||^2 |h|^2 / (|h|^2 + c) >= c * p_on`` (with ``probabilistic`` the
    activation then succeeds with probability ``(|h| / (c + |h|^2))^2``);
    ``benchmark`` selects every device and flags noiseless aggregation.
    """
    gn = np.asarray(grad_norms_sq, dtype=np.float64)
    hm = np.asarray(magnitudes, dtype=np.float64)
    n = gn.size
    eligible = np.ones(n, dtype=bool) if eligible is None else np.asarray(eligible, dtype=bool)
    selected = np.zeros(n, dtype=bool)
    noiseless = False

    if policy_id == BENCHMARK:
        selected[:] = True
        noiseless = True
    elif policy_id == "baseline1":
        if k > n:
            raise ValueError(f"baseline1 needs k <= N, got k={k}, N={n}")
        if rng is None:
            raise ValueError("baseline1 needs a random generator")
        selected[rng.choice(n, size=k, replace=False)] = True
        selected &= eligible
    elif policy_id == "baseline2":
        selected = (hm >= h_threshold) & eligible
    elif policy_id == "baseline3":
        cand = np.flatnonzero(eligible)
        strongest = cand[np.lexsort((cand, -hm[cand]))][:k_c]
        chosen = strongest[np.lexsort((strongest, -gn[strongest]))][:k]
        selected[chosen] = True
    elif policy_id == "baseline4":
        h2 = hm**2
        selected = (gn * h2 / (h2 + c) >= c * p_on) & eligible
        if probabilistic:
            if rng is None:
                raise ValueError("probabilistic baseline4 needs a random generator")
            prob = (hm / (c + h2)) ** 2
            selected &= rng.random(n) < prob
    else:
        raise ValueError(f"unknown policy {policy_id!r}")
    return ScheduleDecision(selected, int(selected.sum()), noiseless=noiseless)


class EnergyLedger:
    """Cumulative transmit energy per device against an average budget."""

    def __init__(self, num_devices: int, budget: float):
        self.cumulative = np.zeros(num_devices)
        self.rounds = 0
        self.budget = budget

    def average(self) -> np.ndarray:
        if self.rounds == 0:
            return np.zeros_like(self.cumulative)
        return self.cumulative / self.rounds

    def would_exceed(self, energies) -> np.ndarray:
        """Devices whose average would top the budget if selected next round."""
        return (self.cumulative + np.asarray(energies)) / (self.rounds + 1) > self.budget

    def update(self, selected, energies) -> tuple[np.ndarray, np.ndarray]:
        selected = np.asarray(selected, dtype=bool)
        self.cumulative = self.cumulative + np.where(selected, energies, 0.0)
        self.rounds += 1
        avg = self.average()
        return avg, avg > self.budget
