"""Per-device residual store for untransmitted updates."""

from __future__ import annotations

import numpy as np

MODES = ("literal", "accumulate")


class ResidualStore:
    """Holds ``r_n`` for every device.

    In ``literal`` mode an unselected device keeps only ``xi * g`` from the
    round it missed.  In ``accumulate`` mode it keeps ``xi * g_tilde``, so the
    whole untransmitted history is carried until the device is selected.
    """

    def __init__(self, num_devices: int, dim: int, xi: float = 1.0, mode: str = "literal"):
        if not 0.0 <= xi <= 1.0:
            raise ValueError("xi must lie in [0, 1]")
        if mode not in MODES:
            raise ValueError(f"unknown residual mode {mode!r}; expected one of {MODES}")
        self.xi = xi
        self.mode = mode
        self.residuals = np.zeros((num_devices, dim))

    def combine(self, device: int, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.residuals.shape[1:]:
            raise ValueError(f"gradient shape {g.shape} != residual shape {self.residuals.shape[1:]}")
        return g + self.residuals[device]

    def combine_all(self, gradients: np.ndarray) -> np.ndarray:
        gradients = np.asarray(gradients, dtype=np.float64)
        if gradients.shape != self.residuals.shape:
            raise ValueError(f"gradients shape {gradients.shape} != {self.residuals.shape}")
        return gradients + self.residuals

    def update_after_round(self, selected, gradients, combined) -> None:
        selected = np.asarray(selected, dtype=bool)
        source = gradients if self.mode == "literal" else combined
        carried = self.xi * np.asarray(source, dtype=np.float64)
        self.residuals = np.where(selected[:, None], 0.0, carried)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.residuals, axis=1)
