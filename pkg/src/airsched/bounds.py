"""Residual, one-round and T-round convergence bounds, and trace comparisons."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BoundInputs:
    """Per-round quantities entering the bounds.

    ``L`` and ``mu`` are surrogates, not certified constants.
    """

    L: float
    mu: float
    lr: float
    G2: float
    delta2: float
    m: float
    pr_unselected: float
    num_selected: int
    batch_size: int
    snr_threshold: float
    g_norm_sq: float = 0.0


@dataclass
class BoundTrace:
    B: np.ndarray
    C: np.ndarray
    theorem: np.ndarray
    lemma1: np.ndarray = field(default_factory=lambda: np.empty(0))
    lemma2: np.ndarray = field(default_factory=lambda: np.empty(0))


def _check_pr(pr: float) -> None:
    if not 0.0 <= pr < 1.0:
        raise ValueError(f"unselection probability must lie in [0, 1), got {pr}")


def lemma1_bound(pr_unselected: float, G2: float, g_norm_sq: float) -> float:
    """``Pr (G^2 + ||g||^2) / (1 - Pr)``."""
    _check_pr(pr_unselected)
    return pr_unselected * (G2 + g_norm_sq) / (1.0 - pr_unselected)


def _noise_sampling(x: BoundInputs) -> float:
    if x.num_selected < 1 or x.batch_size < 1 or x.snr_threshold <= 0:
        raise ValueError("need |S| >= 1, batch_size >= 1 and a positive SNR threshold")
    s = x.num_selected
    return x.delta2 / (x.snr_threshold * s * s) + x.G2 / (s * x.batch_size)


def lemma2_bound(x: BoundInputs) -> float:
    """Upper bound on the expected one-round change of the training loss."""
    _check_pr(x.pr_unselected)
    a = x.L * x.lr**2 / 2.0
    b = (x.L * x.lr**2 + x.lr) / 2.0
    return (
        a * x.g_norm_sq
        + b * x.m**2
        + b * lemma1_bound(x.pr_unselected, x.G2, x.g_norm_sq)
        + a * _noise_sampling(x)
    )


def drift_constants(x: BoundInputs) -> tuple[float, float]:
    """Additive ``B_t`` and multiplicative ``C_t`` of the T-round recursion."""
    _check_pr(x.pr_unselected)
    pr = x.pr_unselected
    a = x.L * x.lr**2 / 2.0
    b = (x.L * x.lr**2 + x.lr) / 2.0
    B = b * x.m**2 + b * pr * x.G2 / (1.0 - pr) + a * _noise_sampling(x)
    C = 1.0 + 2.0 * x.mu * (a + (x.L * x.lr**2 + x.lr) * pr / (2.0 * (1.0 - pr)))
    return B, C


def theorem1_bound(rounds: Sequence[BoundInputs], initial_gap: float) -> BoundTrace:
    """Running T-round drift bounds for ``t = 1..T``.

    ``initial_gap`` is ``f(w_0) - f*``.  Entry ``t`` of ``theorem`` is
    ``(prod_{i<=t} C_i - 1) * gap + sum_{i<t} B_i prod_{j=i+1..t} C_j + B_t``.
    """
    if not rounds:
        return BoundTrace(np.empty(0), np.empty(0), np.empty(0))
    BC = np.array([drift_constants(x) for x in rounds])
    B, C = BC[:, 0], BC[:, 1]
    T = len(rounds)
    out = np.empty(T)
    for t in range(T):
        tail = np.array([np.prod(C[i + 1:t + 1]) for i in range(t + 1)])
        out[t] = (np.prod(C[:t + 1]) - 1.0) * initial_gap + float(B[:t + 1] @ tail)
    lemma1 = np.array([lemma1_bound(x.pr_unselected, x.G2, x.g_norm_sq) for x in rounds])
    lemma2 = np.array([lemma2_bound(x) for x in rounds])
    return BoundTrace(B, C, out, lemma1, lemma2)


REQUIRED_FIELDS = ("round", "train_loss", "num_selected", "residual_sq_mean", "global_grad_norm_sq")


class TraceError(ValueError):
    """Raised when a metrics trace lacks a field the comparison needs."""


def empirical_comparison(trace, constants, *, num_devices: int, lr: float, batch_size: int,
                         snr_threshold: float, initial_loss: float) -> dict:
    """Compare a finished trace against the bounds round by round.

    ``trace`` is a list of round records (objects or dicts) carrying at least
    :data:`REQUIRED_FIELDS`.  Violations are reported as flags; rounds with no
    selected device have no defined bound and are reported as ``None``.
    """
    rows = [r if isinstance(r, dict) else vars(r) for r in trace]
    for r in rows:
        missing = [f for f in REQUIRED_FIELDS if f not in r]
        if missing:
            raise TraceError(f"trace record lacks {missing}")

    per_round = []
    inputs = []
    prev_loss = initial_loss
    for r in rows:
        pr = 1.0 - r["num_selected"] / num_devices
        entry = {"round": r["round"], "pr_unselected": pr,
                 "residual_empirical": r["residual_sq_mean"],
                 "loss_change_empirical": r["train_loss"] - prev_loss,
                 "gap_empirical": r["train_loss"] - initial_loss}
        prev_loss = r["train_loss"]
        if r["num_selected"] == 0:
            entry.update(lemma1_bound=None, lemma1_ok=None, lemma2_bound=None, lemma2_ok=None)
            per_round.append(entry)
            inputs.append(None)
            continue
        x = BoundInputs(constants.L_est, constants.mu_est, lr, constants.G2, constants.delta2,
                        constants.m, pr, r["num_selected"], batch_size, snr_threshold,
                        r["global_grad_norm_sq"])
        l1 = lemma1_bound(pr, constants.G2, x.g_norm_sq)
        l2 = lemma2_bound(x)
        entry.update(lemma1_bound=l1, lemma1_ok=bool(entry["residual_empirical"] <= l1),
                     lemma2_bound=l2, lemma2_ok=bool(entry["loss_change_empirical"] <= l2))
        per_round.append(entry)
        inputs.append(x)

    theorem_ok = None
    theorem_final = None
    if inputs and all(x is not None for x in inputs):
        bt = theorem1_bound(inputs, initial_loss - constants.f_star_est)
        for entry, bound in zip(per_round, bt.theorem):
            entry["theorem_bound"] = float(bound)
            entry["theorem_ok"] = bool(entry["gap_empirical"] <= bound)
        theorem_final = float(bt.theorem[-1])
        theorem_ok = per_round[-1]["theorem_ok"]

    def frac(key):
        vals = [e[key] for e in per_round if e.get(key) is not None]
        return sum(vals) / len(vals) if vals else None

    return {
        "constants": {"G2": constants.G2, "delta2": constants.delta2, "m": constants.m,
                      "L_est": constants.L_est, "mu_est": constants.mu_est,
                      "f_star_est": constants.f_star_est, "estimated": True},
        "lemma1_satisfied_fraction": frac("lemma1_ok"),
        "lemma2_satisfied_fraction": frac("lemma2_ok"),
        "theorem_final_bound": theorem_final,
        "theorem_final_satisfied": theorem_ok,
        "rounds": per_round,
    }
