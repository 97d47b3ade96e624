"""Small differentiable models, cross-entropy loss and local SGD.

Two architectures are supported: multinomial logistic regression and a
one-hidden-layer ReLU perceptron.  Parameters live in one flat float64
vector so that every gradient-level quantity (local updates, residuals,
aggregates) is a plain 1-D array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import rng as rngs
from .datasets import DevicePartition, ExampleStore, epoch_batches


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    num_classes: int
    hidden: int | None = None
    l2: float = 0.0

    @property
    def num_params(self) -> int:
        d, c, h = self.input_dim, self.num_classes, self.hidden
        if h is None:
            return c * d + c
        return h * d + h + c * h + c

    @classmethod
    def logistic(cls, input_dim: int, num_classes: int, l2: float = 1e-4) -> "Architecture":
        return cls(input_dim, num_classes, None, l2)

    @classmethod
    def mlp(cls, input_dim: int, num_classes: int, hidden: int = 32, l2: float = 0.0) -> "Architecture":
        return cls(input_dim, num_classes, hidden, l2)


@dataclass(frozen=True)
class ModelParams:
    arch: Architecture
    w: np.ndarray

    def __post_init__(self):
        if self.w.shape != (self.arch.num_params,):
            raise ValueError(
                f"parameter vector has shape {self.w.shape}, expected ({self.arch.num_params},)"
            )

    def with_weights(self, w: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, w)


@dataclass(frozen=True)
class LossReport:
    """Mean cross-entropy, accuracy, and the regularized training objective."""

    loss: float
    accuracy: float
    objective: float


@dataclass(frozen=True)
class Constants:
    """Gradient statistics and curvature surrogates from a probe phase."""

    G2: float
    delta2: float
    m: float
    L_est: float
    mu_est: float
    f_star_est: float

    @property
    def delta(self) -> float:
        return float(np.sqrt(self.delta2))


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Zeros for logistic regression; scaled Gaussian weights for the MLP."""
    w = np.zeros(arch.num_params)
    if arch.hidden is not None:
        gen = rngs.stream(seed, rngs.INIT)
        d, h, c = arch.input_dim, arch.hidden, arch.num_classes
        w1 = gen.standard_normal(h * d) * np.sqrt(2.0 / d)
        w2 = gen.standard_normal(c * h) * np.sqrt(1.0 / h)
        w = np.concatenate([w1, np.zeros(h), w2, np.zeros(c)])
    return ModelParams(arch, w)


def _unpack(arch: Architecture, w: np.ndarray):
    d, c, h = arch.input_dim, arch.num_classes, arch.hidden
    if h is None:
        return w[: c * d].reshape(c, d), w[c * d:]
    o = 0
    w1 = w[o:o + h * d].reshape(h, d); o += h * d
    b1 = w[o:o + h]; o += h
    w2 = w[o:o + c * h].reshape(c, h); o += c * h
    b2 = w[o:o + c]
    return w1, b1, w2, b2


def _logits(arch: Architecture, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    if arch.hidden is None:
        W, b = _unpack(arch, w)
        return X @ W.T + b
    w1, b1, w2, b2 = _unpack(arch, w)
    return np.maximum(X @ w1.T + b1, 0.0) @ w2.T + b2


def _check_inputs(params: ModelParams, X: np.ndarray, y: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("need a non-empty 2-D feature batch")
    if X.shape[1] != params.arch.input_dim:
        raise ValueError(f"feature dim {X.shape[1]} != model input dim {params.arch.input_dim}")
    if y.shape != (X.shape[0],):
        raise ValueError("labels must be 1-D and match the batch size")


def loss_and_gradient(params: ModelParams, X: np.ndarray, y: np.ndarray) -> tuple[LossReport, np.ndarray]:
    """Mean cross-entropy over ``(X, y)`` and the analytic gradient of the objective.

    The objective is mean cross-entropy plus ``l2 / 2 * ||w||^2``; the
    returned gradient is the gradient of that objective.
    """
    _check_inputs(params, X, y)
    arch, w = params.arch, params.w
    n = X.shape[0]
    onehot = np.zeros((n, arch.num_classes))
    onehot[np.arange(n), y] = 1.0

    if arch.hidden is None:
        W, b = _unpack(arch, w)
        logits = X @ W.T + b
    else:
        w1, b1, w2, b2 = _unpack(arch, w)
        pre = X @ w1.T + b1
        act = np.maximum(pre, 0.0)
        logits = act @ w2.T + b2

    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(n), y]))
    probs = np.exp(logits - lse[:, None])
    dlogits = (probs - onehot) / n

    if arch.hidden is None:
        grad = np.concatenate([(dlogits.T @ X).ravel(), dlogits.sum(axis=0)])
    else:
        dact = dlogits @ w2
        dpre = dact * (pre > 0)
        grad = np.concatenate([
            (dpre.T @ X).ravel(), dpre.sum(axis=0),
            (dlogits.T @ act).ravel(), dlogits.sum(axis=0),
        ])
    objective = loss + 0.5 * arch.l2 * float(w @ w)
    grad = grad + arch.l2 * w
    if not (np.isfinite(objective) and np.all(np.isfinite(grad))):
        raise FloatingPointError("non-finite loss or gradient")
    accuracy = float(np.mean(logits.argmax(axis=1) == y))
    return LossReport(loss, accuracy, objective), grad


def evaluate(params: ModelParams, store: ExampleStore) -> LossReport:
    """Loss and argmax accuracy of ``params`` on a whole example store."""
    report, _ = loss_and_gradient(params, store.features, store.labels)
    return report


def objective(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    return loss_and_gradient(params, X, y)[0].objective


def local_update(
    params: ModelParams,
    store: ExampleStore,
    partition: DevicePartition,
    round_idx: int,
    batch_size: int,
    epochs: int,
    lr: float,
    momentum: float,
    device_rng: np.random.Generator,
) -> np.ndarray:
    """Run local momentum SGD and return the effective update direction.

    Starting from the received global model, the device makes ``epochs``
    shuffled passes over its partition in mini-batches.  The momentum buffer
    starts at zero every round.  The result is ``(w_in - w_out) / lr``, which
    for one epoch over a single full-partition batch equals the plain
    mini-batch gradient.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive (update is scaled by 1/lr)")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    w = params.w.copy()
    velocity = np.zeros_like(w)
    for _ in range(epochs):
        for batch in epoch_batches(partition, round_idx, batch_size, device_rng):
            _, g = loss_and_gradient(
                params.with_weights(w), store.features[batch.indices], store.labels[batch.indices]
            )
            velocity = momentum * velocity + g
            w = w - lr * velocity
    return (params.w - w) / lr


def apply_global_update(params: ModelParams, aggregate: np.ndarray, lr: float) -> ModelParams:
    """``w <- w - lr * aggregate``."""
    aggregate = np.asarray(aggregate, dtype=np.float64)
    if aggregate.shape != params.w.shape:
        raise ValueError(f"aggregate shape {aggregate.shape} != params shape {params.w.shape}")
    return params.with_weights(params.w - lr * aggregate)


def curvature_surrogates(
    grad_fn: Callable[[np.ndarray], np.ndarray], pairs: Sequence[tuple[np.ndarray, np.ndarray]]
) -> tuple[float, float]:
    """Smoothness and strong-convexity surrogates from gradient differences.

    For each segment ``(x, y)``, ``||g(x) - g(y)|| / ||x - y||`` lower-bounds
    the smoothness constant and ``(g(x) - g(y))^T (x - y) / ||x - y||^2``
    upper-bounds the convexity modulus.  Returns ``(max ratio, min ratio)``.
    """
    L_est, mu_est = 0.0, np.inf
    for x, y in pairs:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        dx = x - y
        dist2 = float(dx @ dx)
        if dist2 == 0:
            continue
        dg = np.atleast_1d(grad_fn(x)) - np.atleast_1d(grad_fn(y))
        L_est = max(L_est, float(np.linalg.norm(dg)) / np.sqrt(dist2))
        mu_est = min(mu_est, float(dg @ dx) / dist2)
    if not np.isfinite(mu_est):
        raise ValueError("need at least one non-degenerate segment")
    return L_est, mu_est


def minimize_objective(params: ModelParams, store: ExampleStore, max_iter: int = 500) -> float:
    """Minimum of the full-data training objective found by L-BFGS from ``params``."""
    X, y = store.features, store.labels

    def fun(w):
        report, g = loss_and_gradient(params.with_weights(w), X, y)
        return report.objective, g

    res = minimize(fun, params.w, jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    return float(res.fun)


def estimate_constants(
    store: ExampleStore,
    partitions: Sequence[DevicePartition],
    arch: Architecture,
    probe_rounds: int,
    seed: int,
    *,
    batch_size: int = 10,
    epochs: int = 2,
    lr: float = 0.01,
    momentum: float = 0.5,
    num_segments: int = 8,
    init: ModelParams | None = None,
) -> Constants:
    """Pre-training probe for the constants used by the scheduler and bounds.

    Runs ``probe_rounds`` noiseless full-participation rounds from the initial
    model.  At each probe point every device computes its local update exactly
    as in training; ``G2`` is the largest across-device variance of those
    updates about their mean, and ``m`` / ``delta2`` are the mean and variance
    of the entries of the averaged updates pooled over probe rounds.
    Curvature surrogates come from random segments around the probe points,
    and ``f_star_est`` is the L-BFGS minimum of the full training objective.
    """
    if probe_rounds < 1:
        raise ValueError("probe_rounds must be >= 1")
    params = init if init is not None else init_params(arch, seed)
    X, y = store.features, store.labels
    G2 = 0.0
    entries = []
    points = []
    for r in range(probe_rounds):
        updates = np.stack([
            local_update(params, store, p, r, min(batch_size, len(p)), epochs, lr, momentum,
                         rngs.stream(seed, rngs.PROBE, p.device_id, r))
            for p in partitions
        ])
        mean = updates.mean(axis=0)
        G2 = max(G2, float(np.mean(np.sum((updates - mean) ** 2, axis=1))))
        entries.append(mean)
        points.append(params.w.copy())
        params = apply_global_update(params, mean, lr)
    pooled = np.concatenate(entries)
    m = float(pooled.mean())
    delta2 = float(pooled.var())

    gen = rngs.stream(seed, rngs.PROBE, 1 << 30)
    pairs = []
    for k in range(num_segments):
        centre = points[k % len(points)]
        scale = 0.1 * max(1.0, float(np.linalg.norm(centre)) / np.sqrt(centre.size))
        pairs.append((centre + scale * gen.standard_normal(centre.size),
                      centre + scale * gen.standard_normal(centre.size)))
    L_est, mu_est = curvature_surrogates(
        lambda w: loss_and_gradient(params.with_weights(w), X, y)[1], pairs
    )
    f_star = minimize_objective(params, store)
    return Constants(G2, delta2, m, float(L_est), float(mu_est), f_star)


def save_checkpoint(params: ModelParams, path) -> None:
    """Flat binary: little-endian uint64 length, then float64 parameters."""
    w = np.ascontiguousarray(params.w, dtype="<f8")
    with open(path, "wb") as f:
        f.write(np.uint64(w.size).astype("<u8").tobytes())
        f.write(w.tobytes())


def load_checkpoint(path, arch: Architecture) -> ModelParams:
    raw = open(path, "rb").read()
    (n,) = np.frombuffer(raw[:8], dtype="<u8")
    w = np.frombuffer(raw[8:], dtype="<f8")
    if w.size != n:
        raise ValueError(f"checkpoint declares {n} values but holds {w.size}")
    return ModelParams(arch, w.astype(np.float64))
