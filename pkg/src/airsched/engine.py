"""Round-by-round simulation of AirComp federated edge learning."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from itertools import product
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import rng as rngs
from .bounds import empirical_comparison
from .channel import PowerPolicy, aircomp_aggregate, draw_channels, transmit_energy
from .datasets import (
    ExampleStore,
    load_idx,
    partition_iid,
    partition_noniid_shards,
    synthetic_task,
)
from .learner import (
    Architecture,
    Constants,
    ModelParams,
    apply_global_update,
    estimate_constants,
    evaluate,
    init_params,
    local_update,
)
from .residual import ResidualStore
from .scheduler import (
    BENCHMARK,
    POLICIES,
    PROPOSED,
    EnergyLedger,
    QualityWeights,
    normalize_reports,
    quality_vector,
    select_baseline,
    select_lyapunov,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or unparseable simulation configuration."""


class SimulationError(RuntimeError):
    """A module error aborted a run; ``trace`` holds the rounds completed so far."""

    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


@dataclass
class SimulationConfig:
    num_devices: int = 20
    rounds: int = 50
    batch_size: int = 10
    epochs: int = 2
    lr: float = 0.01
    momentum: float = 0.5
    model: str = "logistic"
    hidden: int = 32
    l2: float = 1e-4
    dataset: str = "synthetic"
    partition: str = "iid"
    shards_per_device: int = 2
    n_train: int = 1000
    n_test: int = 1000
    num_features: int = 20
    num_classes: int = 4
    margin: float = 0.05
    flip_prob: float = 0.05
    spread: float = 0.25
    data_seed: int = -1
    mnist_dir: str = ""
    mnist_subset: int = 0
    noise_var: float = 1.0
    snr_db: float = 0.0
    alpha: float = 5e3
    lambda_e: float = 0.5
    rho1: float = 0.5
    xi: float = 1.0
    residual_mode: str = "literal"
    residual: bool = True
    baseline_residual: bool = False
    energy_budget: float = 1.5
    hard_budget: bool = False
    policy: str = PROPOSED
    seed: int = 0
    noiseless: bool = False
    b1_k: int = 6
    b2_threshold: float = 1.0
    b3_kc: int = 10
    b3_k: int = 4
    b4_c: float = 1.0
    b4_p_on: float = 4.0
    b4_probabilistic: bool = False
    running_max: bool = False
    probe_rounds: int = 3
    workers: int = 1

    def validate(self) -> "SimulationConfig":
        if self.num_devices < 1:
            raise ConfigError("num_devices must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.lambda_e <= 1 and 0 <= self.rho1 <= 1):
            raise ConfigError("lambda_e and rho1 must lie in [0, 1]")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.model not in ("logistic", "mlp"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.dataset not in ("synthetic", "mnist"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.partition not in ("iid", "noniid"):
            raise ConfigError(f"unknown partition {self.partition!r}")
        if self.residual_mode not in ("literal", "accumulate"):
            raise ConfigError(f"unknown residual_mode {self.residual_mode!r}")
        if self.noise_var <= 0:
            raise ConfigError("noise_var must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    @property
    def snr_threshold(self) -> float:
        return 10.0 ** (self.snr_db / 10.0)

    def replace(self, **changes) -> "SimulationConfig":
        return dataclasses.replace(self, **changes)

    # -- flat key=value text format -------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, overrides: list[str] | None = None) -> "SimulationConfig":
        values: dict[str, Any] = {}
        lines = [ln for ln in text.splitlines()] + list(overrides or [])
        for lineno, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected KEY=VALUE, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "SimulationConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            key = KEY_ALIASES.get(key, key)
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(key, types[key], value)
        return cls(**kwargs).validate()


KEY_ALIASES = {"N": "num_devices", "T": "rounds"}

_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def _parse_value(key: str, type_name, value):
    kind = type_name if isinstance(type_name, str) else type_name.__name__
    if not isinstance(value, str):
        return _TYPES[kind](value)
    try:
        if kind == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(float(value)) if value.strip().lower().count("e") else int(value)
        return _TYPES[kind](value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    test_loss: float
    train_loss: float
    num_selected: int
    selected_ids: list[int]
    k_star: int
    penalty_k_star: float
    round_energy: float
    round_energy_mean: float
    selected_energy_mean: float
    cumulative_energy_mean: float
    residual_norm_mean: float
    residual_sq_mean: float
    global_grad_norm_sq: float
    noise_std: float
    budget_violations: int


CSV_COLUMNS = tuple(f.name for f in fields(RoundMetrics))


@dataclass
class SimulationResult:
    config: SimulationConfig
    metrics: list[RoundMetrics]
    model: ModelParams
    initial_model: ModelParams
    constants: Constants
    decisions: list[dict] = field(default_factory=list)
    energy_totals: np.ndarray | None = None
    initial_train_loss: float = float("nan")

    def bounds_report(self) -> dict:
        cfg = self.config
        report = empirical_comparison(
            self.metrics, self.constants, num_devices=cfg.num_devices, lr=cfg.lr,
            batch_size=cfg.batch_size, snr_threshold=cfg.snr_threshold,
            initial_loss=self.initial_train_loss,
        )
        report["residual_mode"] = cfg.residual_mode
        return report


# ---------------------------------------------------------------------------
# Setup helpers
# ---------------------------------------------------------------------------

def load_data(cfg: SimulationConfig) -> tuple[ExampleStore, ExampleStore]:
    data_seed = cfg.seed if cfg.data_seed < 0 else cfg.data_seed
    if cfg.dataset == "synthetic":
        return synthetic_task(cfg.n_train, cfg.n_test, cfg.num_features, cfg.num_classes,
                              cfg.margin, cfg.flip_prob, data_seed, cfg.spread)
    root = Path(cfg.mnist_dir or os.environ.get("AIRSCHED_MNIST_DIR", "data/mnist"))
    train = load_idx(_find(root, "train-images"), _find(root, "train-labels"))
    test = load_idx(_find(root, "t10k-images"), _find(root, "t10k-labels"))
    if cfg.mnist_subset:
        idx = rngs.stream(data_seed, rngs.SYNTHETIC, 1).permutation(len(train))[: cfg.mnist_subset]
        train = train.subset(np.sort(idx))
    return train, test


def _find(root: Path, stem: str) -> Path:
    for name in (f"{stem}-idx3-ubyte", f"{stem}-idx1-ubyte", f"{stem}.idx3-ubyte",
                 f"{stem}.idx1-ubyte"):
        for suffix in ("", ".gz"):
            p = root / (name + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"no IDX file for {stem!r} under {root}")


def make_partitions(cfg: SimulationConfig, train: ExampleStore):
    data_seed = cfg.seed if cfg.data_seed < 0 else cfg.data_seed
    if cfg.partition == "iid":
        return partition_iid(train, cfg.num_devices, data_seed)
    return partition_noniid_shards(train, cfg.num_devices, cfg.shards_per_device, data_seed)


def make_architecture(cfg: SimulationConfig, train: ExampleStore) -> Architecture:
    if cfg.model == "logistic":
        return Architecture.logistic(train.feature_dim, train.num_classes, cfg.l2)
    return Architecture.mlp(train.feature_dim, train.num_classes, cfg.hidden, cfg.l2)


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

def run(cfg: SimulationConfig, constants: Constants | None = None,
        on_round: Callable[[RoundMetrics], None] | None = None) -> SimulationResult:
    """Simulate ``cfg.rounds`` rounds of broadcast, local update, selection, aggregation."""
    cfg.validate()
    train, test = load_data(cfg)
    partitions = make_partitions(cfg, train)
    arch = make_architecture(cfg, train)
    batch = min(cfg.batch_size, min(len(p) for p in partitions))
    model = init_params(arch, cfg.seed)
    initial = model
    if constants is None:
        constants = estimate_constants(
            train, partitions, arch, cfg.probe_rounds, cfg.seed, batch_size=batch,
            epochs=cfg.epochs, lr=cfg.lr, momentum=cfg.momentum, init=model,
        )
    norm_scale = constants.delta
    power = PowerPolicy(cfg.noise_var, cfg.snr_threshold)
    weights = QualityWeights(cfg.rho1, cfg.lambda_e, cfg.alpha)
    # Baselines discard unselected updates unless asked to keep them.
    keep = cfg.residual and (cfg.policy == PROPOSED or cfg.baseline_residual)
    residuals = ResidualStore(cfg.num_devices, arch.num_params,
                              cfg.xi if keep else 0.0, cfg.residual_mode)
    ledger = EnergyLedger(cfg.num_devices, cfg.energy_budget)
    g_max_run, h_max_run = 0.0, 0.0
    initial_train = evaluate(model, train).objective

    metrics: list[RoundMetrics] = []
    decisions: list[dict] = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def device_work(p, snapshot, t):
        return local_update(snapshot, train, p, t, batch, cfg.epochs, cfg.lr, cfg.momentum,
                            rngs.device_stream(cfg.seed, p.device_id, t))

    try:
        for t in range(1, cfg.rounds + 1):
            snapshot = model
            if pool is None:
                grads = [device_work(p, snapshot, t) for p in partitions]
            else:
                grads = list(pool.map(lambda p: device_work(p, snapshot, t), partitions))
            grads = np.stack(grads)
            combined = residuals.combine_all(grads)
            grad_norms_sq = np.einsum("ij,ij->i", combined, combined)
            global_grad = grads.mean(axis=0)

            channels = draw_channels(cfg.num_devices, t, rngs.stream(cfg.seed, rngs.CHANNEL, t))
            magnitude = channels.magnitude
            energies = transmit_energy(power, magnitude, channels.floor)
            eligible = channels.feasible.copy()
            if cfg.hard_budget:
                eligible &= ~ledger.would_exceed(energies)

            if cfg.running_max:
                g_max_run = max(g_max_run, float(grad_norms_sq.max()))
                h_max_run = max(h_max_run, float(magnitude.max()))
                reports = normalize_reports(grad_norms_sq, magnitude, energies, g_max_run, h_max_run)
            else:
                reports = normalize_reports(grad_norms_sq, magnitude, energies)

            policy_rng = rngs.stream(cfg.seed, rngs.POLICY, t)
            if cfg.policy == PROPOSED:
                decision = select_lyapunov(quality_vector(reports, weights), cfg.alpha,
                                           constants.delta2, power.snr_threshold, constants.G2,
                                           batch, eligible)
            else:
                decision = select_baseline(
                    cfg.policy, grad_norms_sq, magnitude, policy_rng,
                    k=cfg.b3_k if cfg.policy == "baseline3" else cfg.b1_k,
                    h_threshold=cfg.b2_threshold, k_c=cfg.b3_kc, c=cfg.b4_c, p_on=cfg.b4_p_on,
                    probabilistic=cfg.b4_probabilistic,
                    eligible=None if cfg.policy == BENCHMARK else eligible,
                )
                decision.k_star = int(decision.selected.sum())
            selected = decision.selected
            k = int(selected.sum())

            noise_std = 0.0
            if k > 0:
                agg = aircomp_aggregate(combined[selected], power, norm_scale,
                                        rngs.stream(cfg.seed, rngs.NOISE, t),
                                        noiseless=cfg.noiseless or decision.noiseless)
                noise_std = agg.noise_std
                model = apply_global_update(model, agg.aggregate, cfg.lr)
            residuals.update_after_round(selected, grads, combined)
            round_energies = np.where(selected, energies, 0.0)
            _, violations = ledger.update(selected, energies)

            test_report = evaluate(model, test) if len(test) else None
            train_obj = evaluate(model, train).objective
            res_norms = residuals.norms()
            rec = RoundMetrics(
                round=t,
                test_accuracy=test_report.accuracy if test_report else float("nan"),
                test_loss=test_report.loss if test_report else float("nan"),
                train_loss=train_obj,
                num_selected=k,
                selected_ids=np.flatnonzero(selected).tolist(),
                k_star=decision.k_star,
                penalty_k_star=decision.penalty_at_k_star,
                round_energy=float(round_energies.sum()),
                round_energy_mean=float(round_energies.sum() / cfg.num_devices),
                selected_energy_mean=float(round_energies.sum() / k) if k else 0.0,
                cumulative_energy_mean=float(ledger.average().mean()),
                residual_norm_mean=float(res_norms.mean()),
                residual_sq_mean=float(np.mean(res_norms**2)),
                global_grad_norm_sq=float(global_grad @ global_grad),
                noise_std=float(noise_std),
                budget_violations=int(violations.sum()),
            )
            metrics.append(rec)
            decisions.append({
                "round": t,
                "k_star": decision.k_star,
                "selected": rec.selected_ids,
                "penalties": decision.penalties.tolist(),
                "quality": decision.quality.tolist(),
                "energies": energies.tolist(),
                "magnitudes": magnitude.tolist(),
                "feasible": channels.feasible.tolist(),
                "noise_std": rec.noise_std,
            })
            if on_round is not None:
                on_round(rec)
    except Exception as exc:  # noqa: BLE001 - rewrap with the partial trace
        raise SimulationError(f"round {len(metrics) + 1} failed: {exc}", metrics) from exc
    finally:
        if pool is not None:
            pool.shutdown()

    return SimulationResult(cfg, metrics, model, initial, constants, decisions,
                            ledger.cumulative.copy(), initial_train)


def summarize(result: SimulationResult) -> dict:
    m = result.metrics
    if not m:
        return {"rounds": 0}
    total_energy = float(sum(r.round_energy for r in m))
    total_sel = sum(r.num_selected for r in m)
    return {
        "rounds": len(m),
        "final_accuracy": m[-1].test_accuracy,
        "final_test_loss": m[-1].test_loss,
        "final_train_loss": m[-1].train_loss,
        "mean_selected": float(np.mean([r.num_selected for r in m])),
        "mean_energy": m[-1].cumulative_energy_mean,
        "mean_selected_energy": total_energy / total_sel if total_sel else 0.0,
        "skipped_rounds": sum(1 for r in m if r.num_selected == 0),
    }


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _run_summary(cfg: SimulationConfig) -> dict:
    return summarize(run(cfg))


def sweep(template: SimulationConfig, grid: dict[str, list], seeds: int = 1,
          workers: int = 1) -> list[dict]:
    """One run per grid point and seed; returns summary rows.

    Grid points share the template seed (common random numbers across
    points); replicate ``i`` uses ``template.seed + i``.
    """
    if not grid:
        raise ConfigError("sweep grid is empty")
    keys = list(grid)
    jobs = []
    for combo in product(*(grid[k] for k in keys)):
        point = dict(zip(keys, combo))
        for i in range(seeds):
            cfg = SimulationConfig.from_mapping(
                {**dataclasses.asdict(template), **point, "seed": template.seed + i}
            )
            jobs.append((point, template.seed + i, cfg))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            summaries = list(ex.map(_run_summary, [j[2] for j in jobs]))
    else:
        summaries = [_run_summary(j[2]) for j in jobs]
    return [{**point, "seed": seed, **s} for (point, seed, _), s in zip(jobs, summaries)]


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, list):
        return ";".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(metrics: list[RoundMetrics], extra: dict[str, Any] | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    prefix = list(extra or {})
    writer.writerow(prefix + list(CSV_COLUMNS))
    for rec in metrics:
        row = [_cell(v) for v in (extra or {}).values()]
        row += [_cell(getattr(rec, c)) for c in CSV_COLUMNS]
        writer.writerow(row)
    return buf.getvalue()


def write_outputs(result: SimulationResult, out_dir) -> Path:
    from .learner import save_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.metrics))
    (out / "metrics.json").write_text(
        json.dumps([dataclasses.asdict(r) for r in result.metrics], indent=1)
    )
    (out / "config.cfg").write_text(result.config.to_text())
    with open(out / "decisions.jsonl", "w") as f:
        for d in result.decisions:
            f.write(json.dumps(d) + "\n")
    report = result.bounds_report() if result.metrics else {"rounds": []}
    (out / "bounds.json").write_text(json.dumps(report, indent=1))
    save_checkpoint(result.model, out / "checkpoint.bin")
    return out
