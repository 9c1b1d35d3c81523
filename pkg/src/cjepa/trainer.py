"""AdamW, the lr/wd/momentum schedules, synthetic patch data and the training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .diagnostics import DEFAULT_COLLAPSE_THRESHOLD, DiagnosticsReport, collapse_report
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch, StepOutOfRange
from .jepa import MIN_GRID, sample_masks
from .metrics import MetricsLog
from .network import VICREG_WIRINGS, Network, NetworkConfig, ema_update_network, encoder_shapes, forward_backward, init_params
from .vicreg import VicRegCoefficients

SUMMARY_SCHEMA = 1
TARGET_INITS = ("copy", "random")


@dataclass(frozen=True)
class MaskingConfig:
    grid_h: int = 8
    grid_w: int = 8
    num_targets: int = 4
    scale_min: float = 0.15
    scale_max: float = 0.2
    aspect_min: float = 0.75
    aspect_max: float = 1.5

    def __post_init__(self):
        if self.grid_h < MIN_GRID or self.grid_w < MIN_GRID:
            raise ConfigError(f"grid must be at least {MIN_GRID}x{MIN_GRID}")
        if self.num_targets < 1:
            raise ConfigError("num_targets must be >= 1")
        if not 0 < self.scale_min <= self.scale_max <= 1:
            raise ConfigError("need 0 < scale_min <= scale_max <= 1")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise ConfigError("need 0 < aspect_min <= aspect_max")


@dataclass(frozen=True)
class ScheduleConfig:
    epochs: int = 20
    steps_per_epoch: int = 100
    warmup_epochs: int = 2
    base_lr: float = 1e-4
    peak_lr: float = 1e-3
    final_lr: float = 1e-6
    wd_start: float = 0.04
    wd_end: float = 0.4
    ema_start: float = 0.996
    ema_end: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epochs and steps_per_epoch must be >= 1")
        if self.total_steps < 2:
            raise ConfigError("a schedule needs at least 2 steps")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        # zero learning rates are allowed: a frozen run is a useful control
        for name in ("base_lr", "peak_lr", "final_lr", "wd_start", "wd_end"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.ema_start <= self.ema_end <= 1:
            raise ConfigError("need 0 <= ema_start <= ema_end <= 1")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_images: int = 1024
    grid_h: int = 8
    grid_w: int = 8
    patch_dim: int = 12
    num_latent_factors: int = 16
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1:
            raise ConfigError("num_images must be >= 1")
        if self.grid_h < 1 or self.grid_w < 1 or self.patch_dim < 1:
            raise ConfigError("grid dims and patch_dim must be >= 1")
        if self.num_latent_factors < 1:
            raise ConfigError("num_latent_factors must be >= 1")
        if not self.noise_std >= 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    batch_size: int = 64
    stop_grad: bool = True
    target_init: str = "copy"
    wiring: str = "predictor"
    diag_every: int = 100
    diag_images: int = 32
    collapse_threshold: float = DEFAULT_COLLAPSE_THRESHOLD
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.target_init not in TARGET_INITS:
            raise ConfigError(f"target_init must be one of {TARGET_INITS}")
        if self.wiring not in VICREG_WIRINGS:
            raise ConfigError(f"wiring must be one of {VICREG_WIRINGS}")
        if self.diag_every < 1 or self.diag_images < 1:
            raise ConfigError("diag_every and diag_images must be >= 1")
        if not self.collapse_threshold > 0:
            raise ConfigError("collapse_threshold must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("need beta1, beta2 in [0, 1) and adam_eps > 0")


@dataclass(frozen=True)
class TrainConfig:
    model: NetworkConfig = field(default_factory=NetworkConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    vicreg: VicRegCoefficients = field(default_factory=VicRegCoefficients)
    schedules: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if (self.data.grid_h, self.data.grid_w) != (self.masking.grid_h, self.masking.grid_w):
            raise ConfigError("data and masking grids differ")
        if self.data.patch_dim != self.model.patch_dim:
            raise ConfigError("data.patch_dim must equal model.patch_dim")

    def to_dict(self) -> dict:
        return asdict(self)


# ablations over the regularizer's components, keyed by which parts stay on
ABLATIONS = {
    "full": {},
    "var-cov": {"beta_sim": 0.0},
    "invariance": {"beta_std": 0.0, "beta_cov": 0.0},
    "none": {"beta_vicreg": 0.0},
}


def ablation(config: TrainConfig, name: str) -> TrainConfig:
    """``config`` with the named subset of regularizer terms switched off."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return replace(config, vicreg=replace(config.vicreg, **ABLATIONS[name]))


# ---------------------------------------------------------------- schedules


def _lerp(a: float, b: float, f: float) -> float:
    # exact at both ends: f=0 gives a, f=1 gives b
    return (1.0 - f) * a + f * b


def schedule_value(kind: str, step: int, config: ScheduleConfig | TrainConfig) -> float:
    """Scheduled ``lr``, ``wd`` or ``ema`` momentum at ``step`` in ``[0, total_steps)``.

    lr warms up linearly from ``base_lr`` to ``peak_lr`` over the warmup
    steps and then follows a half cosine down to ``final_lr`` at the last
    step. wd and ema are linear over the whole run.
    """
    sched = config.schedules if isinstance(config, TrainConfig) else config
    total = sched.total_steps
    if not 0 <= step < total:
        raise StepOutOfRange(f"step {step} outside [0, {total})")
    last = total - 1
    if kind == "wd":
        return _lerp(sched.wd_start, sched.wd_end, step / last)
    if kind == "ema":
        return _lerp(sched.ema_start, sched.ema_end, step / last)
    if kind != "lr":
        raise ValueError(f"unknown schedule {kind!r}")
    warm = sched.warmup_steps
    if step < warm:
        return _lerp(sched.base_lr, sched.peak_lr, step / warm)
    f = (step - warm) / (last - warm)
    c = 0.5 * (1.0 + math.cos(math.pi * f))
    if f == 1.0:
        return sched.final_lr
    return c * sched.peak_lr + (1.0 - c) * sched.final_lr


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    no_decay: frozenset[str] | set[str] = frozenset(),
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update of every array in ``params``; returns new params and state.

    Decay is decoupled: ``p <- p - lr*wd*p`` first, then the bias-corrected
    Adam step. Names in ``no_decay`` skip the decay.
    """
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        if wd != 0.0 and name not in no_decay:
            p = p - lr * wd * p
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------- data


def patch_layout(patch_dim: int) -> tuple[int, int]:
    """``(side, channels)`` with the largest square side such that ``side**2`` divides ``patch_dim``."""
    side = max(p for p in range(1, int(math.isqrt(patch_dim)) + 1) if patch_dim % (p * p) == 0)
    return side, patch_dim // (side * side)


def _smooth_pattern(rng, height, width, channels) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    img = np.zeros((height, width, channels))
    for _ in range(3):
        fy, fx = rng.integers(0, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        img += wave[..., None] * rng.normal(size=channels)
    return img / np.sqrt(np.mean(img * img))


def generate_synthetic(spec: SyntheticDatasetSpec) -> np.ndarray:
    """Images built from smooth random Fourier patterns, cut into patches.

    Each image is ``sum_k a_k * pattern_k / sqrt(K) + noise`` with
    ``a ~ N(0, 1)`` and unit-RMS patterns, so pixels have roughly unit
    variance whatever the factor count.
    Returns ``(num_images, grid_h * grid_w, patch_dim)`` in row-major patch
    order.
    """
    rng = np.random.default_rng(spec.seed)
    side, ch = patch_layout(spec.patch_dim)
    height, width = spec.grid_h * side, spec.grid_w * side
    patterns = np.stack([_smooth_pattern(rng, height, width, ch) for _ in range(spec.num_latent_factors)])
    coeffs = rng.normal(size=(spec.num_images, spec.num_latent_factors))
    images = np.einsum("nk,khwc->nhwc", coeffs, patterns) / np.sqrt(spec.num_latent_factors)
    if spec.noise_std > 0:
        images = images + spec.noise_std * rng.normal(size=images.shape)
    patches = images.reshape(spec.num_images, spec.grid_h, side, spec.grid_w, side, ch)
    patches = patches.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(patches.reshape(spec.num_images, spec.grid_h * spec.grid_w, spec.patch_dim))


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    log: MetricsLog
    params: dict[str, np.ndarray]
    report: DiagnosticsReport
    initial_params: dict[str, np.ndarray]


def _random_target(cfg: NetworkConfig, params: dict, rng) -> dict:
    fresh = init_params(cfg, rng)
    out = dict(params)
    for name in encoder_shapes(cfg):
        out[f"tgt.{name}"] = fresh[f"enc.{name}"]
    return out


def train(
    config: TrainConfig,
    data: np.ndarray | None = None,
    on_step: Callable[[int, dict, dict], None] | None = None,
) -> TrainResult:
    """Run the full optimization loop; everything random flows from ``config.run.seed``.

    Each step samples a batch and masks, evaluates the combined objective,
    applies AdamW to the trainable (non-``tgt.``) arrays and then moves the
    target encoder. With stop-gradient the target is an EMA of the context
    encoder; without it the target branch shares the context weights.
    Diagnostics of target-encoder embeddings on a fixed evaluation slice are
    recorded every ``diag_every`` steps and at the last step.
    ``on_step(step, row, params)`` sees each logged row and the parameters
    after that step's updates.
    """
    run, sched = config.run, config.schedules
    if data is None:
        data = generate_synthetic(config.data)
    data = np.asarray(data, dtype=np.float64)
    grid = config.masking.grid_h * config.masking.grid_w
    if data.ndim != 3 or data.shape[1:] != (grid, config.model.patch_dim):
        raise ShapeMismatch(f"data must be (N, {grid}, {config.model.patch_dim}), got {data.shape}")
    if data.shape[0] < run.batch_size:
        raise ConfigError(f"dataset has {data.shape[0]} images, fewer than batch_size {run.batch_size}")

    rng = np.random.default_rng(run.seed)
    net = Network(config.model, rng=rng)
    if run.target_init == "random":
        net.params = _random_target(config.model, net.params, rng)
    initial = {k: v.copy() for k, v in net.params.items()}
    trainable = [k for k in net.params if not k.startswith("tgt.")]
    no_decay = frozenset(k for k in trainable if net.params[k].ndim < 2)
    eval_batch = data[: min(run.diag_images, data.shape[0])]
    m = config.masking

    log = MetricsLog()
    state = AdamState()
    report = None
    for step in range(sched.total_steps):
        lr = schedule_value("lr", step, sched)
        wd = schedule_value("wd", step, sched)
        momentum = schedule_value("ema", step, sched)
        idx = rng.choice(data.shape[0], size=run.batch_size, replace=False)
        masks = sample_masks(
            m.grid_h, m.grid_w, m.num_targets, (m.scale_min, m.scale_max), (m.aspect_min, m.aspect_max), rng
        )
        loss, grads = forward_backward(net, data[idx], masks, config.vicreg, run.wiring, run.stop_grad)
        if not math.isfinite(loss.value):
            raise NonFiniteLoss(step, f"loss became {loss.value} at step {step}", snapshot=dict(loss.parts))

        updated, state = adamw_step(
            {k: net.params[k] for k in trainable},
            grads,
            state,
            lr,
            wd,
            run.beta1,
            run.beta2,
            run.adam_eps,
            no_decay,
        )
        params = {**net.params, **updated}
        if run.stop_grad:
            params = ema_update_network(params, momentum)
        else:
            params = ema_update_network(params, 0.0)
        net.params = params

        row = {"step": step, "loss": loss.value, "lr": lr, "wd": wd, "ema": momentum}
        row.update({k: loss.parts[k] for k in ("jepa", "vicreg", "sim", "std", "cov")})
        if step % run.diag_every == 0 or step == sched.total_steps - 1:
            z = net.target_embeddings(eval_batch)
            if not np.all(np.isfinite(z)):
                raise NonFiniteLoss(step, f"non-finite target embeddings at step {step}", snapshot=dict(loss.parts))
            report = collapse_report(z, run.collapse_threshold, step)
            row.update(
                min_std=report.min_std,
                mean_std=report.mean_std,
                offdiag_cov=report.offdiag_cov_norm,
                eff_rank=report.effective_rank,
                collapsed=report.collapsed,
            )
        log.append(row)
        if on_step is not None:
            on_step(step, row, net.params)
    return TrainResult(log, net.params, report, initial)


def summary(config: TrainConfig, result: TrainResult, elapsed: float | None = None) -> dict:
    """JSON-ready run summary; ``created`` is the only non-deterministic field."""
    final = result.log.final()
    return {
        "schema": SUMMARY_SCHEMA,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "elapsed_seconds": elapsed,
        "steps": len(result.log.rows),
        "config": config.to_dict(),
        "final": {k: v for k, v in final.items() if v is not None},
        "diagnostics": result.report.to_dict(),
    }


def write_summary(path, data: dict) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
