"""Eigenmode dynamics of a linear predictor aligned with the representation correlation.

The predictor is built as ``W_P = U diag(s)^alpha U^T`` from the correlation
eigendecomposition ``C = U diag(s) U^T``; each representation coordinate in
that eigenbasis then follows a scalar linear ODE whose rate depends on the
gradient regime:

=====================  =================================
regime                 d z_k / dt
=====================  =================================
``stop-grad``          ``eta * lam * (1 - lam) * z``
``no-stop-grad``       ``-eta * (1 - lam)**2 * z``
``no-predictor``       ``0``
=====================  =================================
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import BatchTooSmall, NegativeEigenvalue, RankDeficientWarning, ShapeMismatch, StepTooLarge
from .linalg import as_batch, as_matrix, symmetric_eigendecompose

# largest |rate * h| taken per internal RK4 substep; keeps the local error near 1e-13
MAX_RATE_STEP = 0.01
# a single explicit RK4 step is unstable for rate * h below about -2.785
RK4_STABILITY_LIMIT = 2.785
MAX_SUBSTEPS = 100_000
CLAMP_TOL = 1e-10
RANK_TOL = 1e-12


class Regime(str, Enum):
    STOP_GRAD = "stop-grad"
    NO_STOP_GRAD = "no-stop-grad"
    NO_PREDICTOR = "no-predictor"


@dataclass(frozen=True)
class DynamicsConfig:
    eta: float = 0.1
    dt: float = 0.01
    steps: int = 1000
    regime: Regime = Regime.STOP_GRAD
    adaptive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass(frozen=True)
class PredictorEigenSpec:
    basis: np.ndarray
    corr_eigenvalues: np.ndarray
    alpha: float
    predictor_eigenvalues: np.ndarray

    @property
    def weight(self) -> np.ndarray:
        w = (self.basis * self.predictor_eigenvalues) @ self.basis.T
        return 0.5 * (w + w.T)


@dataclass
class ModeTrajectory:
    times: np.ndarray
    values: np.ndarray
    regime: Regime
    lam: float


@dataclass
class CoupledResult:
    times: np.ndarray
    lambdas: np.ndarray
    corr_eigenvalues: np.ndarray
    regime: Regime
    alpha: float
    rank_deficient_steps: list[int] = field(default_factory=list)
    final_batch: np.ndarray | None = None


def build_predictor(corr, alpha: float) -> PredictorEigenSpec:
    """Diagonalize ``corr`` and raise its eigenvalues to ``alpha``.

    Eigenvalues down to ``-1e-10`` are clamped to zero; anything more
    negative is rejected.
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    eig = symmetric_eigendecompose(as_matrix(corr, "corr"))
    s = eig.eigenvalues
    scale = max(1.0, float(np.max(np.abs(s)))) if s.size else 1.0
    if s.size and s[-1] < -CLAMP_TOL * scale:
        raise NegativeEigenvalue(f"correlation eigenvalue {s[-1]:.3e} is negative")
    s = np.clip(s, 0.0, None)
    return PredictorEigenSpec(eig.basis, s, float(alpha), s**alpha)


def correlation(z, centered: bool = False) -> np.ndarray:
    """Second-moment matrix ``Z^T Z / n`` (or the centered covariance with ``1/n``)."""
    z = as_batch(z, "z", min_rows=1)
    if centered:
        z = z - z.mean(axis=0)
    c = z.T @ z / z.shape[0]
    return 0.5 * (c + c.T)


def eigenbasis_loss_equivalence(z, z_target, spec: PredictorEigenSpec, num_blocks: int = 1) -> tuple[float, float]:
    """Masked prediction loss of a linear predictor computed two ways.

    ``original``: ``(1/M) sum_j ||W_P z_j - z^a_j||^2`` in the input basis.
    ``eigenbasis``: ``(1/M) sum_j sum_k (lam_k zhat_jk - zhat^a_jk)^2`` with
    ``zhat = U^T z``. Rows of ``z`` / ``z_target`` are the patches of all
    ``num_blocks`` target blocks.
    """
    z = as_matrix(z, "z")
    za = as_matrix(z_target, "z_target")
    k = spec.basis.shape[0]
    if z.shape != za.shape or z.shape[1] != k:
        raise ShapeMismatch(f"expected matching (N, {k}) arrays, got {z.shape} and {za.shape}")
    resid = z @ spec.weight.T - za
    original = float(np.sum(resid * resid)) / num_blocks
    zhat = z @ spec.basis
    zahat = za @ spec.basis
    eig_resid = zhat * spec.predictor_eigenvalues - zahat
    eigen = float(np.sum(eig_resid * eig_resid)) / num_blocks
    return original, eigen


def mode_rate(lam: float, eta: float, regime: Regime) -> float:
    """Linear rate ``r`` in ``dz/dt = r z`` for one eigenmode."""
    regime = Regime(regime)
    if regime is Regime.STOP_GRAD:
        return eta * lam * (1.0 - lam)
    if regime is Regime.NO_STOP_GRAD:
        return -eta * (1.0 - lam) ** 2
    return 0.0


def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], y: np.ndarray, h: float) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def substeps_for(rate_bound: float, dt: float, adaptive: bool = True) -> int:
    """RK4 substeps per output step so that ``|rate| * h`` stays small.

    With ``adaptive=False`` exactly one step is taken and
    :class:`StepTooLarge` is raised outside the RK4 stability interval.
    """
    product = abs(rate_bound) * dt
    if not adaptive:
        if product > RK4_STABILITY_LIMIT:
            raise StepTooLarge(f"|rate|*dt = {product:.3g} exceeds RK4 stability limit")
        return 1
    n = max(1, math.ceil(product / MAX_RATE_STEP))
    if n > MAX_SUBSTEPS:
        raise StepTooLarge(f"|rate|*dt = {product:.3g} needs {n} substeps (> {MAX_SUBSTEPS})")
    return n


def integrate_linear(rates: np.ndarray, y0: np.ndarray, dt: float, steps: int, adaptive: bool = True) -> np.ndarray:
    """RK4 integration of ``dy/dt = rates * y`` (elementwise); returns ``(steps + 1, *y0.shape)``."""
    rates = np.asarray(rates, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    sub = substeps_for(float(np.max(np.abs(rates))) if rates.size else 0.0, dt, adaptive)
    h = dt / sub
    out = np.empty((steps + 1, *y.shape))
    out[0] = y
    for i in range(steps):
        for _ in range(sub):
            y = rk4_step(lambda v: rates * v, y, h)
        out[i + 1] = y
    return out


def integrate_mode(lam: float, config: DynamicsConfig, z0: float) -> ModeTrajectory:
    """Trajectory of one eigenmode coordinate under the configured regime."""
    if config.regime is Regime.NO_PREDICTOR:
        lam = 1.0
    rate = mode_rate(lam, config.eta, config.regime)
    values = integrate_linear(np.array(rate), np.array(z0, dtype=np.float64), config.dt, config.steps, config.adaptive)
    times = np.arange(config.steps + 1) * config.dt
    return ModeTrajectory(times, values, config.regime, float(lam))


def closed_form(lam: float, config: DynamicsConfig, z0: float, times: np.ndarray) -> np.ndarray:
    lam = 1.0 if config.regime is Regime.NO_PREDICTOR else lam
    return z0 * np.exp(mode_rate(lam, config.eta, config.regime) * np.asarray(times))


def integrate_mode_pair(lam: float, config: DynamicsConfig, z0: float, za0: float | None = None) -> np.ndarray:
    """Two-variable form before the expectation step: online ``z`` and target ``z^a``.

    The target copies the online weights, so both move with the online
    gradient; with ``za0 == z0`` this reduces to :func:`integrate_mode`.
    Returns ``(steps + 1, 2)`` columns ``[z, z^a]``.
    """
    za0 = z0 if za0 is None else za0
    eta, regime = config.eta, config.regime
    if regime is Regime.NO_PREDICTOR:
        lam = 1.0

    def rhs(y):
        z, za = y
        if regime is Regime.NO_STOP_GRAD:
            dz = -eta * (lam * z - za) * (lam - 1.0)
        else:
            dz = eta * lam * (za - lam * z)
        return np.array([dz, dz])

    bound = eta * max(abs(lam) * (1 + abs(lam)), abs(lam - 1.0) * (abs(lam) + 1))
    sub = substeps_for(bound, config.dt, config.adaptive)
    h = config.dt / sub
    y = np.array([z0, za0], dtype=np.float64)
    out = np.empty((config.steps + 1, 2))
    out[0] = y
    for i in range(config.steps):
        for _ in range(sub):
            y = rk4_step(rhs, y, h)
        out[i + 1] = y
    return out


def _match_modes(prev_basis: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Permutation of ``basis`` columns that best follows ``prev_basis`` (greedy on |overlap|)."""
    overlap = np.abs(prev_basis.T @ basis)
    k = overlap.shape[0]
    perm = np.full(k, -1)
    taken = np.zeros(k, dtype=bool)
    for _ in range(k):
        masked = np.where(taken[None, :] | (perm[:, None] >= 0), -1.0, overlap)
        i, j = np.unravel_index(np.argmax(masked), masked.shape)
        perm[i] = j
        taken[j] = True
    return perm


def coupled_simulate(batch, alpha: float, config: DynamicsConfig, centered: bool = False) -> CoupledResult:
    """Co-evolve a batch of representations with the predictor built from it.

    Each step rebuilds ``W_P`` from the current correlation, advances every
    eigenmode coordinate of every row for ``dt`` under the regime, and
    records the predictor eigenvalues (mode order tracked by eigenvector
    overlap so each column is one mode's time series).
    """
    z = as_batch(batch, "batch")
    n, d = z.shape
    if n < d + 1:
        raise BatchTooSmall(f"need n >= d + 1 rows for a full-rank correlation, got n={n}, d={d}")
    regime = config.regime
    lambdas = np.empty((config.steps + 1, d))
    corr_eigs = np.empty((config.steps + 1, d))
    deficient: list[int] = []
    prev_basis = None

    def snapshot(step):
        nonlocal prev_basis
        spec = build_predictor(correlation(z, centered), alpha)
        basis, s, lam = spec.basis, spec.corr_eigenvalues, spec.predictor_eigenvalues
        if prev_basis is not None:
            perm = _match_modes(prev_basis, basis)
            basis, s, lam = basis[:, perm], s[perm], lam[perm]
        prev_basis = basis
        if regime is Regime.NO_PREDICTOR:
            lam = np.ones(d)
        if regime is Regime.STOP_GRAD and np.min(s) < RANK_TOL:
            deficient.append(step)
        corr_eigs[step] = s
        lambdas[step] = lam
        return basis, lam

    basis, lam = snapshot(0)
    for step in range(1, config.steps + 1):
        rates = np.array([mode_rate(l, config.eta, regime) for l in lam])
        if np.any(rates != 0.0):
            # a zero rate leaves every row untouched; skipping avoids basis round-off
            coords = z @ basis
            coords = integrate_linear(rates[None, :], coords, config.dt, 1, config.adaptive)[-1]
            z = coords @ basis.T
        basis, lam = snapshot(step)

    if deficient:
        warnings.warn(
            f"correlation rank-deficient (eigenvalue < {RANK_TOL}) at {len(deficient)} steps, first {deficient[0]}",
            RankDeficientWarning,
            stacklevel=2,
        )
    times = np.arange(config.steps + 1) * config.dt
    return CoupledResult(times, lambdas, corr_eigs, regime, float(alpha), deficient, z)


def write_mode_csv(path: str | Path, trajectories: list[ModeTrajectory]) -> None:
    """Columns ``time, mode, value`` with one row per (time, mode)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "mode", "value"])
        for mode, traj in enumerate(trajectories):
            for t, v in zip(traj.times, traj.values):
                writer.writerow([repr(float(t)), mode, repr(float(v))])


def write_coupled_csv(path: str | Path, result: CoupledResult) -> None:
    """Columns ``time, mode, value, lambda``; value is the correlation eigenvalue."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "mode", "value", "lambda"])
        for i, t in enumerate(result.times):
            for k in range(result.lambdas.shape[1]):
                writer.writerow(
                    [repr(float(t)), k, repr(float(result.corr_eigenvalues[i, k])), repr(float(result.lambdas[i, k]))]
                )
