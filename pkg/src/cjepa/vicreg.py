"""Variance, covariance and invariance regularizers with analytic gradients.

Every loss returns a :class:`LossWithGrad` whose ``grads`` tuple holds one
gradient per positional input, in the same shape as that input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import ShapeMismatch, TooFewBlocks
from .linalg import as_batch, as_matrix

Pullback = Callable[[np.ndarray], tuple[np.ndarray, dict[str, np.ndarray]]]


class Projector(Protocol):
    """Maps ``(n, d_in)`` to ``(n, d_out)`` and returns a pullback for backprop.

    The pullback takes the output gradient and returns the input gradient
    plus a dict of parameter gradients (empty for parameter-free maps).
    """

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, Pullback]: ...


def identity_projector(x: np.ndarray) -> tuple[np.ndarray, Pullback]:
    return x, lambda g: (g, {})


@dataclass(frozen=True)
class VicRegCoefficients:
    beta_sim: float = 25.0
    beta_std: float = 25.0
    beta_cov: float = 1.0
    beta_vicreg: float = 0.001
    gamma: float = 1.0
    epsilon: float = 1e-4

    def __post_init__(self):
        for name in ("beta_sim", "beta_std", "beta_cov", "beta_vicreg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class LossWithGrad:
    value: float
    grads: tuple
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)
    parts: dict[str, float] = field(default_factory=dict)

    @property
    def grad(self):
        return self.grads[0]


def variance_term(z, gamma: float = 1.0, epsilon: float = 1e-4) -> LossWithGrad:
    """Hinge on per-dimension std: ``mean_j max(0, gamma - sqrt(Var(z_j) + eps))``."""
    z = as_batch(z, "z")
    n, d = z.shape
    centered = z - z.mean(axis=0)
    std = np.sqrt(np.einsum("ij,ij->j", centered, centered) / (n - 1) + epsilon)
    gap = gamma - std
    active = gap > 0.0
    value = float(np.sum(np.where(active, gap, 0.0)) / d)
    # d std_j / d z_ij = (z_ij - mean_j) / ((n - 1) * std_j); the mean's gradient cancels
    coef = np.where(active, -1.0 / (d * (n - 1) * std), 0.0)
    return LossWithGrad(value, (centered * coef,))


def covariance_term(z) -> LossWithGrad:
    """Scaled squared off-diagonal covariance: ``(1/d) sum_{i != j} C_ij^2``.

    A single-dimension batch has no off-diagonal entries and scores zero.
    """
    z = as_batch(z, "z")
    n, d = z.shape
    centered = z - z.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    off = cov.copy()
    np.fill_diagonal(off, 0.0)
    value = float(np.sum(off * off) / d)
    grad = centered @ (off + off.T) * (2.0 / (d * (n - 1)))
    return LossWithGrad(value, (grad,))


def invariance_term(a, b) -> LossWithGrad:
    """Mean over rows of the squared Euclidean distance ``||a_i - b_i||^2``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    n = a.shape[0]
    value = float(np.sum(diff * diff) / n)
    g = diff * (2.0 / n)
    return LossWithGrad(value, (g, -g))


def vicreg_loss(a, b, coeffs: VicRegCoefficients = VicRegCoefficients()) -> LossWithGrad:
    """Weighted VICReg: invariance between branches, std/cov averaged over both."""
    a = as_batch(a, "a")
    b = as_batch(b, "b")
    inv = invariance_term(a, b)
    var_a = variance_term(a, coeffs.gamma, coeffs.epsilon)
    var_b = variance_term(b, coeffs.gamma, coeffs.epsilon)
    cov_a = covariance_term(a)
    cov_b = covariance_term(b)
    std_value = 0.5 * (var_a.value + var_b.value)
    cov_value = 0.5 * (cov_a.value + cov_b.value)
    value = coeffs.beta_sim * inv.value + coeffs.beta_std * std_value + coeffs.beta_cov * cov_value
    ga = (
        coeffs.beta_sim * inv.grads[0]
        + 0.5 * coeffs.beta_std * var_a.grad
        + 0.5 * coeffs.beta_cov * cov_a.grad
    )
    gb = (
        coeffs.beta_sim * inv.grads[1]
        + 0.5 * coeffs.beta_std * var_b.grad
        + 0.5 * coeffs.beta_cov * cov_b.grad
    )
    parts = {"sim": inv.value, "std": std_value, "cov": cov_value}
    return LossWithGrad(float(value), (ga, gb), parts=parts)


def _split_blocks(zc) -> list[np.ndarray]:
    if isinstance(zc, np.ndarray):
        if zc.ndim != 4:
            raise ShapeMismatch(f"expected [batch, blocks, patches, dim], got {zc.shape}")
        return [zc[:, i] for i in range(zc.shape[1])]
    blocks = [np.asarray(b, dtype=np.float64) for b in zc]
    for blk in blocks:
        if blk.ndim != 3:
            raise ShapeMismatch(f"each block must be [batch, patches, dim], got {blk.shape}")
    return blocks


def cross_block_vicreg(
    zc: np.ndarray | Sequence[np.ndarray],
    projector: Projector | None = None,
    coeffs: VicRegCoefficients = VicRegCoefficients(),
) -> LossWithGrad:
    """VICReg between every ordered pair of target blocks.

    ``zc`` is either a ``[batch, blocks, patches, dim]`` array or a sequence
    of per-block ``[batch, patches_i, dim]`` arrays (blocks may differ in
    size). Each block is averaged over its patches, projected, and
    ``vicreg_loss`` is accumulated over all ordered pairs ``i != j`` and
    divided by ``blocks * (blocks - 1)``. The returned gradient has the
    same layout as ``zc``; projector parameter gradients are summed into
    ``param_grads``.
    """
    blocks = _split_blocks(zc)
    m = len(blocks)
    if m < 2:
        raise TooFewBlocks(f"need at least 2 blocks, got {m}")
    projector = projector or identity_projector

    projected, pullbacks = [], []
    for blk in blocks:
        out, pull = projector(blk.mean(axis=1))
        projected.append(out)
        pullbacks.append(pull)

    norm = m * (m - 1)
    value = 0.0
    parts = {"sim": 0.0, "std": 0.0, "cov": 0.0}
    d_proj = [np.zeros_like(p) for p in projected]
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            term = vicreg_loss(projected[i], projected[j], coeffs)
            value += term.value
            for key in parts:
                parts[key] += term.parts[key]
            d_proj[i] += term.grads[0]
            d_proj[j] += term.grads[1]
    value /= norm
    parts = {k: v / norm for k, v in parts.items()}

    param_grads: dict[str, np.ndarray] = {}
    block_grads = []
    for blk, pull, g in zip(blocks, pullbacks, d_proj):
        g_mean, pg = pull(g / norm)
        for name, arr in pg.items():
            param_grads[name] = param_grads[name] + arr if name in param_grads else arr
        p = blk.shape[1]
        block_grads.append(np.broadcast_to(g_mean[:, None, :] / p, blk.shape).copy())

    grad = np.stack(block_grads, axis=1) if isinstance(zc, np.ndarray) else block_grads
    return LossWithGrad(float(value), (grad,), param_grads=param_grads, parts=parts)
