"""Block masking over a patch grid and the masked embedding-prediction loss."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyContext, EmptyTargets, GridTooSmall, ShapeMismatch
from .vicreg import LossWithGrad, Projector, VicRegCoefficients, cross_block_vicreg

MIN_GRID = 4
MAX_MASK_ATTEMPTS = 16


@dataclass(frozen=True)
class BlockMaskSet:
    """Context patch indices and M rectangular target blocks on a row-major grid."""

    grid_h: int
    grid_w: int
    context: tuple[int, ...]
    targets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        size = self.grid_h * self.grid_w
        if not self.targets:
            raise EmptyTargets("at least one target block is required")
        union: set[int] = set()
        for block in self.targets:
            if not block:
                raise EmptyTargets("target block is empty")
            _check_rectangle(block, self.grid_w)
            union.update(block)
        for idx in (*self.context, *union):
            if not 0 <= idx < size:
                raise ValueError(f"patch index {idx} outside {self.grid_h}x{self.grid_w} grid")
        if union.intersection(self.context):
            raise ValueError("context overlaps target blocks")

    @property
    def num_targets(self) -> int:
        return len(self.targets)

    def to_json(self) -> str:
        return json.dumps(
            {
                "grid_h": self.grid_h,
                "grid_w": self.grid_w,
                "context": list(self.context),
                "targets": [list(t) for t in self.targets],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "BlockMaskSet":
        raw = json.loads(text)
        return cls(
            grid_h=int(raw["grid_h"]),
            grid_w=int(raw["grid_w"]),
            context=tuple(int(i) for i in raw["context"]),
            targets=tuple(tuple(int(i) for i in t) for t in raw["targets"]),
        )


def _check_rectangle(block: Sequence[int], grid_w: int) -> None:
    rows = {i // grid_w for i in block}
    cols = {i % grid_w for i in block}
    contiguous = (
        max(rows) - min(rows) + 1 == len(rows)
        and max(cols) - min(cols) + 1 == len(cols)
        and len(rows) * len(cols) == len(set(block))
    )
    if not contiguous:
        raise ValueError("target block is not a contiguous rectangle")


def _sample_block(rng, grid_h, grid_w, scale_range, aspect_range) -> tuple[int, ...]:
    scale = rng.uniform(*scale_range)
    aspect = rng.uniform(*aspect_range)
    area = scale * grid_h * grid_w
    h = min(max(int(round(math.sqrt(area * aspect))), 1), grid_h)
    w = min(max(int(round(math.sqrt(area / aspect))), 1), grid_w)
    top = int(rng.integers(0, grid_h - h + 1))
    left = int(rng.integers(0, grid_w - w + 1))
    return tuple(r * grid_w + c for r in range(top, top + h) for c in range(left, left + w))


def sample_masks(
    grid_h: int,
    grid_w: int,
    num_targets: int = 4,
    scale_range: tuple[float, float] = (0.15, 0.2),
    aspect_range: tuple[float, float] = (0.75, 1.5),
    rng: np.random.Generator | int | None = None,
) -> BlockMaskSet:
    """Draw ``num_targets`` possibly-overlapping rectangles; context is the rest.

    A block covers ``scale * grid_h * grid_w`` patches with height/width
    ratio ``aspect``. If the union of targets swallows the whole grid the
    draw is repeated, at most 16 times.
    """
    if grid_h < MIN_GRID or grid_w < MIN_GRID:
        raise GridTooSmall(f"grid must be at least {MIN_GRID}x{MIN_GRID}, got {grid_h}x{grid_w}")
    if num_targets < 1:
        raise ValueError("num_targets must be >= 1")
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise ValueError(f"scale_range must lie in (0, 1], got {scale_range}")
    if not 0 < aspect_range[0] <= aspect_range[1]:
        raise ValueError(f"aspect_range must be positive, got {aspect_range}")
    rng = np.random.default_rng(rng)

    everything = range(grid_h * grid_w)
    for _ in range(MAX_MASK_ATTEMPTS):
        targets = tuple(
            _sample_block(rng, grid_h, grid_w, scale_range, aspect_range) for _ in range(num_targets)
        )
        covered = set().union(*targets)
        context = tuple(i for i in everything if i not in covered)
        if context:
            return BlockMaskSet(grid_h, grid_w, context, targets)
    raise EmptyContext(f"targets covered the whole grid in {MAX_MASK_ATTEMPTS} attempts")


@dataclass
class PatchPrediction:
    """Per-block predicted and target embeddings, each ``[batch, |B_i|, d]``."""

    predicted: list[np.ndarray]
    target: list[np.ndarray]

    def __post_init__(self):
        if len(self.predicted) != len(self.target):
            raise ShapeMismatch("predicted and target block counts differ")
        for p, t in zip(self.predicted, self.target):
            if np.shape(p) != np.shape(t):
                raise ShapeMismatch(f"block shapes differ: {np.shape(p)} vs {np.shape(t)}")
            if np.ndim(p) != 3:
                raise ShapeMismatch(f"blocks must be [batch, patches, dim], got {np.shape(p)}")


def jepa_loss(pred: PatchPrediction) -> LossWithGrad:
    """``(1/M) sum_i sum_{j in B_i} ||pred_j - target_j||^2``, averaged over the batch.

    Targets are constants here; only the predictions receive a gradient.
    """
    m = len(pred.predicted)
    if m == 0 or any(np.shape(p)[1] == 0 for p in pred.predicted):
        raise EmptyTargets("no target patches to predict")
    n = np.shape(pred.predicted[0])[0]
    scale = 1.0 / (m * n)
    value = 0.0
    grads = []
    for p, t in zip(pred.predicted, pred.target):
        diff = np.asarray(p, dtype=np.float64) - np.asarray(t, dtype=np.float64)
        value += float(np.sum(diff * diff))
        grads.append(2.0 * scale * diff)
    return LossWithGrad(value * scale, (grads,))


def combined_loss(
    pred: PatchPrediction,
    zc,
    projector: Projector | None = None,
    coeffs: VicRegCoefficients = VicRegCoefficients(),
) -> LossWithGrad:
    """``jepa_loss + beta_vicreg * cross_block_vicreg``.

    ``grads`` is ``(prediction grads per block, zc grads)``. With
    ``beta_vicreg == 0`` the regularizer is skipped and the value equals
    :func:`jepa_loss` exactly.
    """
    jl = jepa_loss(pred)
    parts = {"jepa": jl.value, "vicreg": 0.0, "sim": 0.0, "std": 0.0, "cov": 0.0}
    if coeffs.beta_vicreg == 0.0:
        zero = np.zeros_like(zc) if isinstance(zc, np.ndarray) else [np.zeros_like(b) for b in zc]
        return LossWithGrad(jl.value, (jl.grad, zero), parts=parts)

    reg = cross_block_vicreg(zc, projector, coeffs)
    beta = coeffs.beta_vicreg
    parts.update(reg.parts)
    parts["vicreg"] = reg.value
    if isinstance(reg.grad, np.ndarray):
        zc_grad = beta * reg.grad
    else:
        zc_grad = [beta * g for g in reg.grad]
    param_grads = {k: beta * v for k, v in reg.param_grads.items()}
    return LossWithGrad(jl.value + beta * reg.value, (jl.grad, zc_grad), param_grads, parts)
