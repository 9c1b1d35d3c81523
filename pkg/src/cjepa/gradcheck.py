"""Central finite-difference checks of every analytic gradient in the package."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import vicreg
from .jepa import PatchPrediction, combined_loss, jepa_loss, sample_masks
from .network import Network, NetworkConfig, forward_backward
from .vicreg import VicRegCoefficients

FD_STEP = 1e-5
TOLERANCE = 1e-6


def central_difference(f: Callable[[], float], x: np.ndarray, index, h: float = FD_STEP) -> float:
    """``(f(x + h e_i) - f(x - h e_i)) / 2h`` with ``x`` perturbed in place and restored."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2.0 * h)


def numeric_gradient(f, x: np.ndarray, indices=None, h: float = FD_STEP) -> np.ndarray:
    """Finite-difference gradient of ``f`` at ``x`` over ``indices`` (default: all entries)."""
    if indices is None:
        indices = list(np.ndindex(x.shape))
    return np.array([central_difference(f, x, idx, h) for idx in indices])


def relative_error(analytic, numeric, loss_scale: float = 1.0) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor = 1e-3 * max(1, |loss|)`` sits above the roundoff noise of a
    central difference (about ``eps * |loss| / h``), so entries whose true
    gradient is zero are judged absolutely instead of dividing noise by noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    floor = 1e-3 * max(1.0, abs(loss_scale))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def _check_input(name, loss_fn, inputs, which, rng, samples=None) -> CheckResult:
    x = inputs[which]
    if samples is None or samples >= x.size:
        idx = list(np.ndindex(x.shape))
    else:
        flat = rng.choice(x.size, size=samples, replace=False)
        idx = [np.unravel_index(i, x.shape) for i in flat]
    result = loss_fn(*inputs)
    analytic = np.array([result.grads[which][i] for i in idx])
    numeric = numeric_gradient(lambda: loss_fn(*inputs).value, x, idx)
    return CheckResult(name, relative_error(analytic, numeric, result.value))


def check_loss_terms(seed: int, perturb: str | None = None) -> list[CheckResult]:
    """Check every loss term's gradient on random inputs drawn from ``seed``.

    ``perturb`` names a component whose analytic gradient is deliberately
    corrupted (negative control for the command-line harness).
    """
    rng = np.random.default_rng(seed)
    n, d = 16, 8
    scale = rng.uniform(0.3, 1.5)
    a = rng.normal(size=(n, d)) * scale
    b = a + 0.3 * rng.normal(size=(n, d))
    coeffs = VicRegCoefficients(beta_sim=rng.uniform(0.5, 2), beta_std=rng.uniform(0.5, 2), beta_cov=rng.uniform(0.5, 2))

    def corrupt(name, fn):
        if perturb != name:
            return fn

        def wrapped(*args):
            out = fn(*args)
            g = list(out.grads)
            g[0] = g[0] * 1.01 if isinstance(g[0], np.ndarray) else [x * 1.01 for x in g[0]]
            return vicreg.LossWithGrad(out.value, tuple(g), out.param_grads, out.parts)

        return wrapped

    var = corrupt("variance", lambda z: vicreg.variance_term(z, coeffs.gamma, coeffs.epsilon))
    cov = corrupt("covariance", vicreg.covariance_term)
    inv = corrupt("invariance", vicreg.invariance_term)
    vic = corrupt("vicreg", lambda x, y: vicreg.vicreg_loss(x, y, coeffs))

    results = [
        _check_input("variance", var, [a], 0, rng),
        _check_input("covariance", cov, [a], 0, rng),
        _check_input("invariance[a]", inv, [a, b], 0, rng),
        _check_input("invariance[b]", inv, [a, b], 1, rng),
        _check_input("vicreg[a]", vic, [a, b], 0, rng),
        _check_input("vicreg[b]", vic, [a, b], 1, rng),
    ]

    blocks = rng.normal(size=(n, 4, 3, d))
    cross = corrupt("cross_block", lambda z: vicreg.cross_block_vicreg(z, None, coeffs))
    results.append(_check_input("cross_block", cross, [blocks], 0, rng, samples=48))

    pred = [rng.normal(size=(3, k, d)) for k in (4, 6)]
    tgt = [rng.normal(size=(3, k, d)) for k in (4, 6)]

    def jepa_fn(p0, p1):
        out = jepa_loss(PatchPrediction([p0, p1], tgt))
        return vicreg.LossWithGrad(out.value, tuple(out.grad))

    jepa_fn = corrupt("jepa", jepa_fn)
    results.append(_check_input("jepa[block0]", jepa_fn, pred, 0, rng))
    results.append(_check_input("jepa[block1]", jepa_fn, pred, 1, rng))

    full = VicRegCoefficients(beta_vicreg=0.5)

    def combo(p0, p1):
        out = combined_loss(PatchPrediction([p0, p1], tgt), [p0, p1], None, full)
        g = [x + y for x, y in zip(out.grads[0], out.grads[1])]
        return vicreg.LossWithGrad(out.value, tuple(g))

    combo = corrupt("combined", combo)
    results.append(_check_input("combined[block0]", combo, pred, 0, rng))
    results.append(_check_input("combined[block1]", combo, pred, 1, rng))
    return results


def check_network(
    seed: int,
    config: NetworkConfig | None = None,
    batch: int = 4,
    grid: int = 8,
    samples_per_array: int = 6,
    wiring: str = "predictor",
    stop_grad: bool = True,
    perturb: str | None = None,
) -> list[CheckResult]:
    """Full-model check: every parameter array against FD of the combined loss.

    ``tgt.*`` arrays must have exactly zero gradient under stop-gradient;
    their "error" is the largest absolute analytic entry.
    """
    rng = np.random.default_rng(seed)
    cfg = config or NetworkConfig(patch_dim=12, embed_dim=16, hidden_dim=32)
    net = Network(cfg, rng=rng)
    # nonzero biases and mask token so their gradients are exercised away from init
    for name, arr in net.params.items():
        if arr.ndim == 1:
            net.params[name] = arr + 0.1 * rng.normal(size=arr.shape)
    patches = rng.normal(size=(batch, grid * grid, cfg.patch_dim))
    masks = sample_masks(grid, grid, rng=rng)
    coeffs = VicRegCoefficients(beta_vicreg=float(rng.uniform(0.05, 0.5)))

    def loss():
        return forward_backward(net, patches, masks, coeffs, wiring, stop_grad)[0].value

    value, grads = forward_backward(net, patches, masks, coeffs, wiring, stop_grad)
    if perturb is not None:
        if perturb not in grads:
            raise KeyError(f"unknown parameter {perturb!r}")
        grads[perturb] = grads[perturb] * 1.01 + 1e-3

    results = []
    for name, arr in net.params.items():
        if name.startswith("tgt.") and stop_grad:
            results.append(CheckResult(name, float(np.max(np.abs(grads[name])))))
            continue
        k = min(samples_per_array, arr.size)
        flat = rng.choice(arr.size, size=k, replace=False)
        idx = [np.unravel_index(i, arr.shape) for i in flat]
        analytic = np.array([grads[name][i] for i in idx])
        numeric = numeric_gradient(loss, net.params[name], idx)
        results.append(CheckResult(name, relative_error(analytic, numeric, value.value)))
    return results
