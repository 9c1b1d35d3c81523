"""Desk-scale encoder / predictor / projector stack with exact hand-written backprop.

Parameters live in one flat ``dict[str, ndarray]``:

* ``enc.*`` context encoder, ``tgt.*`` target encoder (same shapes, EMA copy)
* ``pred.*`` predictor, ``proj.*`` projector, ``mask_token``

The encoder is a linear patch embedding followed by ``num_layers`` residual
blocks ``h + W2 act(W1 h + b1) + b2``. It acts on every patch independently.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from .errors import MomentumOutOfRange, NoCachedForward, NonFinite, ShapeMismatch
from .jepa import BlockMaskSet, PatchPrediction, combined_loss
from .vicreg import LossWithGrad, VicRegCoefficients

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_tanh(x):
    return np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))


def gelu(x):
    return 0.5 * x * (1.0 + _gelu_tanh(x))


def _gelu_grad_from(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def gelu_grad(x):
    return _gelu_grad_from(x, _gelu_tanh(x))


def _gelu_fwd(x):
    t = _gelu_tanh(x)
    return 0.5 * x * (1.0 + t), t


def _tanh_fwd(x):
    t = np.tanh(x)
    return t, t


# name -> (forward returning (value, aux), derivative from (input, aux))
ACTIVATIONS = {
    "gelu": (_gelu_fwd, _gelu_grad_from),
    "tanh": (_tanh_fwd, lambda x, t: 1.0 - t * t),
    "identity": (lambda x: (x, None), lambda x, _: np.ones_like(x)),
}

PREDICTOR_KINDS = ("linear", "mlp")
VICREG_WIRINGS = ("predictor", "encoder")


@dataclass(frozen=True)
class NetworkConfig:
    patch_dim: int = 12
    embed_dim: int = 32
    num_layers: int = 2
    hidden_dim: int = 64
    activation: str = "gelu"
    predictor: str = "mlp"
    pos_encoding: bool = True

    def __post_init__(self):
        for name in ("patch_dim", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.predictor not in PREDICTOR_KINDS:
            raise ValueError(f"predictor must be one of {PREDICTOR_KINDS}")

    @property
    def predictor_hidden(self) -> int:
        return 2 * self.embed_dim

    @property
    def projector_dim(self) -> int:
        return 2 * self.embed_dim


def encoder_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.embed_dim, cfg.hidden_dim
    shapes = {"embed.w": (cfg.patch_dim, d), "embed.b": (d,)}
    for layer in range(cfg.num_layers):
        shapes[f"blocks.{layer}.w1"] = (d, h)
        shapes[f"blocks.{layer}.b1"] = (h,)
        shapes[f"blocks.{layer}.w2"] = (h, d)
        shapes[f"blocks.{layer}.b2"] = (d,)
    return shapes


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.embed_dim
    shapes = {}
    for prefix in ("enc", "tgt"):
        shapes.update({f"{prefix}.{k}": v for k, v in encoder_shapes(cfg).items()})
    if cfg.predictor == "linear":
        shapes["pred.w"] = (d, d)
    else:
        ph = cfg.predictor_hidden
        shapes.update({"pred.w1": (d, ph), "pred.b1": (ph,), "pred.w2": (ph, d), "pred.b2": (d,)})
    pd = cfg.projector_dim
    shapes.update({"proj.w1": (d, pd), "proj.b1": (pd,), "proj.w2": (pd, pd), "proj.b2": (pd,)})
    shapes["mask_token"] = (d,)
    return shapes


def init_params(cfg: NetworkConfig, rng: np.random.Generator | int | None = None) -> dict[str, np.ndarray]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases and mask token zero.

    The target encoder starts as an exact copy of the context encoder.
    """
    rng = np.random.default_rng(rng)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("tgt."):
            continue
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    for name in encoder_shapes(cfg):
        params[f"tgt.{name}"] = params[f"enc.{name}"].copy()
    return dict(sorted(params.items()))


@lru_cache(maxsize=32)
def sincos_table(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position table of shape ``(grid_h * grid_w, dim)``.

    Half the channels encode the row, half the column; an odd leftover
    channel stays zero.
    """
    half = dim // 2
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)

    def encode(pos, width):
        quarter = width // 2
        out = np.zeros((pos.size, width))
        if quarter:
            omega = 1.0 / 10000.0 ** (np.arange(quarter) / quarter)
            angle = pos[:, None] * omega[None, :]
            out[:, :quarter] = np.sin(angle)
            out[:, quarter : 2 * quarter] = np.cos(angle)
        return out

    table = np.zeros((grid_h * grid_w, dim))
    table[:, :half] = encode(rows.astype(float), half)
    table[:, half : 2 * half] = encode(cols.astype(float), half)
    table.setflags(write=False)
    return table


# ---------------------------------------------------------------- primitives


def _mlp2_forward(x, w1, b1, w2, b2, act):
    u = x @ w1 + b1
    a, aux = ACTIVATIONS[act][0](u)
    return a @ w2 + b2, (x, u, a, aux)


def _mlp2_backward(cache, gy, w1, w2, act):
    x, u, a, aux = cache
    g_w2 = a.reshape(-1, a.shape[-1]).T @ gy.reshape(-1, gy.shape[-1])
    g_b2 = gy.reshape(-1, gy.shape[-1]).sum(axis=0)
    gu = (gy @ w2.T) * ACTIVATIONS[act][1](u, aux)
    g_w1 = x.reshape(-1, x.shape[-1]).T @ gu.reshape(-1, gu.shape[-1])
    g_b1 = gu.reshape(-1, gu.shape[-1]).sum(axis=0)
    return gu @ w1.T, (g_w1, g_b1, g_w2, g_b2)


def encode(params: Mapping[str, np.ndarray], prefix: str, x: np.ndarray, cfg: NetworkConfig):
    """Run an encoder over ``(..., patch_dim)``; returns ``(..., d)`` and a cache."""
    if x.shape[-1] != cfg.patch_dim:
        raise ShapeMismatch(f"patch vectors have length {x.shape[-1]}, expected {cfg.patch_dim}")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, cfg.patch_dim)
    h = x2 @ params[f"{prefix}.embed.w"] + params[f"{prefix}.embed.b"]
    layers = []
    for layer in range(cfg.num_layers):
        p = f"{prefix}.blocks.{layer}"
        out, cache = _mlp2_forward(
            h, params[f"{p}.w1"], params[f"{p}.b1"], params[f"{p}.w2"], params[f"{p}.b2"], cfg.activation
        )
        layers.append(cache)
        h = h + out
    return h.reshape(*lead, cfg.embed_dim), (x2, layers, lead)


def encode_backward(params, prefix: str, cache, grad_out: np.ndarray, cfg: NetworkConfig) -> dict:
    x2, layers, _ = cache
    gh = grad_out.reshape(-1, cfg.embed_dim)
    grads = {}
    for layer in reversed(range(cfg.num_layers)):
        p = f"{prefix}.blocks.{layer}"
        gx, (g_w1, g_b1, g_w2, g_b2) = _mlp2_backward(
            layers[layer], gh, params[f"{p}.w1"], params[f"{p}.w2"], cfg.activation
        )
        grads.update({f"{p}.w1": g_w1, f"{p}.b1": g_b1, f"{p}.w2": g_w2, f"{p}.b2": g_b2})
        gh = gh + gx
    grads[f"{prefix}.embed.w"] = x2.T @ gh
    grads[f"{prefix}.embed.b"] = gh.sum(axis=0)
    return grads


def _accumulate(total: dict, part: Mapping[str, np.ndarray]) -> None:
    for name, g in part.items():
        total[name] = total[name] + g


@dataclass
class LossGrads:
    """Upstream gradients handed to :meth:`Network.backward`.

    ``targets`` is only used when the target branch shares the context
    weights (stop-gradient removed); ``block_features`` only for the
    encoder wiring of the cross-block regularizer.
    """

    predictions: list[np.ndarray]
    targets: list[np.ndarray] | None = None
    block_features: list[np.ndarray] | None = None
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


class Network:
    """Holds parameters plus the activation cache of the most recent forward pass."""

    def __init__(self, config: NetworkConfig, params: Mapping[str, np.ndarray] | None = None, rng=None):
        self.config = config
        expected = param_shapes(config)
        if params is None:
            params = init_params(config, rng)
        params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        if set(params) != set(expected):
            missing, extra = set(expected) - set(params), set(params) - set(expected)
            raise ShapeMismatch(f"parameter names mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeMismatch(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = params
        self._cache: dict = {}

    # ------------------------------------------------------------ forward

    def forward_context(self, patches: np.ndarray, masks: BlockMaskSet) -> np.ndarray:
        """Context-encoder embeddings of the visible patches, ``(n, |context|, d)``."""
        patches = self._check_patches(patches, masks)
        emb, cache = encode(self.params, "enc", patches[:, list(masks.context)], self.config)
        self._cache = {"context": (cache, emb.shape)}
        return emb

    def forward_predict(self, context_embeddings: np.ndarray, masks: BlockMaskSet) -> list[np.ndarray]:
        """Predict every target patch from the pooled context plus mask token and position."""
        cfg = self.config
        if context_embeddings.ndim != 3 or context_embeddings.shape[-1] != cfg.embed_dim:
            raise ShapeMismatch(f"context embeddings must be (n, C, {cfg.embed_dim})")
        pooled = context_embeddings.mean(axis=1)
        if cfg.pos_encoding:
            pos = sincos_table(masks.grid_h, masks.grid_w, cfg.embed_dim)
        else:
            pos = np.zeros((masks.grid_h * masks.grid_w, cfg.embed_dim))
        preds, caches = [], []
        for block in masks.targets:
            query = pooled[:, None, :] + self.params["mask_token"] + pos[list(block)]
            out, cache = self._predictor_forward(query)
            preds.append(out)
            caches.append(cache)
        self._cache["predict"] = (caches, context_embeddings.shape)
        return preds

    def forward_target(self, patches: np.ndarray, masks: BlockMaskSet, stop_grad: bool = True) -> list[np.ndarray]:
        """Target embeddings per block from the full image.

        With ``stop_grad`` the EMA encoder is used and nothing is cached;
        otherwise the context encoder is used and its cache is kept so the
        target branch receives gradients too.
        """
        patches = self._check_patches(patches, masks)
        prefix = "tgt" if stop_grad else "enc"
        full, cache = encode(self.params, prefix, patches, self.config)
        if stop_grad:
            self._cache.pop("target", None)
        else:
            self._cache["target"] = (cache, full.shape, masks)
        return [full[:, list(block)] for block in masks.targets]

    def forward_block_features(self, patches: np.ndarray, masks: BlockMaskSet) -> list[np.ndarray]:
        """Context-encoder embeddings of each target block's own patches."""
        patches = self._check_patches(patches, masks)
        feats, caches = [], []
        for block in masks.targets:
            emb, cache = encode(self.params, "enc", patches[:, list(block)], self.config)
            feats.append(emb)
            caches.append(cache)
        self._cache["blocks"] = caches
        return feats

    def target_embeddings(self, patches: np.ndarray) -> np.ndarray:
        """Target-encoder output for every patch, flattened to ``(n * P, d)``."""
        full, _ = encode(self.params, "tgt", np.asarray(patches, dtype=np.float64), self.config)
        return full.reshape(-1, self.config.embed_dim)

    def context_embeddings(self, patches: np.ndarray) -> np.ndarray:
        full, _ = encode(self.params, "enc", np.asarray(patches, dtype=np.float64), self.config)
        return full.reshape(-1, self.config.embed_dim)

    def project(self, x: np.ndarray):
        """Projector ``d -> 2d -> 2d``; returns output and a pullback (see ``vicreg.Projector``)."""
        p = self.params
        act = self.config.activation
        out, cache = _mlp2_forward(x, p["proj.w1"], p["proj.b1"], p["proj.w2"], p["proj.b2"], act)

        def pullback(grad_out):
            gx, (g_w1, g_b1, g_w2, g_b2) = _mlp2_backward(cache, grad_out, p["proj.w1"], p["proj.w2"], act)
            return gx, {"proj.w1": g_w1, "proj.b1": g_b1, "proj.w2": g_w2, "proj.b2": g_b2}

        return out, pullback

    # ------------------------------------------------------------ backward

    def backward(self, loss_grads: LossGrads) -> dict[str, np.ndarray]:
        """Gradients for every parameter; ``tgt.*`` entries are always zero."""
        if "context" not in self._cache or "predict" not in self._cache:
            raise NoCachedForward("backward needs forward_context and forward_predict first")
        cfg = self.config
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}

        caches, ctx_shape = self._cache["predict"]
        if len(loss_grads.predictions) != len(caches):
            raise ShapeMismatch("prediction gradient count does not match target blocks")
        d_pooled = np.zeros((ctx_shape[0], cfg.embed_dim))
        for cache, g in zip(caches, loss_grads.predictions):
            g_query, pg = self._predictor_backward(cache, np.asarray(g, dtype=np.float64))
            _accumulate(grads, pg)
            grads["mask_token"] += g_query.sum(axis=(0, 1))
            d_pooled += g_query.sum(axis=1)

        enc_cache, _ = self._cache["context"]
        d_ctx = np.broadcast_to(d_pooled[:, None, :] / ctx_shape[1], ctx_shape)
        _accumulate(grads, encode_backward(self.params, "enc", enc_cache, d_ctx, cfg))

        if loss_grads.targets is not None:
            if "target" not in self._cache:
                raise NoCachedForward("target gradients given but the target branch was stop-gradient")
            cache, full_shape, masks = self._cache["target"]
            d_full = np.zeros(full_shape)
            for block, g in zip(masks.targets, loss_grads.targets):
                np.add.at(d_full, (slice(None), list(block)), g)
            _accumulate(grads, encode_backward(self.params, "enc", cache, d_full, cfg))

        if loss_grads.block_features is not None:
            if "blocks" not in self._cache:
                raise NoCachedForward("block-feature gradients given without forward_block_features")
            for cache, g in zip(self._cache["blocks"], loss_grads.block_features):
                _accumulate(grads, encode_backward(self.params, "enc", cache, np.asarray(g), cfg))

        _accumulate(grads, loss_grads.param_grads)
        return grads

    # ------------------------------------------------------------ helpers

    def _check_patches(self, patches, masks: BlockMaskSet) -> np.ndarray:
        patches = np.asarray(patches, dtype=np.float64)
        expected = (masks.grid_h * masks.grid_w, self.config.patch_dim)
        if patches.ndim != 3 or patches.shape[1:] != expected:
            raise ShapeMismatch(f"patches must be (n, {expected[0]}, {expected[1]}), got {patches.shape}")
        if not np.all(np.isfinite(patches)):
            raise NonFinite("patches contain NaN or Inf")
        return patches

    def _predictor_forward(self, query):
        p = self.params
        if self.config.predictor == "linear":
            return query @ p["pred.w"], query
        return _mlp2_forward(query, p["pred.w1"], p["pred.b1"], p["pred.w2"], p["pred.b2"], self.config.activation)

    def _predictor_backward(self, cache, g):
        p = self.params
        if self.config.predictor == "linear":
            q = cache
            g_w = q.reshape(-1, q.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return g @ p["pred.w"].T, {"pred.w": g_w}
        gq, (g_w1, g_b1, g_w2, g_b2) = _mlp2_backward(cache, g, p["pred.w1"], p["pred.w2"], self.config.activation)
        return gq, {"pred.w1": g_w1, "pred.b1": g_b1, "pred.w2": g_w2, "pred.b2": g_b2}


def forward_backward(
    net: Network,
    patches: np.ndarray,
    masks: BlockMaskSet,
    coeffs: VicRegCoefficients,
    wiring: str = "predictor",
    stop_grad: bool = True,
) -> tuple[LossWithGrad, dict[str, np.ndarray]]:
    """One full forward pass, the combined objective, and its parameter gradients.

    ``wiring`` picks what the cross-block regularizer sees: the predictor's
    per-block outputs (``"predictor"``) or context-encoder features of each
    target block (``"encoder"``).
    """
    if wiring not in VICREG_WIRINGS:
        raise ValueError(f"wiring must be one of {VICREG_WIRINGS}")
    ctx = net.forward_context(patches, masks)
    preds = net.forward_predict(ctx, masks)
    targets = net.forward_target(patches, masks, stop_grad=stop_grad)
    zc = preds if wiring == "predictor" else net.forward_block_features(patches, masks)

    loss = combined_loss(PatchPrediction(preds, targets), zc, net.project, coeffs)
    d_pred, d_zc = loss.grads
    upstream = LossGrads(predictions=list(d_pred), param_grads=loss.param_grads)
    if not stop_grad:
        upstream.targets = [-g for g in d_pred]
    if wiring == "predictor":
        upstream.predictions = [a + b for a, b in zip(d_pred, d_zc)]
    else:
        upstream.block_features = list(d_zc)
    return loss, net.backward(upstream)


def ema_update(target: Mapping[str, np.ndarray], context: Mapping[str, np.ndarray], momentum: float) -> dict:
    """``target <- m * target + (1 - m) * context`` for every array, returned as a new dict.

    Results are clipped to the segment between old target and context so
    rounding never leaves it.
    """
    if not 0.0 <= momentum <= 1.0:
        raise MomentumOutOfRange(f"momentum {momentum} outside [0, 1]")
    out = {}
    for name, t in target.items():
        c = context[name]
        if momentum == 0.0:
            out[name] = np.array(c, dtype=np.float64, copy=True)
            continue
        mixed = momentum * t + (1.0 - momentum) * c
        out[name] = np.clip(mixed, np.minimum(t, c), np.maximum(t, c))
    return out


def ema_update_network(params: Mapping[str, np.ndarray], momentum: float) -> dict[str, np.ndarray]:
    """Apply :func:`ema_update` to the ``tgt.*`` arrays of a full parameter dict."""
    names = [k[4:] for k in params if k.startswith("tgt.")]
    updated = ema_update({n: params[f"tgt.{n}"] for n in names}, {n: params[f"enc.{n}"] for n in names}, momentum)
    out = dict(params)
    out.update({f"tgt.{n}": v for n, v in updated.items()})
    return out
