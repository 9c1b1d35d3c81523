import numpy as np
import pytest

from cjepa.errors import MomentumOutOfRange, NoCachedForward, ShapeMismatch
from cjepa.gradcheck import check_network
from cjepa.jepa import BlockMaskSet, PatchPrediction, jepa_loss, sample_masks
from cjepa.network import (
    LossGrads,
    Network,
    NetworkConfig,
    ema_update,
    ema_update_network,
    forward_backward,
    gelu,
    gelu_grad,
    init_params,
    param_shapes,
    sincos_table,
)
from cjepa.vicreg import VicRegCoefficients

CFG = NetworkConfig(patch_dim=6, embed_dim=8, num_layers=2, hidden_dim=10)


def make(cfg=CFG, seed=0, noisy_biases=True):
    rng = np.random.default_rng(seed)
    net = Network(cfg, rng=rng)
    if noisy_biases:
        for k, v in net.params.items():
            if v.ndim == 1:
                net.params[k] = v + 0.1 * rng.normal(size=v.shape)
    return net, rng


def reference_encode(params, prefix, patch, cfg):
    # one patch at a time with explicit loops; independent of the vectorized path
    h = [sum(patch[i] * params[f"{prefix}.embed.w"][i, j] for i in range(cfg.patch_dim)) + params[f"{prefix}.embed.b"][j] for j in range(cfg.embed_dim)]
    for layer in range(cfg.num_layers):
        p = f"{prefix}.blocks.{layer}"
        u = [sum(h[i] * params[f"{p}.w1"][i, k] for i in range(cfg.embed_dim)) + params[f"{p}.b1"][k] for k in range(cfg.hidden_dim)]
        a = [0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x * x * x))) for x in u]
        h = [h[j] + sum(a[k] * params[f"{p}.w2"][k, j] for k in range(cfg.hidden_dim)) + params[f"{p}.b2"][j] for j in range(cfg.embed_dim)]
    return np.array(h)


def test_param_layout():
    params = init_params(CFG, 0)
    assert set(params) == set(param_shapes(CFG))
    for k, v in params.items():
        if k.startswith("tgt."):
            np.testing.assert_array_equal(v, params["enc." + k[4:]])
        if v.ndim == 1:
            assert np.all(v == 0)
        else:
            assert np.max(np.abs(v)) <= 1 / np.sqrt(v.shape[0])
    with pytest.raises(ValueError):
        NetworkConfig(embed_dim=0)


def test_zero_network_gives_zero_embeddings(rng):
    net = Network(CFG, {k: np.zeros(s) for k, s in param_shapes(CFG).items()})
    masks = sample_masks(4, 4, rng=0)
    assert np.all(net.forward_context(rng.normal(size=(2, 16, 6)), masks) == 0)


def test_identity_single_layer(rng):
    cfg = NetworkConfig(patch_dim=5, embed_dim=5, num_layers=0)
    params = {k: np.zeros(s) for k, s in param_shapes(cfg).items()}
    params["enc.embed.w"] = np.eye(5)
    net = Network(cfg, params)
    x = rng.normal(size=(3, 16, 5))
    masks = sample_masks(4, 4, rng=1)
    np.testing.assert_array_equal(net.forward_context(x, masks), x[:, list(masks.context)])


def test_forward_matches_loop_oracle():
    net, rng = make()
    x = rng.normal(size=(2, 16, 6))
    masks = sample_masks(4, 4, rng=2)
    emb = net.forward_context(x, masks)
    for b in range(2):
        for j, idx in enumerate(masks.context):
            np.testing.assert_allclose(emb[b, j], reference_encode(net.params, "enc", x[b, idx], CFG), rtol=0, atol=1e-12)


def test_predict_matches_oracle_and_identity_cases():
    net, rng = make()
    x = rng.normal(size=(3, 16, 6))
    masks = sample_masks(4, 4, rng=3)
    ctx = net.forward_context(x, masks)
    preds = net.forward_predict(ctx, masks)
    p = net.params
    pos = sincos_table(4, 4, 8)
    for i, block in enumerate(masks.targets):
        for j, idx in enumerate(block):
            q = ctx.mean(axis=1) + p["mask_token"] + pos[idx]
            hidden = gelu(q @ p["pred.w1"] + p["pred.b1"])
            np.testing.assert_allclose(preds[i][:, j], hidden @ p["pred.w2"] + p["pred.b2"], rtol=0, atol=1e-12)

    lin = NetworkConfig(patch_dim=6, embed_dim=8, num_layers=1, hidden_dim=10, predictor="linear", pos_encoding=False)
    net = Network(lin, rng=0)
    net.params["pred.w"] = np.eye(8)
    ctx = net.forward_context(x, masks)
    for block in net.forward_predict(ctx, masks):
        np.testing.assert_array_equal(block, np.broadcast_to(ctx.mean(axis=1)[:, None], block.shape))
    net.params["pred.w"] = np.zeros((8, 8))
    assert all(np.all(b == 0) for b in net.forward_predict(ctx, masks))


def test_deterministic_forward():
    net, rng = make()
    x = rng.normal(size=(2, 16, 6))
    masks = sample_masks(4, 4, rng=4)
    a = net.forward_predict(net.forward_context(x, masks), masks)
    b = net.forward_predict(net.forward_context(x, masks), masks)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_gelu_derivative():
    x = np.linspace(-4, 4, 101)
    h = 1e-6
    np.testing.assert_allclose(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), atol=1e-8)


@pytest.mark.parametrize("wiring", ["predictor", "encoder"])
@pytest.mark.parametrize("stop_grad", [True, False])
def test_full_model_gradcheck(wiring, stop_grad):
    results = check_network(5, wiring=wiring, stop_grad=stop_grad)
    bad = {r.name: r.error for r in results if not r.passed}
    assert not bad


def test_linear_predictor_gradcheck():
    cfg = NetworkConfig(patch_dim=12, embed_dim=16, hidden_dim=32, predictor="linear", activation="tanh")
    assert all(r.passed for r in check_network(6, config=cfg))


def test_target_gradients_exactly_zero_and_zero_upstream():
    net, rng = make()
    x = rng.normal(size=(4, 16, 6))
    masks = sample_masks(4, 4, rng=5)
    _, grads = forward_backward(net, x, masks, VicRegCoefficients())
    assert all(np.all(v == 0) for k, v in grads.items() if k.startswith("tgt."))
    preds = net.forward_predict(net.forward_context(x, masks), masks)
    zero = net.backward(LossGrads(predictions=[np.zeros_like(p) for p in preds]))
    assert all(np.all(v == 0) for v in zero.values())


def test_backward_requires_forward():
    with pytest.raises(NoCachedForward):
        Network(CFG, rng=0).backward(LossGrads(predictions=[]))


def test_shape_checks(rng):
    net = Network(CFG, rng=0)
    masks = sample_masks(4, 4, rng=0)
    with pytest.raises(ShapeMismatch):
        net.forward_context(rng.normal(size=(2, 16, 7)), masks)
    with pytest.raises(ShapeMismatch):
        net.forward_context(rng.normal(size=(2, 15, 6)), masks)
    with pytest.raises(ShapeMismatch):
        Network(CFG, {"enc.embed.w": np.zeros((6, 8))})


def test_identical_encoders_predict_own_patches_exactly():
    net, rng = make(noisy_biases=False)
    x = rng.normal(size=(3, 16, 6))
    ctx, tgt = net.context_embeddings(x), net.target_embeddings(x)
    assert np.array_equal(ctx, tgt)
    everything = tuple(range(16))
    masks = BlockMaskSet(4, 4, (), (everything,))
    target = net.forward_target(x, masks)
    assert jepa_loss(PatchPrediction([ctx.reshape(3, 16, 8)], target)).value == 0.0


def test_ema_examples():
    t, c = {"w": np.zeros(3)}, {"w": np.ones(3)}
    assert np.array_equal(ema_update(t, c, 1.0)["w"], t["w"])
    assert np.array_equal(ema_update(t, c, 0.0)["w"], c["w"])
    np.testing.assert_allclose(ema_update(t, c, 0.996)["w"], 0.004, rtol=0, atol=1e-15)
    for m in (-0.1, 1.1):
        with pytest.raises(MomentumOutOfRange):
            ema_update(t, c, m)


def test_ema_stays_on_segment(rng):
    for _ in range(200):
        t, c = {"w": rng.normal(size=5) * 1e3}, {"w": rng.normal(size=5)}
        m = rng.uniform()
        new = ema_update(t, c, m)["w"]
        assert np.all(new >= np.minimum(t["w"], c["w"])) and np.all(new <= np.maximum(t["w"], c["w"]))


def test_ema_network_only_moves_target():
    params = init_params(CFG, 0)
    params["enc.embed.w"] = params["enc.embed.w"] + 1.0
    new = ema_update_network(params, 0.5)
    for k in params:
        if not k.startswith("tgt."):
            assert new[k] is params[k]
    np.testing.assert_allclose(new["tgt.embed.w"], params["tgt.embed.w"] + 0.5)
