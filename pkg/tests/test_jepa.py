import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cjepa.errors import EmptyContext, EmptyTargets, GridTooSmall, ShapeMismatch
from cjepa.gradcheck import numeric_gradient, relative_error
from cjepa.jepa import BlockMaskSet, PatchPrediction, combined_loss, jepa_loss, sample_masks
from cjepa.vicreg import VicRegCoefficients, cross_block_vicreg


def is_rectangle(block, grid_w):
    rows = sorted({i // grid_w for i in block})
    cols = sorted({i % grid_w for i in block})
    return len(rows) * len(cols) == len(block) and rows == list(range(rows[0], rows[-1] + 1)) and cols == list(
        range(cols[0], cols[-1] + 1)
    )


def test_four_targets_on_14x14():
    masks = sample_masks(14, 14, num_targets=4, rng=0)
    assert masks.num_targets == 4
    for block in masks.targets:
        assert is_rectangle(block, 14)
        assert 0.1 * 196 <= len(block) <= 0.3 * 196
    assert not set(masks.context) & set().union(*masks.targets)


def test_single_target_leaves_one_row():
    masks = sample_masks(8, 8, num_targets=1, scale_range=(56 / 64, 56 / 64), aspect_range=(7 / 8, 7 / 8), rng=3)
    assert len(masks.targets[0]) == 56
    rows = {i // 8 for i in masks.context}
    assert len(masks.context) == 8 and len(rows) == 1


def test_seeded_determinism():
    assert sample_masks(8, 8, rng=42) == sample_masks(8, 8, rng=42)
    assert sample_masks(8, 8, rng=42).to_json() == sample_masks(8, 8, rng=42).to_json()


def test_json_round_trip():
    masks = sample_masks(6, 9, num_targets=3, rng=7)
    assert BlockMaskSet.from_json(masks.to_json()) == masks


def test_mask_errors():
    with pytest.raises(GridTooSmall):
        sample_masks(3, 8)
    with pytest.raises(EmptyContext):
        sample_masks(4, 4, num_targets=1, scale_range=(1.0, 1.0), aspect_range=(1.0, 1.0), rng=0)
    with pytest.raises(ValueError):
        BlockMaskSet(4, 4, (0, 1), ((1, 2),))
    with pytest.raises(ValueError):
        BlockMaskSet(4, 4, (0,), ((1, 6),))
    with pytest.raises(EmptyTargets):
        BlockMaskSet(4, 4, (0,), ())


@settings(max_examples=80, deadline=None)
@given(st.integers(4, 16), st.integers(4, 16), st.integers(1, 6), st.integers(0, 2**31))
def test_sampled_masks_partition(h, w, m, seed):
    masks = sample_masks(h, w, num_targets=m, rng=seed)
    union = set().union(*masks.targets)
    assert masks.context and union
    assert not union & set(masks.context)
    assert union | set(masks.context) == set(range(h * w))
    assert all(is_rectangle(b, w) for b in masks.targets)


def test_jepa_loss_simple_cases(rng):
    p = [rng.normal(size=(3, 4, 5))]
    assert jepa_loss(PatchPrediction(p, [x.copy() for x in p])).value == 0.0
    one = PatchPrediction([np.array([[[1.0, 0.0]]])], [np.array([[[0.0, 0.0]]])])
    assert jepa_loss(one).value == 1.0


def test_jepa_loss_brute_force_and_gradient(rng):
    sizes = (3, 5, 2)
    pred = [rng.normal(size=(4, k, 6)) for k in sizes]
    tgt = [rng.normal(size=(4, k, 6)) for k in sizes]
    total = 0.0
    for b in range(4):
        for p, t in zip(pred, tgt):
            for j in range(p.shape[1]):
                total += sum((p[b, j, c] - t[b, j, c]) ** 2 for c in range(6))
    oracle = total / len(sizes) / 4
    out = jepa_loss(PatchPrediction(pred, tgt))
    assert abs(out.value - oracle) < 1e-12
    for i in range(len(sizes)):
        num = numeric_gradient(lambda: jepa_loss(PatchPrediction(pred, tgt)).value, pred[i]).reshape(pred[i].shape)
        assert relative_error(out.grad[i], num, out.value) < 1e-6


def test_jepa_loss_permutation_invariance(rng):
    pred = [rng.normal(size=(2, k, 3)) for k in (4, 6, 3)]
    tgt = [rng.normal(size=(2, k, 3)) for k in (4, 6, 3)]
    base = jepa_loss(PatchPrediction(pred, tgt)).value
    order = [2, 0, 1]
    swapped = jepa_loss(PatchPrediction([pred[i] for i in order], [tgt[i] for i in order])).value
    perm = rng.permutation(6)
    within = jepa_loss(PatchPrediction([pred[0], pred[1][:, perm], pred[2]], [tgt[0], tgt[1][:, perm], tgt[2]])).value
    assert abs(base - swapped) < 1e-12 and abs(base - within) < 1e-12


def test_jepa_loss_errors(rng):
    with pytest.raises(ShapeMismatch):
        PatchPrediction([rng.normal(size=(2, 3, 4))], [rng.normal(size=(2, 2, 4))])
    with pytest.raises(EmptyTargets):
        jepa_loss(PatchPrediction([], []))


def test_combined_loss_zero_weight_is_bit_exact(rng):
    pred = [rng.normal(size=(5, k, 4)) for k in (3, 4)]
    tgt = [rng.normal(size=(5, k, 4)) for k in (3, 4)]
    pp = PatchPrediction(pred, tgt)
    out = combined_loss(pp, pred, None, VicRegCoefficients(beta_vicreg=0.0))
    assert out.value == jepa_loss(pp).value


def test_combined_loss_composition(rng):
    pred = [rng.normal(size=(5, k, 4)) for k in (3, 4, 2)]
    tgt = [rng.normal(size=(5, k, 4)) for k in (3, 4, 2)]
    pp = PatchPrediction(pred, tgt)
    assert VicRegCoefficients().beta_vicreg == 0.001
    for beta in (0.001, 0.005, 0.01, 0.1):
        coeffs = VicRegCoefficients(beta_vicreg=beta)
        out = combined_loss(pp, pred, None, coeffs)
        expected = jepa_loss(pp).value + beta * cross_block_vicreg(pred, None, coeffs).value
        assert abs(out.value - expected) < 1e-12
        assert out.parts["jepa"] == jepa_loss(pp).value
