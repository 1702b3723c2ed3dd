import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from boneage import segment
from boneage.artifact import Stage, make_artifact
from boneage.errors import ConstantRegion, DegenerateDataset, EmptyMask, ShapeMismatch, WrongStage
from boneage.segment import Mask, SegModelConfig, apply_mask, equalize_in_mask, postprocess
from conftest import labeled, radiograph

TINY = dict(input_side=64, encoder_depth=3, base_channels=4, lr=3e-3, batch_size=8, seed=3)


def test_apply_mask_examples():
    img = radiograph(np.random.default_rng(0).random((32, 32)))
    assert np.array_equal(apply_mask(img, Mask(np.ones((32, 32)))).pixels, img.pixels)
    with pytest.raises(EmptyMask):
        apply_mask(img, Mask(np.zeros((32, 32))))
    with pytest.raises(ShapeMismatch):
        apply_mask(img, Mask(np.ones((32, 33))))
    checker = (np.indices((32, 32)).sum(0) % 2).astype(bool)
    out = apply_mask(radiograph(np.full((32, 32), 0.8)), Mask(checker)).pixels
    assert np.allclose(out[checker], 0.8) and np.all(out[~checker] == 0.0)


def test_equalize_uniform_region_is_near_identity():
    # every 256-bin level present exactly once per row: the CDF map is the identity up to one bin
    values = (np.arange(256, dtype=np.float64) + 0.5) / 256
    img = radiograph(np.tile(values, (32, 1)))
    out = equalize_in_mask(img, Mask(np.ones((32, 256)))).pixels
    assert np.max(np.abs(out - img.pixels)) <= 1 / 256 + 1e-6


def test_equalize_two_levels_maps_to_cdf():
    px = np.full((32, 32), 0.8, np.float32)
    px[:8] = 0.2
    out = equalize_in_mask(radiograph(px), Mask(np.ones((32, 32)))).pixels
    # closed form: 25% at 0.2, 75% at 0.8
    assert out[0, 0] == pytest.approx(0.25, abs=1 / 256)
    assert out[-1, -1] == pytest.approx(1.0, abs=1 / 256)


def test_equalize_constant_region_raises():
    with pytest.raises(ConstantRegion):
        equalize_in_mask(radiograph(np.full((32, 32), 0.4)), Mask(np.ones((32, 32))))


def test_equalize_leaves_background_zero():
    px = np.random.default_rng(1).random((32, 32))
    m = np.zeros((32, 32), bool)
    m[8:24, 8:24] = True
    out = equalize_in_mask(radiograph(px), Mask(m)).pixels
    assert np.all(out[~m] == 0) and out.min() >= 0 and out.max() <= 1


images = arrays(np.float32, (32, 32), elements=st.floats(0, 1, width=32))
masks = arrays(bool, (32, 32)).filter(lambda m: m.any())


@settings(max_examples=1000, deadline=None)
@given(images, masks)
def test_apply_mask_idempotent(px, m):
    img, mask = radiograph(px), Mask(m)
    once = apply_mask(img, mask)
    assert np.array_equal(apply_mask(once, mask).pixels, once.pixels)


@settings(max_examples=1000, deadline=None)
@given(images, masks)
def test_equalize_preserves_order(px, m):
    vals = px[m]
    if vals.min() == vals.max():
        return
    out = equalize_in_mask(radiograph(px), Mask(m)).pixels[m]
    order = np.argsort(vals, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_postprocess_keeps_largest_component():
    prob = np.zeros((40, 40))
    prob[2:12, 2:12] = 0.9  # 100 px
    prob[30:37, 30] = 0.9  # 7 px
    m = postprocess(prob)
    assert m.area == 100 and not m.pixels[30:37, 30].any()


def test_postprocess_all_background_raises():
    with pytest.raises(EmptyMask):
        postprocess(np.full((16, 16), 0.2))


def test_largest_component_uses_4_connectivity():
    b = np.zeros((5, 5), bool)
    b[0, 0] = b[1, 1] = b[2, 2] = True  # diagonal chain: three components under 4-connectivity
    b[4, 0:2] = True
    assert segment.largest_component(b).sum() == 2


def test_dice_examples():
    a = np.zeros((4, 4), bool)
    a[:2] = True
    assert segment.dice(a, a) == 1.0
    assert segment.dice(a, ~a) == 0.0
    assert segment.dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_loss_mix_endpoints():
    import torch

    logits = torch.randn(2, 1, 8, 8)
    target = (torch.rand(2, 1, 8, 8) > 0.5).float()
    bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, target)
    assert segment.segmentation_loss(logits, target, 1.0).item() == pytest.approx(bce.item())
    assert 0.0 <= segment.segmentation_loss(logits, target, 0.0).item() <= 1.0


def test_augment_pair_moves_image_and_mask_together(rng):
    img = np.zeros((48, 48), np.float32)
    img[10:30, 20:28] = 1.0
    mask = img > 0.5
    for _ in range(10):
        a, m = segment.augment_pair(img, mask, rng)
        # the same warp of the same shape: the warped image is the warped mask
        assert np.allclose(a, m, atol=1e-6)


def test_config_requires_divisible_side():
    with pytest.raises(ValueError):
        SegModelConfig(input_side=100, encoder_depth=3)


def _pairs(n):
    return [(s.radiograph, s.mask) for s in labeled(n)]


def test_train_preconditions():
    pairs = _pairs(2)
    with pytest.raises(DegenerateDataset):
        segment.train_segmenter(pairs[:1], SegModelConfig(**TINY, epochs=1))
    img = pairs[0][0]
    with pytest.raises(ShapeMismatch):
        segment.train_segmenter([pairs[0], (img, Mask(np.ones((img.shape[0], img.shape[1] + 1))))],
                                SegModelConfig(**TINY, epochs=1))
    full = [(p[0], Mask(np.ones(p[0].shape))) for p in pairs]
    with pytest.raises(DegenerateDataset):
        segment.train_segmenter(full, SegModelConfig(**TINY, epochs=1))


def test_training_loss_decreases_and_is_deterministic():
    cfg = SegModelConfig(**TINY, epochs=5)
    pairs = _pairs(50)
    a = segment.train_segmenter(pairs, cfg)
    losses = a.metrics["epoch_losses"]
    assert losses[-1] < losses[0]
    b = segment.train_segmenter(pairs, cfg)
    assert a.content_hash == b.content_hash


def test_memorizes_a_duplicated_pair():
    img, m = _pairs(1)[0]
    cfg = SegModelConfig(input_side=128, encoder_depth=3, base_channels=8, lr=1e-2, epochs=15, augment=False)
    model = segment.train_segmenter([(img, m)] * 50, cfg)
    assert segment.dice(segment.predict_mask(model, img).pixels, m.pixels) >= 0.99


def test_predict_mask_wrong_stage():
    import torch

    bogus = make_artifact(Stage.DETECT, "x", torch.nn.Linear(1, 1), {}, {})
    with pytest.raises(WrongStage):
        segment.predict_mask(bogus, _pairs(1)[0][0])
