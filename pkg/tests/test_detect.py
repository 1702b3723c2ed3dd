import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from boneage import detect
from boneage.artifact import Stage, make_artifact, materialize
from boneage.core import REGIONS, Region, RegionBox, RegionBoxSet
from boneage.crop import extract_crops
from boneage.detect import DetectModelConfig, box_loss, decode_boxes, encode_boxes, iou
from boneage.errors import IncompleteTruth, WrongStage
from boneage.nets import BiFPN, FastFusion
from boneage.training import detect_pairs
from conftest import labeled

TINY = dict(input_side=64, width_mult=0.25, bifpn_channels=8, bifpn_layers=3, lr=3e-3, batch_size=8, seed=1)


def _box(cx, cy, side, region=Region.WHOLE_HAND):
    return RegionBox(region, cx, cy, side)


def test_iou_examples():
    a = _box(0.5, 0.5, 0.5)
    assert iou(a, a) == 1.0
    assert iou(a, _box(0.1, 0.1, 0.1)) == 0.0
    assert iou(a, _box(0.75, 0.5, 0.5)) == pytest.approx(1 / 3)


def _raster_iou(a, b, n=400):
    """Brute-force overlap on an n x n grid of cell centres."""
    g = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(g, g)

    def inside(box):
        return (np.abs(xx - box.cx) <= box.side / 2) & (np.abs(yy - box.cy) <= box.side / 2)

    ia, ib = inside(a), inside(b)
    return (ia & ib).sum() / max((ia | ib).sum(), 1)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.2, 0.8), st.floats(0.2, 0.8), st.floats(0.1, 0.4), st.floats(0.2, 0.8), st.floats(0.2, 0.8),
       st.floats(0.1, 0.4))
def test_iou_matches_raster_oracle(x1, y1, s1, x2, y2, s2):
    a, b = _box(x1, y1, s1), _box(x2, y2, s2)
    assert iou(a, b) == pytest.approx(_raster_iou(a, b), abs=0.02)
    assert iou(a, b) == pytest.approx(iou(b, a))


@settings(max_examples=100, deadline=None)
@given(st.integers(64, 400), st.integers(64, 400), st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1)),
                                                          min_size=5, max_size=5))
def test_encode_decode_round_trip(h, w, vals):
    boxes = RegionBoxSet(tuple(RegionBox(r, *v) for r, v in zip(REGIONS, vals)))
    back = decode_boxes(encode_boxes(boxes, (h, w)), (h, w))
    for a, b in zip(boxes, back):
        assert b.as_tuple() == pytest.approx(a.as_tuple(), abs=1e-5)


def test_equal_raw_outputs_give_identical_boxes():
    boxes = decode_boxes(np.full(15, 0.4), (200, 300))
    assert len({b.as_tuple() for b in boxes}) == 1
    assert [b.region for b in boxes] == list(REGIONS)


def test_zero_loss_on_truth():
    t = torch.rand(4, 15)
    assert box_loss(t, t).item() == 0.0


def test_complete_boxes_requires_every_region():
    boxes = {r: _box(0.5, 0.5, 0.2, r) for r in REGIONS if r is not Region.THUMB}
    with pytest.raises(IncompleteTruth) as err:
        detect.complete_boxes("img-3", boxes)
    assert err.value.region == "thumb" and err.value.id == "img-3"


def test_bifpn_keeps_level_count():
    feats = [torch.randn(1, c, s, s) for c, s in ((8, 16), (12, 8), (16, 4))]
    net = BiFPN([8, 12, 16], 6, 3)
    lateral = [lat(f) for lat, f in zip(net.lateral, feats)]
    for layer in net.layers:
        out = layer(lateral)
        assert len(out) == len(lateral) == 3
        assert [o.shape for o in out] == [x.shape for x in lateral]
        lateral = out


def test_fast_fusion_weights_are_normalized():
    f = FastFusion(3)
    with torch.no_grad():
        f.weights.copy_(torch.tensor([2.0, -1.0, 1.0]))
    w = f.normalized().detach()
    assert torch.all(w >= 0) and w[1] == 0 and float(w.sum()) == pytest.approx(1.0, abs=1e-3)


@pytest.fixture(scope="module")
def tiny_detector():
    data = detect_pairs(labeled(24))
    return detect.train_detector(data, DetectModelConfig(**TINY, epochs=3)), data


def test_training_records_losses(tiny_detector):
    model, data = tiny_detector
    losses = model.metrics["epoch_losses"]
    assert len(losses) == 3 and losses[-1] <= losses[0]
    assert detect.train_detector(data, DetectModelConfig(**TINY, epochs=3)).content_hash == model.content_hash


def test_always_five_boxes_inside_image(tiny_detector):
    model, data = tiny_detector
    for img, _ in data[:6]:
        boxes = detect.predict_boxes(model, img)
        assert [b.region for b in boxes] == list(REGIONS)
        assert all(0 < b.side <= 1 for b in boxes)
        crops = extract_crops(img, boxes, 1.15, 32)
        assert all(c.shape == (32, 32) for c in crops.stacked())


def test_prediction_is_deterministic(tiny_detector):
    model, data = tiny_detector
    img = data[0][0]
    assert detect.predict_boxes(model, img) == detect.predict_boxes(model, img)


def test_equal_head_outputs_through_the_network(tiny_detector):
    model, data = tiny_detector
    net = materialize(model, detect.build_network)
    clone = detect.build_network(model.config_snapshot)
    clone.load_state_dict(net.state_dict())
    with torch.no_grad():
        clone.head[-1].weight.zero_()
        clone.head[-1].bias.fill_(0.3)
    img = data[0][0]
    forced = make_artifact(Stage.DETECT, model.architecture_id, clone, model.config_snapshot, {})
    boxes = detect.predict_boxes(forced, img)
    assert len({b.as_tuple() for b in boxes}) == 1


def test_wrong_stage():
    bogus = make_artifact(Stage.REGRESS, "x", torch.nn.Linear(1, 1), {}, {})
    with pytest.raises(WrongStage):
        detect.predict_boxes(bogus, labeled(1)[0].radiograph)
