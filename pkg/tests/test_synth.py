import json

import cv2
import numpy as np
import pytest

from boneage import synth
from boneage.core import REGIONS, Region, load_manifest
from boneage.errors import InvalidSpec
from boneage.orient import Orientation, correct_orientation
from boneage.synth import MaturityDistribution, SynthSpec, generate


def _spec(**kw):
    base = dict(seed=7, maturity_months=100.0, canvas=(288, 272), background_level=0.15, artifact_count=2)
    base.update(kw)
    return SynthSpec(**base)


def _iou(a, b):
    return (a & b).sum() / (a | b).sum()


def _back_to_canvas(img, shape):
    """Undo the padded canvas of a corrected image: shift by the exact (possibly half-pixel) offset."""
    h, w = shape
    dy, dx = (img.shape[0] - h) / 2.0, (img.shape[1] - w) / 2.0
    return cv2.warpAffine(img, np.float32([[1, 0, -dx], [0, 1, -dy]]), (w, h), flags=cv2.INTER_LINEAR)


def test_same_spec_is_bit_identical():
    a, b = generate(_spec(rotation_deg=33.0, flipped=True)), generate(_spec(rotation_deg=33.0, flipped=True))
    assert a.radiograph.pixels.tobytes() == b.radiograph.pixels.tobytes()
    assert np.array_equal(a.truth_mask, b.truth_mask)
    assert synth.truth_record("1", a) == synth.truth_record("1", b)


@pytest.mark.parametrize("field,value", [
    ("maturity_months", 11.0), ("maturity_months", 217.0), ("rotation_deg", 180.0),
    ("canvas", (255, 300)), ("background_level", 0.31), ("artifact_count", -1), ("seed", -5),
    ("channels", ("gap", "colour")),
])
def test_invalid_specs(field, value):
    with pytest.raises(InvalidSpec) as err:
        generate(_spec(**{field: value}))
    assert err.value.field == field


def test_truth_mask_shape_and_boxes_in_unit_square():
    s = generate(_spec(rotation_deg=-70.0))
    assert s.truth_mask.shape == s.radiograph.shape
    for b in s.truth_boxes:
        assert 0 <= b.cx <= 1 and 0 <= b.cy <= 1 and 0 < b.side <= 1


def test_identity_transform_boxes_match_measured_boxes():
    s = generate(_spec(rotation_deg=0.0, flipped=False, artifact_count=0))
    shape = s.radiograph.shape
    # the whole-hand box is measured directly as the bounding square of the rendered silhouette
    ys, xs = np.nonzero(s.truth_mask)
    side = max(xs.max() + 1 - xs.min(), ys.max() + 1 - ys.min())
    x, y, sd = s.truth_boxes[Region.WHOLE_HAND].to_pixels(shape)
    assert (x, y, sd) == pytest.approx(((xs.min() + xs.max() + 1) / 2, (ys.min() + ys.max() + 1) / 2, side))
    # finger boxes sit on the rendered middle finger: bright bone under their centres
    for region in (Region.MIDDLE_FINGER_TOP, Region.MIDDLE_FINGER_PROXIMAL):
        cx, cy, _ = s.truth_boxes[region].to_pixels(shape)
        assert s.truth_mask[int(cy), int(cx)]


def _gap_profile_width(s, months):
    """Length of the low-intensity run across each finger physis, by scanning along the finger axis."""
    img = s.radiograph.pixels
    thresh = (synth.CARTILAGE_LEVEL + synth.bone_level(months)) / 2.0
    widths = []
    for finger in s.landmarks["fingers"].values():
        base, tip = np.array(finger["base"]), np.array(finger["tip"])
        d = (tip - base) / np.linalg.norm(tip - base)
        for g in finger["gap_centres"]:
            ts = np.arange(-6.0, 6.0, 0.25)
            pts = np.array(g) + ts[:, None] * d
            # continuous coordinates: pixel index = floor(coordinate)
            vals = img[np.floor(pts[:, 1]).astype(int), np.floor(pts[:, 0]).astype(int)]
            widths.append(0.25 * np.count_nonzero(vals < thresh))
    return float(np.mean(widths))


def test_gap_wider_at_12_than_216_months():
    young = generate(_spec(maturity_months=12.0, rotation_deg=0.0, artifact_count=0))
    old = generate(_spec(maturity_months=216.0, rotation_deg=0.0, artifact_count=0))
    assert _gap_profile_width(young, 12.0) > _gap_profile_width(old, 216.0)


def test_gap_non_increasing_in_maturity():
    months = [12.0, 60.0, 110.0, 160.0, 216.0]
    widths = [_gap_profile_width(generate(_spec(maturity_months=m, rotation_deg=0.0, artifact_count=0)), m)
              for m in months]
    assert all(a >= b for a, b in zip(widths, widths[1:])), widths


def test_gap_landmark_width_is_linear_in_maturity():
    unit = generate(_spec(maturity_months=12.0)).landmarks["unit_px"]
    for m in (12.0, 114.0, 216.0):
        got = generate(_spec(maturity_months=m)).landmarks["gap_px"]
        expected = 6.0 * (1 - (m - 12) / 204) * unit / (synth.HAND_RADIUS_FRAC * synth.REF_CANVAS)
        assert got == pytest.approx(expected)


def test_carpal_count_steps_from_2_to_8():
    assert synth.carpal_count(12.0) == 2
    assert synth.carpal_count(216.0) == 8
    counts = [synth.carpal_count(m) for m in np.linspace(12, 216, 50)]
    assert counts == sorted(counts)


@pytest.mark.parametrize("seed", [7, 11, 15])
@pytest.mark.parametrize("angle,flipped", [(37.0, False), (-140.0, True), (90.0, True), (-63.0, True)])
def test_undoing_truth_transform_recovers_silhouette(seed, angle, flipped):
    moved = generate(_spec(seed=seed, rotation_deg=angle, flipped=flipped, artifact_count=0))
    still = generate(_spec(seed=seed, rotation_deg=0.0, flipped=False, artifact_count=0))
    back = _back_to_canvas(correct_orientation(moved.radiograph, Orientation(angle, flipped)).pixels, still.truth_mask.shape)
    # silhouette: halfway between background and soft tissue
    silhouette = back >= (still.spec.background_level + synth.TISSUE_LEVEL) / 2.0
    assert _iou(silhouette, still.truth_mask) >= 0.98


def test_corrected_boxes_sit_on_padded_canvas():
    s = generate(_spec(rotation_deg=45.0))
    shape = synth.corrected_shape(s)
    assert shape[0] > s.radiograph.shape[0]
    for a, b in zip(s.truth_boxes, synth.corrected_boxes(s)):
        xa, ya, sa = a.to_pixels(s.radiograph.shape)
        xb, yb, sb = b.to_pixels(shape)
        assert sb == pytest.approx(sa)
        assert xb - xa == pytest.approx((shape[1] - s.radiograph.shape[1]) / 2)
        assert yb - ya == pytest.approx((shape[0] - s.radiograph.shape[0]) / 2)


def test_gap_only_channel_freezes_other_cues():
    a = generate(_spec(maturity_months=20.0, channels=("gap",)))
    b = generate(_spec(maturity_months=200.0, channels=("gap",)))
    assert a.landmarks["carpal_count"] == b.landmarks["carpal_count"]
    assert a.landmarks["gap_px"] > b.landmarks["gap_px"]


def test_generate_dataset_reproducible(tmp_path):
    m1, t1 = synth.generate_dataset(10, 5, MaturityDistribution.UNIFORM, tmp_path / "a")
    m2, t2 = synth.generate_dataset(10, 5, MaturityDistribution.UNIFORM, tmp_path / "b")
    assert len(list((tmp_path / "a" / "images").iterdir())) == 10
    assert [(e.id, e.bone_age_months, e.sex) for e in m1] == [(e.id, e.bone_age_months, e.sex) for e in m2]
    assert t1 == t2
    assert (tmp_path / "a" / "manifest.csv").read_text() == (tmp_path / "b" / "manifest.csv").read_text()
    for p in ("images/3.png", "masks/3.png", "truths.jsonl", "boxes.jsonl", "orientation.jsonl"):
        assert (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()


def test_generate_dataset_single_entry(tmp_path):
    manifest, truths = synth.generate_dataset(1, 0, out_dir=tmp_path)
    loaded = load_manifest(tmp_path / "manifest.csv")
    assert len(loaded) == 1 and loaded.entries[0].image_path.exists()
    rows = [json.loads(line) for line in (tmp_path / "boxes.jsonl").read_text().splitlines()]
    assert sorted(r["region"] for r in rows) == sorted(r.value for r in REGIONS)


def test_parallel_generation_matches_serial(tmp_path):
    synth.generate_dataset(6, 2, out_dir=tmp_path / "s", workers=1)
    synth.generate_dataset(6, 2, out_dir=tmp_path / "p", workers=3)
    for name in ("truths.jsonl", "manifest.csv", "images/4.png"):
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()


def test_rsna_like_histogram_shape():
    ages = synth.sample_maturities(2000, np.random.default_rng(1), MaturityDistribution.RSNA_LIKE)
    counts = np.bincount((ages // 12).astype(int), minlength=19)
    # the 10-14 year bins dwarf the 2-3 year bin
    assert counts[10:15].min() > counts[2]
    assert counts[10] > counts[9] and counts[13] > counts[12]
    assert ages.min() >= 12.0 and ages.max() <= 216.0
