import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boneage.core import (
    CORE_RANGE,
    FULL_RANGE,
    AgeRangeMonths,
    DatasetManifest,
    ManifestEntry,
    Radiograph,
    Region,
    RegionBox,
    RegionBoxSet,
    REGIONS,
    Sex,
    Split,
    age_histogram,
    decode_grayscale,
    encode_png,
    filter_age_range,
    load_manifest,
    read_grayscale,
    save_manifest,
    write_grayscale,
)
from boneage.errors import DuplicateId, MissingColumn, MissingLabel, UnparsableRow


def _write(tmp_path, text):
    p = tmp_path / "manifest.csv"
    p.write_text(text)
    return p


def _entries(ages, sexes=None):
    sexes = sexes or [Sex.FEMALE] * len(ages)
    return DatasetManifest(tuple(ManifestEntry(str(i), None, a, s) for i, (a, s) in enumerate(zip(ages, sexes))))


def test_load_manifest_maps_fields(tmp_path):
    m = load_manifest(_write(tmp_path, "id,boneage,male\n1377,180,False\n1378,12,True\n"), Split.TRAIN)
    assert [e.id for e in m] == ["1377", "1378"]
    assert [e.sex for e in m] == [Sex.FEMALE, Sex.MALE]
    assert [e.bone_age_months for e in m] == [180.0, 12.0]
    assert m.entries[0].image_path == tmp_path / "images" / "1377.png"


def test_load_manifest_empty_data_section(tmp_path):
    assert len(load_manifest(_write(tmp_path, "id,boneage,male\n"))) == 0


def test_load_manifest_errors(tmp_path):
    with pytest.raises(MissingColumn):
        load_manifest(_write(tmp_path, "id,boneage\n1,2\n"))
    with pytest.raises(DuplicateId):
        load_manifest(_write(tmp_path, "id,boneage,male\n1,2,True\n1,3,False\n"))
    with pytest.raises(UnparsableRow):
        load_manifest(_write(tmp_path, "id,boneage,male\n1,2,yes\n"))


def test_negative_age_rejected_on_the_right_line(tmp_path):
    rows = [(i, 10 * i, i % 2 == 0) for i in range(1, 11)]
    rows[6] = (7, -3, True)
    text = "id,boneage,male\n" + "".join(f"{i},{a},{m}\n" for i, a, m in rows)
    # oracle: first row whose age is negative, counted with the header as line 1
    bad_line = next(n for n, (_, a, _) in enumerate(rows, start=2) if a < 0)
    with pytest.raises(UnparsableRow) as err:
        load_manifest(_write(tmp_path, text))
    assert err.value.line_no == bad_line


def test_filter_age_range_boundaries():
    m = _entries([6, 12, 120, 216, 230])
    assert [e.bone_age_months for e in filter_age_range(m, CORE_RANGE)] == [12, 120, 216]
    assert filter_age_range(m, FULL_RANGE) == m


def test_filter_requires_labels():
    m = DatasetManifest((ManifestEntry("a", None, None, Sex.MALE),))
    with pytest.raises(MissingLabel):
        filter_age_range(m, CORE_RANGE)


def test_filter_matches_linear_scan_on_rsna_like_fixture():
    from boneage.synth import MaturityDistribution, sample_maturities

    ages = sample_maturities(600, np.random.default_rng(3), MaturityDistribution.RSNA_LIKE)
    ages = np.concatenate([ages, [0.0, 5.0, 230.0, 240.0]])
    m = _entries(list(ages))
    expected = 0
    for a in ages:
        if 12.0 <= a <= 216.0:
            expected += 1
    assert len(filter_age_range(m, CORE_RANGE)) == expected


def test_age_histogram_examples():
    h = age_histogram(_entries([0, 11.9, 12]), 12)
    assert {b.bin_index: b.total for b in h} == {0: 2, 1: 1}
    assert age_histogram(_entries([]), 12) == []


def test_age_histogram_matches_counting_oracle():
    rng = np.random.default_rng(11)
    ages = rng.uniform(0, 240, 500)
    sexes = [Sex.MALE if v else Sex.FEMALE for v in rng.random(500) < 0.5]
    h = age_histogram(_entries(list(ages), sexes), 12)
    oracle = {}
    for a, s in zip(ages, sexes):
        key = (int(a // 12), s)
        oracle[key] = oracle.get(key, 0) + 1
    got = {(b.bin_index, s): c for b in h for s, c in b.counts.items() if c}
    assert got == oracle


ages_strategy = st.lists(st.floats(0, 240, allow_nan=False), max_size=40)


@settings(max_examples=100, deadline=None)
@given(ages_strategy, st.floats(0, 239), st.floats(1, 240))
def test_filter_is_idempotent(ages, lo, width):
    r = AgeRangeMonths(lo, min(240.0, lo + width))
    m = _entries(ages)
    once = filter_age_range(m, r)
    assert filter_age_range(once, r) == once


@settings(max_examples=100, deadline=None)
@given(ages_strategy, st.integers(1, 60))
def test_histogram_total_equals_size(ages, width):
    assert sum(b.total for b in age_histogram(_entries(ages), width)) == len(ages)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 240, allow_nan=False), st.booleans()), max_size=20))
def test_manifest_round_trip(tmp_path_factory, rows):
    tmp = tmp_path_factory.mktemp("m")
    m = DatasetManifest(tuple(
        ManifestEntry(str(i), tmp / "images" / f"{i}.png", a, Sex.MALE if male else Sex.FEMALE)
        for i, (a, male) in enumerate(rows)
    ))
    back = load_manifest(save_manifest(m, tmp / "manifest.csv"))
    assert back == m


def test_radiograph_invariants():
    with pytest.raises(ValueError):
        Radiograph("x", np.zeros((31, 64)), Sex.MALE)
    with pytest.raises(ValueError):
        Radiograph("x", np.full((32, 32), 1.5), Sex.MALE)
    with pytest.raises(ValueError):
        Radiograph("x", np.zeros((32, 32)), Sex.MALE, 241.0)
    r = Radiograph("x", np.zeros((32, 40)), Sex.FEMALE, 10.0)
    assert r.shape == (32, 40)
    assert not r.pixels.flags.writeable


def test_sex_scalar_and_parse():
    assert Sex.MALE.as_scalar == 1.0 and Sex.FEMALE.as_scalar == 0.0
    assert Sex.parse("Male") is Sex.MALE and Sex.parse(False) is Sex.FEMALE
    with pytest.raises(ValueError):
        Sex.parse("other")


def test_region_order_is_stable():
    assert [r.value for r in REGIONS] == [
        "whole_hand", "wrist_carpal", "thumb", "middle_finger_top", "middle_finger_proximal"
    ]
    assert [r.index for r in REGIONS] == list(range(5))


def test_age_range_validation_and_parse():
    assert AgeRangeMonths.parse("12:216") == CORE_RANGE
    for lo, hi in ((10, 10), (-1, 5), (0, 241)):
        with pytest.raises(ValueError):
            AgeRangeMonths(lo, hi)


def test_box_set_requires_each_region_once():
    boxes = [RegionBox(r, 0.5, 0.5, 0.2) for r in REGIONS]
    s = RegionBoxSet(tuple(reversed(boxes)))
    assert [b.region for b in s] == list(REGIONS)
    assert RegionBoxSet.from_json(s.to_json()) == s
    with pytest.raises(ValueError):
        RegionBoxSet(tuple(boxes[:4]))


def test_region_box_pixels_round_trip():
    b = RegionBox.from_pixels(Region.THUMB, 30.0, 50.0, 20.0, (100, 80))
    assert b.to_pixels((100, 80)) == pytest.approx((30.0, 50.0, 20.0))
    assert b.side == pytest.approx(20 / 80)


@pytest.mark.parametrize("bits", [8, 16])
def test_grayscale_io_round_trip(tmp_path, bits):
    img = np.random.default_rng(0).random((40, 50)).astype(np.float32)
    back = read_grayscale(write_grayscale(tmp_path / "a.png", img, bits))
    assert np.max(np.abs(back - img)) <= 0.5 / (2**bits - 1) + 1e-7
    decoded = decode_grayscale(encode_png(img, bits))
    assert math.isclose(float(np.max(np.abs(decoded - img))), 0.0, abs_tol=0.5 / (2**bits - 1) + 1e-7)
