import numpy as np
import pytest

from memecap.corpus import (
    MemeRecord,
    RoiBox,
    SegmentConfig,
    balance_downsample,
    compute_stats,
    default_tokenizer,
    load_manifest,
    record_from_json,
    save_manifest,
    segment_subimages,
)
from memecap.errors import SegmentationError, ValidationError


def make_record(i=0, structure="single", sentiment="self_praise", caption="five words in this caption", split="train", rois=None):
    if rois is None:
        rois = [RoiBox(0, 0, 10, 10)] if structure == "single" else [RoiBox(0, 0, 10, 10), RoiBox(12, 0, 22, 10)]
    return MemeRecord(
        id=f"m{i}",
        image_path=f"images/m{i}.png",
        structure=structure,
        sentiment=sentiment,
        caption=caption,
        rois=rois,
        split=split,
        caption_tokens=default_tokenizer(caption),
    )


# -- manifest ---------------------------------------------------------------


def test_manifest_round_trip(small_corpus, tmp_path):
    root, manifest, records = small_corpus
    loaded = load_manifest(manifest)
    assert [r.id for r in loaded] == [r.id for r in records]
    # byte-stable round trip
    out = tmp_path / "copy.jsonl"
    save_manifest(loaded, out)
    assert out.read_bytes() == manifest.read_bytes()


def test_unknown_sentiment_names_record(tmp_path):
    line = make_record(0).to_json().replace("self_praise", "joy")
    path = tmp_path / "m.jsonl"
    path.write_text(line + "\n")
    with pytest.raises(ValidationError, match="m0"):
        load_manifest(path, check_images=False)


def test_overlapping_rois_rejected():
    with pytest.raises(ValidationError, match="overlap"):
        make_record(0, structure="multi", rois=[RoiBox(0, 0, 10, 10), RoiBox(5, 5, 15, 15)]).validate()


def test_missing_image_reported(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(make_record(3).to_json() + "\n")
    with pytest.raises(ValidationError, match="m3.*missing"):
        load_manifest(path)


def test_structure_roi_count_invariants():
    with pytest.raises(ValidationError, match="single-structure"):
        make_record(0, structure="single", rois=[RoiBox(0, 0, 5, 5), RoiBox(6, 0, 9, 5)]).validate()
    with pytest.raises(ValidationError, match="multi-structure"):
        make_record(0, structure="multi", rois=[RoiBox(0, 0, 5, 5)]).validate()


def test_record_json_identity():
    rec = make_record(1, structure="multi", sentiment="mock_others", caption="ha ha ha ha ha")
    again = record_from_json(rec.to_json())
    assert again.to_json() == rec.to_json()


# -- segmentation -----------------------------------------------------------


def three_panel_image(rng):
    img = np.full((310, 100), 255, dtype=np.uint8)
    for y0 in (0, 105, 210):
        img[y0 : y0 + 100] = rng.integers(0, 256, size=(100, 100))
    return img


def test_three_panel_fixture(rng):
    rois = segment_subimages(three_panel_image(rng))
    assert [r.as_list() for r in rois] == [[0, 0, 100, 100], [0, 105, 100, 205], [0, 210, 100, 310]]


def test_solid_image_single_roi():
    img = np.full((64, 64, 3), 90, dtype=np.uint8)
    assert [r.as_list() for r in segment_subimages(img)] == [[0, 0, 64, 64]]


def test_manual_mode_identity():
    img = np.zeros((20, 20), dtype=np.uint8)
    rois = [RoiBox(0, 0, 10, 10), RoiBox(10, 10, 20, 20)]
    assert segment_subimages(img, mode="manual", manual_rois=rois) == rois


def test_manual_roi_out_of_bounds():
    img = np.zeros((20, 20), dtype=np.uint8)
    with pytest.raises(ValidationError, match="outside"):
        segment_subimages(img, mode="manual", manual_rois=[RoiBox(0, 0, 30, 10)])


def test_segmentation_idempotent_on_panel(rng):
    img = three_panel_image(rng)
    first = segment_subimages(img)
    panel = img[first[1].y0 : first[1].y1, first[1].x0 : first[1].x1]
    again = segment_subimages(panel)
    assert [r.as_list() for r in again] == [[0, 0, panel.shape[1], panel.shape[0]]]


def test_area_accounting_grid(rng):
    # 2x2 grid with 5px gutters crossing the image
    img = np.full((125, 125), 255, dtype=np.uint8)
    for y0 in (0, 65):
        for x0 in (0, 65):
            img[y0 : y0 + 60, x0 : x0 + 60] = rng.integers(0, 256, size=(60, 60))
    rois = segment_subimages(img)
    assert len(rois) == 4
    panel_area = sum(r.area for r in rois)
    separator_area = 125 * 125 - panel_area
    assert panel_area + separator_area == 125 * 125
    assert panel_area == 4 * 60 * 60


def test_thin_band_not_a_separator(rng):
    img = rng.integers(0, 256, size=(50, 40)).astype(np.uint8)
    img[20:22] = 255  # 2px uniform band, below the 3px minimum
    assert [r.as_list() for r in segment_subimages(img)] == [[0, 0, 40, 50]]


def test_segment_config_threshold(rng):
    img = three_panel_image(rng)
    strict = SegmentConfig(std_frac=0.0, min_thickness=3)
    assert [r.as_list() for r in segment_subimages(img, config=strict)] == [[0, 0, 100, 310]]


# -- statistics ---------------------------------------------------------------


def test_stats_arithmetic():
    records = [
        make_record(0, caption="a b c d e"),
        make_record(1, caption="a b c d e f g h i j"),
        make_record(2, caption="a b c d e f g h i j k l m n o"),
    ]
    stats = compute_stats(records)
    assert stats.tokens.avg == pytest.approx(10.0)
    assert stats.tokens.max == 15
    assert stats.tokens.min == 5


def test_stats_sentiment_symmetry():
    sentiments = ["self_praise", "praise_others", "self_mockery", "mock_others"]
    records = [make_record(i, sentiment=s) for i, s in enumerate(sentiments)]
    stats = compute_stats(records)
    for s in sentiments:
        assert stats.fraction_per_sentiment[s] == pytest.approx(0.25)
    assert stats.fraction_single + stats.fraction_multi == pytest.approx(1.0)


def test_stats_permutation_invariant(small_corpus):
    _, _, records = small_corpus
    a = compute_stats(records)
    b = compute_stats(records[::-1])
    assert a.to_dict() == b.to_dict()


def test_stats_empty_errors():
    with pytest.raises(ValidationError):
        compute_stats([])


# -- downsampling -------------------------------------------------------------


def test_downsample_fixed_point(small_corpus):
    _, _, records = small_corpus
    targets = {
        "structure": {"single": 0.5, "multi": 0.5},
        "sentiment": {s: 0.25 for s in ("self_praise", "praise_others", "self_mockery", "mock_others")},
    }
    out = balance_downsample(records, targets, seed=0)
    assert [r.id for r in out] == [r.id for r in records]


def test_downsample_rebalances_structure():
    records = [make_record(i, structure="single") for i in range(16)]
    records += [make_record(100 + i, structure="multi") for i in range(4)]
    out = balance_downsample(records, {"structure": {"single": 0.5, "multi": 0.5}}, seed=1)
    singles = sum(1 for r in out if r.structure == "single")
    assert singles == len(out) - singles == 4
    assert {r.id for r in out} <= {r.id for r in records}
    assert len({r.id for r in out}) == len(out)


def test_downsample_deterministic():
    records = [make_record(i, structure="single") for i in range(10)]
    records += [make_record(50 + i, structure="multi") for i in range(4)]
    targets = {"structure": {"single": 0.5, "multi": 0.5}}
    a = balance_downsample(records, targets, seed=9)
    b = balance_downsample(records, targets, seed=9)
    assert [r.id for r in a] == [r.id for r in b]


def test_downsample_missing_category():
    records = [make_record(i, structure="single") for i in range(4)]
    with pytest.raises(ValidationError, match="multi"):
        balance_downsample(records, {"structure": {"single": 0.5, "multi": 0.5}}, seed=0)


def test_zero_area_panel_error():
    with pytest.raises(ValidationError):
        RoiBox(5, 5, 5, 10)


def test_segmentation_error_type_exists():
    assert issubclass(SegmentationError, Exception)
