"""Patch geometry and background filtering."""

import logging

import numpy as np
import pytest
from PIL import Image

from histocell.dataset import SchemaError, SpotTable
from histocell.patchprep import (PatchRaster, background_fraction, filter_spots,
                                 load_fractions_csv, load_patch, patch_bbox,
                                 scan_patch_dir, write_fractions_csv)


def raster(value, size=8):
    return PatchRaster(pixels=np.full((size, size, 3), value, dtype=np.uint8))


def test_bbox_examples():
    assert patch_bbox(112, 112, 224, 1000, 1000) == patch_bbox(112.2, 111.8, 224, 1000, 1000)
    bb = patch_bbox(112, 112, 224, 1000, 1000)
    assert (bb.x0, bb.y0) == (0, 0)
    bb = patch_bbox(500, 500, 224, 1000, 1000)
    assert (bb.x0, bb.y0) == (388, 388)
    bb = patch_bbox(10, 10, 224, 1000, 1000)  # clamped into the image
    assert (bb.x0, bb.y0) == (0, 0)
    bb = patch_bbox(995, 998, 224, 1000, 1000)
    assert (bb.x0, bb.y0) == (776, 776)


def test_bbox_random_centers_stay_inside():
    rng = np.random.default_rng(1)
    for _ in range(300):
        w = int(rng.integers(224, 1200))
        h = int(rng.integers(224, 1200))
        cx = float(rng.uniform(0, w))
        cy = float(rng.uniform(0, h))
        bb = patch_bbox(cx, cy, 224, w, h)
        assert 0 <= bb.x0 and bb.x0 + bb.size <= w
        assert 0 <= bb.y0 and bb.y0 + bb.size <= h


def test_bbox_errors():
    with pytest.raises(ValueError, match="smaller than patch"):
        patch_bbox(10, 10, 224, 100, 100)
    with pytest.raises(ValueError, match="outside image"):
        patch_bbox(-5, 10, 50, 100, 100)


def test_background_fraction_extremes():
    assert background_fraction(raster(255)) == 1.0
    assert background_fraction(raster(0)) == 0.0
    # threshold is strict: a pixel exactly at the threshold is tissue
    assert background_fraction(raster(220), white_threshold=220) == 0.0
    assert background_fraction(raster(221), white_threshold=220) == 1.0


def test_background_fraction_mixed_and_permutation_invariant():
    pixels = np.zeros((4, 4, 3), dtype=np.uint8)
    pixels[:2] = 255
    patch = PatchRaster(pixels=pixels)
    assert background_fraction(patch) == 0.5

    rng = np.random.default_rng(0)
    flat = pixels.reshape(-1, 3)
    shuffled = PatchRaster(pixels=flat[rng.permutation(len(flat))].reshape(4, 4, 3))
    assert background_fraction(shuffled) == 0.5

    # one dark channel disqualifies a pixel
    pixels = np.full((2, 2, 3), 255, dtype=np.uint8)
    pixels[0, 0, 1] = 10
    assert background_fraction(PatchRaster(pixels=pixels)) == 0.75


def test_raster_must_be_square():
    with pytest.raises(ValueError, match="square"):
        PatchRaster(pixels=np.zeros((2, 3, 3), dtype=np.uint8))


def spots_table():
    return SpotTable(
        spot_ids=("s1", "s2", "s3"),
        sample_ids=("a", "a", "a"),
        patient_ids=("p", "p", "p"),
        coords=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
        embeddings=np.eye(3),
    )


def test_filter_spots():
    spots = spots_table()
    assert filter_spots(spots, {"s1": 0.0, "s2": 0.0, "s3": 0.0}).n == 3
    kept = filter_spots(spots, {"s1": 0.9, "s2": 0.1, "s3": 0.8})
    assert kept.spot_ids == ("s2", "s3")  # 0.8 <= 0.8 stays
    with pytest.raises(SchemaError, match="no background fraction for spot 's3'"):
        filter_spots(spots, {"s1": 0.0, "s2": 0.0})


def test_filter_spots_empty_warns(caplog):
    spots = spots_table()
    with caplog.at_level(logging.WARNING):
        empty = filter_spots(spots, {"s1": 1.0, "s2": 1.0, "s3": 1.0})
    assert empty.n == 0
    assert empty.dim == spots.dim
    assert any("removed all" in r.message for r in caplog.records)


def test_png_scan_and_csv_roundtrip(tmp_path):
    Image.fromarray(np.full((6, 6, 3), 255, dtype=np.uint8)).save(tmp_path / "w1.png")
    Image.fromarray(np.zeros((6, 6, 3), dtype=np.uint8)).save(tmp_path / "b1.png")
    fractions = scan_patch_dir(tmp_path)
    assert fractions == {"w1": 1.0, "b1": 0.0}
    assert load_patch(tmp_path / "w1.png").size == 6

    out = tmp_path / "fractions.csv"
    write_fractions_csv(fractions, out)
    assert load_fractions_csv(out) == fractions

    with pytest.raises(SchemaError, match="no .png"):
        scan_patch_dir(tmp_path / "empty_does_not_exist_as_pngs")


def test_fractions_csv_validation(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("spot_id,background_fraction\ns1,1.5\n", encoding="utf-8")
    with pytest.raises(SchemaError, match=r"bad\.csv:2.*outside"):
        load_fractions_csv(bad)
    bad.write_text("wrong,header\n", encoding="utf-8")
    with pytest.raises(SchemaError, match="header"):
        load_fractions_csv(bad)
