import datetime as dt
import json
import logging

import numpy as np
import pytest
from pydantic import ValidationError

from app.errors import DatasetError, ImagingError
from app.imaging import (
    clamp_unit,
    dataset_summary,
    load_dataset,
    load_index,
    points_in_crop,
    read_png,
    save_index,
    tile_frame,
    write_png,
)
from app.models import CropGrid, Image
from app.schemas import PointAnnotation, Variety


def write_frame(root, bog, date, stem="frame_000", width=8, height=6, value=0.5):
    path = root / bog / date / "frames" / f"{stem}.png"
    write_png(Image(np.full((height, width, 3), value)), path)
    return path


class TestLoadDataset:
    def test_two_bogs_three_dates(self, tmp_path):
        for bog in ["A5", "B7"]:
            for date in ["2022-08-02", "2022-08-16", "2022-08-25"]:
                write_frame(tmp_path, bog, date)
        index = load_dataset(tmp_path)
        assert len(index.entries) == 6
        assert [e.image_id for e in index.entries][:3] == [
            "A5/2022-08-02/frame_000",
            "A5/2022-08-16/frame_000",
            "A5/2022-08-25/frame_000",
        ]
        assert all(not e.labeled for e in index.entries)

    def test_ordering_is_deterministic(self, tmp_path):
        for bog in ["K4", "A4", "I15"]:
            for stem in ["frame_b", "frame_a"]:
                write_frame(tmp_path, bog, "2022-09-09", stem=stem)
        first = load_dataset(tmp_path)
        second = load_dataset(tmp_path)
        assert first == second
        ids = [e.image_id for e in first.entries]
        assert ids == sorted(ids)

    def test_annotation_outside_crop_names_the_image(self, tmp_path):
        write_frame(tmp_path, "J12", "2022-08-31", width=456, height=608)
        (tmp_path / "J12" / "2022-08-31" / "annotations.json").write_text(
            json.dumps([{"image_id": "frame_000", "points": [[500, 700]]}])
        )
        with pytest.raises(DatasetError, match="J12/2022-08-31/frame_000"):
            load_dataset(tmp_path)

    def test_annotated_frame_is_labeled(self, tmp_path):
        write_frame(tmp_path, "J12", "2022-08-31")
        (tmp_path / "J12" / "2022-08-31" / "annotations.json").write_text(
            json.dumps([{"image_id": "J12/2022-08-31/frame_000", "points": [[1, 2], [3.5, 4.5]]}])
        )
        entry = load_dataset(tmp_path).entries[0]
        assert entry.labeled
        assert entry.annotation.image_id == "J12/2022-08-31/frame_000"
        assert entry.annotation.points == [(1.0, 2.0), (3.5, 4.5)]

    def test_empty_root_warns(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            index = load_dataset(tmp_path)
        assert index.entries == []
        assert "no frames" in caplog.text

    def test_missing_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path / "nowhere")

    def test_bog_file_gives_variety(self, tmp_path):
        write_frame(tmp_path, "A5", "2022-08-02")
        (tmp_path / "A5" / "bog.json").write_text(json.dumps({"variety": "Haines"}))
        assert load_dataset(tmp_path).entries[0].meta.variety == Variety.HAINES

    def test_malformed_bog_file(self, tmp_path):
        write_frame(tmp_path, "A5", "2022-08-02")
        (tmp_path / "A5" / "bog.json").write_text(json.dumps({"variety": "Cranberry"}))
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_non_date_directories_are_skipped(self, tmp_path):
        write_frame(tmp_path, "A5", "2022-08-02")
        write_frame(tmp_path, "A5", "notes")
        assert len(load_dataset(tmp_path).entries) == 1

    def test_index_cache_and_summary(self, tmp_path):
        write_frame(tmp_path / "data", "A5", "2022-08-02")
        write_frame(tmp_path / "data", "A5", "2022-08-16")
        index = load_dataset(tmp_path / "data")
        save_index(index, tmp_path / "index.json")
        assert load_index(tmp_path / "index.json") == index

        summary = dataset_summary(index)
        assert summary.total_images == 2
        assert summary.labeled_images == 0
        assert summary.bogs == ["A5"]
        assert summary.first_date == dt.date(2022, 8, 2)
        assert summary.last_date == dt.date(2022, 8, 16)


class TestPointAnnotation:
    def test_duplicates_rejected(self):
        with pytest.raises(ValidationError):
            PointAnnotation(image_id="x", points=[(1.0, 1.0), (1.0, 1.0)])

    def test_points_rebased_onto_crop(self):
        frame = Image(np.zeros((10, 20, 3)), image_id="f")
        crops = tile_frame(frame, CropGrid(crop_w=10, crop_h=10))
        points = PointAnnotation(image_id="f", points=[(2.0, 3.0), (12.5, 4.0)])
        assert points_in_crop(points, crops[0]).points == [(2.0, 3.0)]
        assert points_in_crop(points, crops[1]).points == [(2.5, 4.0)]


class TestTileFrame:
    def test_full_frame_grid(self):
        grid = CropGrid().resolve(3648, 5472)
        assert (grid.cols, grid.rows) == (8, 9)
        assert grid.cols * grid.rows == 72

    def test_full_frame_tiles_without_overlap(self):
        # 3648x5472 frame at 1/38 scale, same 8x9 grid
        frame = Image(np.zeros((144, 96, 3)), image_id="A5/2022-08-02/frame_000")
        crops = tile_frame(frame, CropGrid(crop_w=12, crop_h=16))
        assert len(crops) == 72
        assert len({c.origin for c in crops}) == 72
        covered = np.zeros((144, 96), dtype=int)
        for crop in crops:
            x0, y0 = crop.origin
            covered[y0 : y0 + crop.height, x0 : x0 + crop.width] += 1
        assert np.all(covered == 1)

    def test_single_crop_is_identity(self):
        rng = np.random.default_rng(0)
        frame = Image(rng.random((608, 456, 3)), image_id="A5/2022-08-02/frame_000")
        crops = tile_frame(frame, CropGrid())
        assert len(crops) == 1
        assert np.array_equal(crops[0].pixels, frame.pixels)
        assert crops[0].image_id == frame.image_id
        assert crops[0].origin == (0, 0)

    def test_margins_dropped(self):
        frame = Image(np.zeros((1000, 1000, 3)), image_id="f")
        crops = tile_frame(frame, CropGrid())
        assert len(crops) == 2
        assert [c.origin for c in crops] == [(0, 0), (456, 0)]
        assert all((c.width, c.height) == (456, 608) for c in crops)

    def test_lossless_reassembly(self):
        rng = np.random.default_rng(1)
        frame = Image(rng.random((70, 95, 3)))
        grid = CropGrid(crop_w=30, crop_h=20)
        crops = tile_frame(frame, grid)
        assert len(crops) == 3 * 3
        rebuilt = np.full(frame.pixels.shape, np.nan)
        for crop in crops:
            x0, y0 = crop.origin
            rebuilt[y0 : y0 + crop.height, x0 : x0 + crop.width] = crop.pixels
        assert np.array_equal(rebuilt[:60, :90], frame.pixels[:60, :90])
        assert np.isnan(rebuilt[60:, :]).all() and np.isnan(rebuilt[:, 90:]).all()

    def test_row_major_ids(self):
        crops = tile_frame(Image(np.zeros((40, 60, 3)), image_id="f"), CropGrid(crop_w=30, crop_h=20))
        assert [c.image_id for c in crops] == ["f@r0c0", "f@r0c1", "f@r1c0", "f@r1c1"]

    def test_frame_smaller_than_crop(self):
        with pytest.raises(ImagingError):
            tile_frame(Image(np.zeros((100, 100, 3))), CropGrid())


class TestClampUnit:
    def test_clamps_each_channel(self):
        image = Image(np.array([[[1.2, -0.1, 0.5]]]))
        assert clamp_unit(image).pixels[0, 0].tolist() == [1.0, 0.0, 0.5]

    def test_idempotent_on_unit_image(self):
        rng = np.random.default_rng(2)
        image = Image(rng.random((5, 5, 3)))
        once = clamp_unit(image)
        assert np.array_equal(once.pixels, image.pixels)
        assert np.array_equal(clamp_unit(once).pixels, once.pixels)

    def test_nan_rejected(self):
        image = Image(np.full((1, 1, 3), np.nan))
        with pytest.raises(ImagingError, match="non-finite pixel"):
            clamp_unit(image)


def test_png_round_trip_within_one_level(tmp_path):
    rng = np.random.default_rng(3)
    image = Image(rng.random((12, 17, 3)))
    write_png(image, tmp_path / "x.png")
    back = read_png(tmp_path / "x.png")
    assert back.pixels.shape == image.pixels.shape
    assert np.max(np.abs(back.pixels - image.pixels)) <= 1 / 255
