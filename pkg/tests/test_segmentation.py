import numpy as np
import pytest
from scipy import ndimage

from app.errors import SegmentationError
from app.geometry import convexity_of_pixels
from app.models import Image, PixelLabel, SegmentationMask
from app.schemas import PixelScorer, PointAnnotation, SegParams
from app.segmentation import (
    build_pseudo_mask,
    count,
    evaluate,
    features,
    foreground_map,
    load_mask,
    load_masks,
    save_mask,
    save_scorer,
    load_scorer,
    score_map,
    segment,
    train_scorer,
    training_accuracy,
)
from tests.helpers import GREEN, paint_disks, red_threshold_scorer


def ids_mask(ids, image_id="m") -> SegmentationMask:
    return SegmentationMask.from_labels(np.asarray(ids), image_id=image_id)


class TestPseudoMask:
    def test_disk_and_ring(self):
        points = PointAnnotation(image_id="p", points=[(10.0, 10.0)])
        mask = build_pseudo_mask(points, (20, 20), r_fg=3, r_ig=2)
        assert mask.count(PixelLabel.FOREGROUND) == 29
        assert mask.count(PixelLabel.IGNORE) == 81 - 29
        assert mask.labels[10, 10] == PixelLabel.FOREGROUND
        assert mask.labels[10, 14] == PixelLabel.IGNORE
        assert mask.labels[10, 16] == PixelLabel.BACKGROUND

    def test_no_points_is_all_background(self):
        mask = build_pseudo_mask(PointAnnotation(image_id="p"), (8, 5), r_fg=3, r_ig=2)
        assert mask.labels.shape == (5, 8)
        assert mask.count(PixelLabel.BACKGROUND) == 40

    def test_close_points_merge(self):
        points = PointAnnotation(image_id="p", points=[(10.0, 10.0), (12.0, 10.0)])
        mask = build_pseudo_mask(points, (30, 30), r_fg=3, r_ig=2)
        _, n = ndimage.label(mask.labels == PixelLabel.FOREGROUND)
        assert n == 1

    def test_ignore_never_covers_foreground(self):
        points = PointAnnotation(image_id="p", points=[(5.0, 5.0), (11.0, 5.0)])
        mask = build_pseudo_mask(points, (20, 12), r_fg=3, r_ig=4)
        assert mask.labels[5, 5] == PixelLabel.FOREGROUND
        assert mask.labels[5, 11] == PixelLabel.FOREGROUND

    def test_point_outside(self):
        points = PointAnnotation(image_id="p", points=[(25.0, 3.0)])
        with pytest.raises(SegmentationError, match="outside"):
            build_pseudo_mask(points, (20, 20), r_fg=3, r_ig=2)

    def test_invalid_radii(self):
        with pytest.raises(SegmentationError):
            build_pseudo_mask(PointAnnotation(image_id="p"), (20, 20), r_fg=0, r_ig=2)


class TestTrainScorer:
    def test_separable_corpus(self, separable_corpus, trained_scorer):
        assert trained_scorer.trained
        assert training_accuracy(trained_scorer, separable_corpus) >= 0.99

    def test_zero_epochs_keeps_initial_weights(self, separable_corpus):
        scorer = train_scorer(separable_corpus, epochs=0, lr=0.1, seed=0)
        assert scorer.weights == [0.0] * 7
        assert not scorer.trained
        assert scorer.training_loss_history == []
        image = separable_corpus[0][0]
        assert np.all(score_map(image, scorer) == 0.5)

    def test_loss_tail_is_non_increasing(self, separable_corpus):
        scorer = train_scorer(separable_corpus, epochs=60, lr=0.1, seed=0)
        history = scorer.training_loss_history
        assert len(history) == 60
        tail = history[5:]
        assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))

    def test_deterministic(self, separable_corpus):
        a = train_scorer(separable_corpus, epochs=20, lr=0.5, seed=3, max_pixels=5000)
        b = train_scorer(separable_corpus, epochs=20, lr=0.5, seed=3, max_pixels=5000)
        assert a.weights == b.weights

    def test_no_foreground(self):
        image = Image(np.zeros((10, 10, 3)))
        mask = build_pseudo_mask(PointAnnotation(image_id=""), (10, 10), r_fg=3, r_ig=2)
        with pytest.raises(SegmentationError, match="no Foreground"):
            train_scorer([(image, mask)], epochs=5, lr=0.1, seed=0)

    def test_empty_corpus(self):
        with pytest.raises(SegmentationError):
            train_scorer([], epochs=5, lr=0.1, seed=0)

    def test_scores_are_probabilities(self, trained_scorer):
        rng = np.random.default_rng(4)
        scores = score_map(Image(rng.random((10, 10, 3))), trained_scorer)
        assert np.all((scores >= 0) & (scores <= 1))

    def test_features(self):
        phi = features(np.array([[0.5, 0.2, 0.1]]))
        assert phi.tolist() == pytest.approx([[1.0, 0.5, 0.2, 0.1, 0.25, 0.04, 0.01]])

    def test_scorer_file_round_trip(self, tmp_path, trained_scorer):
        save_scorer(trained_scorer, tmp_path / "scorer.json")
        assert load_scorer(tmp_path / "scorer.json") == trained_scorer

    def test_unreadable_scorer(self, tmp_path):
        (tmp_path / "scorer.json").write_text("{")
        with pytest.raises(SegmentationError):
            load_scorer(tmp_path / "scorer.json")


class TestSegment:
    def test_five_disjoint_disks(self, trained_scorer, params):
        centers = [(15, 15), (50, 15), (85, 15), (30, 60), (75, 60)]
        mask = segment(paint_disks(100, 80, centers, radius=8), trained_scorer, params)
        assert count(mask) == 5
        assert all(inst.convexity >= 0.95 for inst in mask.instances)
        assert mask.is_consistent()

    def test_ids_follow_centroid_raster_order(self, params):
        centers = [(70, 15), (15, 15), (40, 50)]
        mask = segment(paint_disks(90, 70, centers, radius=8), red_threshold_scorer(), params)
        assert [inst.id for inst in mask.instances] == [1, 2, 3]
        assert [round(inst.centroid[0]) for inst in mask.instances] == [15, 70, 40]

    def test_overlapping_disks_are_split(self, trained_scorer, params):
        mask = segment(paint_disks(80, 60, [(30, 30), (42, 30)], radius=8), trained_scorer, params)
        assert count(mask) == 2
        left, right = mask.instances
        assert left.centroid[0] < 36 < right.centroid[0]

    def test_blank_image(self, trained_scorer, params):
        image = Image(np.tile(GREEN, (40, 40, 1)), calibrated=True)
        assert count(segment(image, trained_scorer, params)) == 0

    def test_small_blobs_dropped(self, params):
        mask = segment(paint_disks(40, 40, [(20, 20)], radius=2), red_threshold_scorer(), params)
        assert count(mask) == 0

    def test_untrained_scorer(self, params):
        with pytest.raises(SegmentationError, match="untrained"):
            segment(paint_disks(20, 20, [], radius=3), PixelScorer(), params)

    def test_uncalibrated_image(self, params):
        image = paint_disks(20, 20, [], radius=3, calibrated=False)
        with pytest.raises(SegmentationError, match="not calibrated"):
            segment(image, red_threshold_scorer(), params)

    def test_emitted_instances_respect_kappa(self):
        rng = np.random.default_rng(31)
        scorer = red_threshold_scorer()
        for _ in range(100):
            height, width = 48, 48
            blob = np.zeros((height, width), dtype=bool)
            yy, xx = np.mgrid[0:height, 0:width]
            for _ in range(rng.integers(1, 5)):
                cx, cy, r = rng.integers(6, 42), rng.integers(6, 42), rng.integers(3, 9)
                blob |= (xx - cx) ** 2 + (yy - cy) ** 2 <= r**2
            for _ in range(rng.integers(0, 3)):
                x0, y0 = rng.integers(0, 40, size=2)
                blob[y0 : y0 + rng.integers(2, 12), x0 : x0 + rng.integers(2, 20)] = True
            pixels = np.where(blob[:, :, None], 0.9, 0.1) * np.ones(3)
            params = SegParams(
                kappa=float(rng.uniform(0.6, 0.95)),
                min_area=int(rng.integers(5, 40)),
                seed_separation=int(rng.integers(2, 6)),
            )
            mask = segment(Image(pixels, calibrated=True), scorer, params)
            assert mask.is_consistent()
            for inst in mask.instances:
                assert inst.convexity >= params.kappa
                assert inst.convexity == convexity_of_pixels(inst.pixels)
                assert inst.area >= params.min_area
                _, parts = ndimage.label(mask.ids == inst.id)
                assert parts == 1

    def test_raising_tau_never_grows_foreground(self):
        rng = np.random.default_rng(32)
        for _ in range(100):
            image = Image(rng.random((16, 16, 3)))
            scorer = PixelScorer(weights=list(rng.normal(0, 3, size=7)), trained=True)
            low, high = np.sort(rng.uniform(0.01, 0.99, size=2))
            assert foreground_map(image, scorer, high).sum() <= foreground_map(image, scorer, low).sum()


class TestCountAndEvaluate:
    def test_count(self):
        ids = np.zeros((10, 20), dtype=int)
        for i in range(5):
            ids[2:5, 4 * i : 4 * i + 2] = i + 1
        assert count(ids_mask(ids)) == 5
        assert count(SegmentationMask.empty(4, 4)) == 0

    def test_identical_masks(self):
        ids = np.zeros((6, 6), dtype=int)
        ids[1:3, 1:3] = 1
        ids[4:6, 4:6] = 2
        report = evaluate([ids_mask(ids)], [ids_mask(ids)])
        assert report.miou == 1.0
        assert report.count_mae == 0.0

    def test_half_foreground(self):
        truth = np.zeros((4, 4), dtype=int)
        truth[:, :] = 1
        pred = np.zeros((4, 4), dtype=int)
        pred[:2, :] = 1
        report = evaluate([ids_mask(pred)], [ids_mask(truth)])
        assert report.per_image[0].iou == 0.5
        assert report.per_image[0].count_error == 0

    def test_checkerboard(self):
        pred = np.array([[1, 0], [0, 2]])
        truth = np.array([[1, 1], [1, 1]])
        report = evaluate([ids_mask(pred)], [ids_mask(truth)])
        assert report.miou == 0.5
        assert report.count_mae == 1.0

    def test_means_over_images(self):
        full = np.ones((2, 2), dtype=int)
        half = np.array([[1, 1], [0, 0]])
        report = evaluate([ids_mask(full), ids_mask(half)], [ids_mask(full), ids_mask(full)])
        assert report.miou == pytest.approx(0.75)

    def test_two_empty_foregrounds_agree(self):
        report = evaluate([SegmentationMask.empty(3, 3)], [SegmentationMask.empty(3, 3)])
        assert report.miou == 1.0

    def test_length_mismatch(self):
        with pytest.raises(SegmentationError):
            evaluate([SegmentationMask.empty(3, 3)], [])

    def test_shape_mismatch(self):
        with pytest.raises(SegmentationError, match="does not match"):
            evaluate([SegmentationMask.empty(3, 3)], [SegmentationMask.empty(4, 3)])


class TestMaskFiles:
    def test_save_and_load(self, tmp_path, params):
        image = paint_disks(60, 40, [(15, 20), (45, 20)], radius=7, image_id="A5/2022-08-02/frame_000")
        mask = segment(image, red_threshold_scorer(), params)
        save_mask(mask, tmp_path / "A5" / "frame_000.png")

        back = load_mask(tmp_path / "A5" / "frame_000.png")
        assert back.image_id == "A5/2022-08-02/frame_000"
        assert np.array_equal(back.ids, mask.ids)
        assert [i.mean_rgb for i in back.instances] == [i.mean_rgb for i in mask.instances]
        assert [i.convexity for i in back.instances] == [i.convexity for i in mask.instances]

        loaded = load_masks(tmp_path)
        assert list(loaded) == ["A5/2022-08-02/frame_000"]

    def test_table_must_match_raster(self, tmp_path):
        mask = ids_mask(np.array([[1, 0], [0, 2]]))
        save_mask(mask, tmp_path / "m.png")
        (tmp_path / "m.json").write_text(mask.table().model_copy(update={"instances": []}).model_dump_json())
        with pytest.raises(SegmentationError):
            load_mask(tmp_path / "m.png")
