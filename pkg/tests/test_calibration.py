import json

import numpy as np
import pytest

from app.calibration import (
    apply_correction,
    distort,
    fit_correction,
    load_correction,
    load_grey_reference,
    measure_grey_patches,
    save_correction,
    session_correction,
)
from app.errors import CalibrationError
from app.imaging import write_png
from app.models import Image
from app.schemas import GreyPatchMeasurement, GreyReference, PatchRect, RadiometricCorrection
from app.synth import card_layout, render_card

CARD_VALUES = [0.9, 0.7, 0.5, 0.35, 0.2, 0.1]
REFERENCE = GreyReference(values=[0.9, 0.7, 0.5, 0.35, 0.2, 0.12])


def card_with(values, size=20):
    rects = [PatchRect(x=i * size, y=0, w=size, h=size) for i in range(len(values))]
    pixels = np.zeros((size, size * len(values), 3))
    for rect, v in zip(rects, values):
        pixels[:, rect.x : rect.x + size] = v
    return Image(pixels), rects


def grey_measurement(values, session_id="s") -> GreyPatchMeasurement:
    return GreyPatchMeasurement(
        session_id=session_id, means=[(v, v, v) for v in values], pixel_counts=[400] * len(values)
    )


class TestMeasureGreyPatches:
    def test_uniform_patches(self):
        card, rects = card_with(CARD_VALUES)
        measured = measure_grey_patches(card, rects)
        for mean, v in zip(measured.means, CARD_VALUES):
            assert mean == pytest.approx((v, v, v), abs=1e-12)
        assert measured.pixel_counts == [400] * 6

    def test_salt_and_pepper_is_trimmed(self):
        rng = np.random.default_rng(11)
        card, rects = card_with(CARD_VALUES)
        pixels = card.pixels.copy()
        for rect in rects:
            flat = rng.choice(rect.w * rect.h, size=20, replace=False)
            ys, xs = np.unravel_index(flat, (rect.h, rect.w))
            pixels[ys[:10] + rect.y, xs[:10] + rect.x] = 1.0
            pixels[ys[10:] + rect.y, xs[10:] + rect.x] = 0.0
        measured = measure_grey_patches(card.with_pixels(pixels), rects)
        for mean, v in zip(measured.means, CARD_VALUES):
            assert np.allclose(mean, v, atol=0.01)

    def test_darkest_first_is_rejected(self):
        card, rects = card_with(CARD_VALUES[::-1])
        with pytest.raises(CalibrationError, match="not decreasing"):
            measure_grey_patches(card, rects)

    def test_rectangle_outside_card(self):
        card, rects = card_with(CARD_VALUES)
        rects[5] = PatchRect(x=card.width - 5, y=0, w=20, h=20)
        with pytest.raises(CalibrationError, match="outside"):
            measure_grey_patches(card, rects)

    def test_too_few_pixels_after_trimming(self):
        card, _ = card_with(CARD_VALUES)
        rects = [PatchRect(x=i * 20, y=0, w=5, h=5) for i in range(6)]
        with pytest.raises(CalibrationError, match="after trimming"):
            measure_grey_patches(card, rects)

    def test_wrong_patch_count(self):
        card, rects = card_with(CARD_VALUES)
        with pytest.raises(CalibrationError):
            measure_grey_patches(card, rects[:5])


class TestFitCorrection:
    def test_identity_fit(self):
        corr = fit_correction(grey_measurement(REFERENCE.values), REFERENCE)
        assert corr.gain == pytest.approx((1.0, 1.0, 1.0), abs=1e-12)
        assert corr.offset == pytest.approx((0.0, 0.0, 0.0), abs=1e-12)
        assert corr.residual_rms == pytest.approx(0.0, abs=1e-12)

    def test_inverts_known_affine_response(self):
        measured = grey_measurement([0.5 * v - 0.05 for v in REFERENCE.values])
        corr = fit_correction(measured, REFERENCE)
        assert corr.gain == pytest.approx((2.0, 2.0, 2.0), abs=1e-12)
        assert corr.offset == pytest.approx((0.1, 0.1, 0.1), abs=1e-12)
        assert corr.residual_rms < 1e-12

    def test_noisy_measurements_recover_gain(self):
        rng = np.random.default_rng(5)
        truth = 1.25
        ref = np.asarray(REFERENCE.values)
        for _ in range(100):
            means = (ref / truth)[:, None] + rng.normal(0.0, 0.005, size=(6, 3))
            measured = GreyPatchMeasurement(session_id="n", means=[tuple(m) for m in means], pixel_counts=[400] * 6)
            corr = fit_correction(measured, REFERENCE)
            assert np.all(np.abs(np.asarray(corr.gain) - truth) <= 0.05)

    def test_residual_matches_applied_means(self):
        rng = np.random.default_rng(6)
        means = np.asarray(REFERENCE.values)[:, None] * 0.8 + rng.normal(0.0, 0.01, size=(6, 3))
        measured = GreyPatchMeasurement(session_id="r", means=[tuple(m) for m in means], pixel_counts=[400] * 6)
        corr = fit_correction(measured, REFERENCE)
        fitted = means * np.asarray(corr.gain) + np.asarray(corr.offset)
        rms = np.sqrt(np.mean((fitted - np.asarray(REFERENCE.values)[:, None]) ** 2))
        assert corr.residual_rms == pytest.approx(rms, rel=1e-9)

    def test_constant_channel_is_singular(self):
        measured = GreyPatchMeasurement(
            session_id="s", means=[(0.5, v, v) for v in REFERENCE.values], pixel_counts=[400] * 6
        )
        with pytest.raises(CalibrationError, match="singular"):
            fit_correction(measured, REFERENCE)

    def test_rising_channel_is_inverted(self):
        measured = GreyPatchMeasurement(
            session_id="s",
            means=[(0.2 + 0.05 * i, v, v) for i, v in enumerate(REFERENCE.values)],
            pixel_counts=[400] * 6,
        )
        with pytest.raises(CalibrationError, match="inverted response"):
            fit_correction(measured, REFERENCE)

    def test_recovers_random_distortions(self):
        rng = np.random.default_rng(2022)
        for _ in range(100):
            ref = np.sort(rng.uniform(0.25, 0.44, size=6))[::-1]
            reference = GreyReference(values=[float(v) for v in ref])
            gain = rng.uniform(0.5, 2.0, size=3)
            offset = rng.uniform(-0.1, 0.1, size=3)
            means = ref[:, None] * gain + offset
            measured = GreyPatchMeasurement(session_id="p", means=[tuple(m) for m in means], pixel_counts=[400] * 6)

            corr = fit_correction(measured, reference)
            assert corr.residual_rms < 1e-9
            assert np.allclose(corr.gain, 1.0 / gain, rtol=1e-9)
            assert np.allclose(corr.offset, -offset / gain, atol=1e-9)

            scene = Image(rng.uniform(0.25, 0.44, size=(4, 4, 3)))
            restored = apply_correction(distort(scene, gain, offset), corr)
            assert np.max(np.abs(restored.pixels - scene.pixels)) <= 1e-6


class TestApplyCorrection:
    def test_identity_flips_flag_only(self):
        rng = np.random.default_rng(8)
        image = Image(rng.random((6, 6, 3)))
        out = apply_correction(image, RadiometricCorrection.identity())
        assert np.array_equal(out.pixels, image.pixels)
        assert out.calibrated and not image.calibrated

    def test_gain_then_clamp(self):
        corr = RadiometricCorrection(session_id="s", gain=(2, 2, 2), offset=(0, 0, 0), residual_rms=0)
        out = apply_correction(Image(np.array([[[0.3, 0.6, 0.9]]])), corr)
        assert out.pixels[0, 0] == pytest.approx([0.6, 1.0, 1.0])

    def test_double_correction_is_forbidden(self):
        corr = RadiometricCorrection.identity()
        once = apply_correction(Image(np.zeros((2, 2, 3))), corr)
        with pytest.raises(CalibrationError, match="already calibrated"):
            apply_correction(once, corr)

    def test_distort_then_correct_round_trip(self):
        rng = np.random.default_rng(9)
        scene = Image(rng.random((30, 30, 3)))
        gain, offset = np.array([1.4, 0.8, 1.1]), np.array([0.05, -0.03, 0.0])
        distorted = distort(scene, gain, offset)
        corr = RadiometricCorrection(
            session_id="s", gain=tuple(1 / gain), offset=tuple(-offset / gain), residual_rms=0
        )
        restored = apply_correction(distorted, corr)
        raw = scene.pixels * gain + offset
        unclamped = (raw >= 0) & (raw <= 1)
        assert np.max(np.abs(restored.pixels - scene.pixels)[unclamped]) <= 1e-6

    def test_monotone_per_channel(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            corr = RadiometricCorrection(
                session_id="m",
                gain=tuple(rng.uniform(0.5, 2.0, size=3)),
                offset=tuple(rng.uniform(-0.1, 0.1, size=3)),
                residual_rms=0,
            )
            values = np.sort(rng.random(50))
            image = Image(np.repeat(values[None, :, None], 3, axis=2))
            out = apply_correction(image, corr).pixels[0]
            assert np.all(np.diff(out, axis=0) >= 0)


def test_sessions_agree_after_correction(reference):
    rng = np.random.default_rng(12)
    scene = Image(rng.uniform(0.05, 0.8, size=(20, 20, 3)))
    card = render_card(reference)
    corrected = []
    for gain, offset in [((0.9, 1.0, 0.87), (0.01, -0.015, 0.02)), ((1.04, 0.86, 0.95), (-0.02, 0.0, 0.01))]:
        measured = measure_grey_patches(distort(card, gain, offset), card_layout())
        corr = fit_correction(measured, reference)
        corrected.append(apply_correction(distort(scene, gain, offset), corr).pixels)
    assert np.max(np.abs(corrected[0] - corrected[1])) <= 1 / 255


class TestPersistence:
    def test_reference_file_forms(self, tmp_path):
        (tmp_path / "bare.json").write_text(json.dumps([0.9, 0.6, 0.4, 0.2, 0.1, 0.05]))
        (tmp_path / "object.json").write_text(json.dumps({"values": [0.9, 0.6, 0.4, 0.2, 0.1, 0.05]}))
        assert load_grey_reference(tmp_path / "bare.json") == load_grey_reference(tmp_path / "object.json")

    def test_increasing_reference_rejected(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps([0.1, 0.2, 0.3, 0.4, 0.5, 0.6]))
        with pytest.raises(CalibrationError):
            load_grey_reference(tmp_path / "bad.json")

    def test_correction_round_trip(self, tmp_path):
        corr = fit_correction(grey_measurement([0.5 * v - 0.05 for v in REFERENCE.values]), REFERENCE)
        save_correction(corr, tmp_path / "calibration.json")
        assert load_correction(tmp_path / "calibration.json") == corr


class TestSessionCorrection:
    def test_stored_calibration_wins(self, tmp_path, reference):
        corr = RadiometricCorrection(session_id="A5/2022-08-02", gain=(2, 2, 2), offset=(0, 0, 0), residual_rms=0)
        save_correction(corr, tmp_path / "calibration.json")
        write_png(render_card(reference), tmp_path / "card.png")
        (tmp_path / "patches.json").write_text(json.dumps([r.model_dump() for r in card_layout()]))
        assert session_correction(tmp_path, "A5/2022-08-02", reference) == corr

    def test_fitted_from_card(self, tmp_path, reference):
        write_png(distort(render_card(reference), (0.9, 0.9, 0.9), (0.0, 0.0, 0.0)), tmp_path / "card.png")
        (tmp_path / "patches.json").write_text(json.dumps([r.model_dump() for r in card_layout()]))
        corr = session_correction(tmp_path, "A5/2022-08-02", reference)
        assert corr.session_id == "A5/2022-08-02"
        assert np.allclose(corr.gain, 1 / 0.9, atol=0.02)

    def test_nothing_to_fit(self, tmp_path, reference):
        assert session_correction(tmp_path, "A5/2022-08-02", reference) is None
