import numpy as np
import pytest

from app.calibration import load_grey_reference
from app.config import DATA_DIR
from app.models import Image, PseudoMask
from app.schemas import PixelScorer, PointAnnotation, SegParams
from app.segmentation import build_pseudo_mask, train_scorer
from app.synth import default_palette
from tests.helpers import paint_disks


@pytest.fixture
def reference():
    return load_grey_reference(f"{DATA_DIR}/grey_reference.json")


@pytest.fixture
def palette():
    return default_palette()


@pytest.fixture
def params():
    return SegParams()


@pytest.fixture(scope="session")
def separable_corpus() -> list[tuple[Image, PseudoMask]]:
    """Red disks on a noisy green ground; disk radius equals r_fg + r_ig so no red pixel is Background."""
    rng = np.random.default_rng(7)
    corpus = []
    for _ in range(3):
        centers = sorted({(int(x), int(y)) for x, y in rng.integers(8, 72, size=(6, 2))})
        image = paint_disks(80, 80, centers, radius=5)
        noisy = np.clip(image.pixels + rng.uniform(-0.03, 0.03, size=image.pixels.shape), 0.0, 1.0)
        image = image.with_pixels(noisy)
        points = PointAnnotation(image_id="", points=[(float(x), float(y)) for x, y in centers])
        corpus.append((image, build_pseudo_mask(points, (80, 80), r_fg=3, r_ig=2)))
    return corpus


@pytest.fixture(scope="session")
def trained_scorer(separable_corpus) -> PixelScorer:
    return train_scorer(separable_corpus, epochs=300, lr=0.5, seed=0)
