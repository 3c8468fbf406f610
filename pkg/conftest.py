import json
from pathlib import Path

import pytest

from core_types import AnnotatedObject, BoundingBox, Dataset, ImageRecord, save_dataset
from synthetic import make_synthetic_dataset

SAMPLE_CLEAN = Path(__file__).parent / "sample_clean.json"


@pytest.fixture
def small_dataset():
    """Two images, three classes, four objects."""
    img1 = ImageRecord(
        1,
        100.0,
        100.0,
        (
            AnnotatedObject(1, 1, BoundingBox(10.0, 10.0, 40.0, 50.0), 0),
            AnnotatedObject(2, 1, BoundingBox(50.0, 20.0, 90.0, 80.0), 1),
        ),
    )
    img2 = ImageRecord(
        2,
        200.0,
        120.0,
        (
            AnnotatedObject(3, 2, BoundingBox(5.0, 5.0, 60.0, 60.0), 2),
            AnnotatedObject(4, 2, BoundingBox(100.0, 30.0, 180.0, 110.0), 0),
        ),
    )
    return Dataset(("cat", "dog", "bird"), (img1, img2))


@pytest.fixture(scope="session")
def synthetic_1000():
    """1,000 clean objects: 100 images x 10 objects, 20 classes."""
    return make_synthetic_dataset(100, 10, 20, seed=2024)


@pytest.fixture
def dataset_file(tmp_path, small_dataset):
    path = tmp_path / "clean.json"
    save_dataset(small_dataset, path)
    return path


@pytest.fixture
def sample_clean_data():
    with open(SAMPLE_CLEAN) as f:
        return json.load(f)
