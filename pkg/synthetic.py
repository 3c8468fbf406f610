"""Seeded generator of clean synthetic detection datasets."""

import logging

from core_types import AnnotatedObject, BoundingBox, Dataset, ImageRecord
from utils import derive_rng

logger = logging.getLogger(__name__)

SYNTHETIC_STREAM = 20


def make_synthetic_dataset(
    n_images: int,
    objects_per_image: int,
    n_classes: int,
    image_size: tuple[float, float] = (640.0, 480.0),
    seed: int = 0,
    min_box: float = 0.1,
    max_box: float = 0.4,
) -> Dataset:
    """Clean dataset with uniform labels and boxes strictly inside the image.

    Box sides are drawn as fractions of the image side in [min_box, max_box].
    Object ids run 1..N in image order, image ids 1..M.
    """
    if n_images < 1 or objects_per_image < 1:
        raise ValueError("Need at least one image and one object per image")
    if n_classes < 2:
        raise ValueError(f"Need at least 2 classes, got {n_classes}")
    if not (0.0 < min_box <= max_box < 1.0):
        raise ValueError("Box fractions must satisfy 0 < min_box <= max_box < 1")

    width, height = float(image_size[0]), float(image_size[1])
    if min(width, height) * (1.0 - max_box) <= 2.0:
        raise ValueError(
            f"Image size {width} x {height} leaves no room for a one-pixel margin "
            f"around boxes up to {max_box} of a side"
        )
    images = []
    object_id = 1
    for image_id in range(1, n_images + 1):
        rng = derive_rng(seed, SYNTHETIC_STREAM, image_id)
        objects = []
        for _ in range(objects_per_image):
            bw = float(rng.uniform(min_box, max_box)) * width
            bh = float(rng.uniform(min_box, max_box)) * height
            # leave a margin so perturbed boxes are not all pinned to the border
            x1 = float(rng.uniform(1.0, width - bw - 1.0))
            y1 = float(rng.uniform(1.0, height - bh - 1.0))
            objects.append(
                AnnotatedObject(
                    object_id=object_id,
                    image_id=image_id,
                    box=BoundingBox(x1, y1, x1 + bw, y1 + bh),
                    label=int(rng.integers(n_classes)),
                )
            )
            object_id += 1
        images.append(ImageRecord(image_id, width, height, tuple(objects)))

    class_names = tuple(f"class_{i}" for i in range(n_classes))
    logger.info(
        f"Synthesized {object_id - 1} objects over {n_images} images, {n_classes} classes"
    )
    return Dataset(class_names, tuple(images))
