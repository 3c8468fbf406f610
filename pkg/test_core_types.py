import json
import math
from dataclasses import replace

import pytest

from core_types import (
    BoundingBox,
    DatasetInvariantError,
    DatasetParseError,
    DatasetSchemaError,
    InvalidBoxError,
    dataset_from_dict,
    dataset_to_dict,
    load_dataset,
    save_dataset,
)


def test_box_rejects_degenerate_and_non_finite():
    """Boxes need finite, strictly ordered corners"""
    with pytest.raises(InvalidBoxError):
        BoundingBox(10.0, 10.0, 10.0, 20.0)
    with pytest.raises(InvalidBoxError):
        BoundingBox(10.0, 30.0, 20.0, 20.0)
    with pytest.raises(InvalidBoxError):
        BoundingBox(0.0, 0.0, math.inf, 1.0)
    with pytest.raises(InvalidBoxError):
        BoundingBox(math.nan, 0.0, 1.0, 1.0)


def test_box_properties():
    box = BoundingBox.from_xywh(10, 20, 30, 40)
    assert box.as_tuple() == (10.0, 20.0, 40.0, 60.0)
    assert box.width == 30.0 and box.height == 40.0
    assert box.area == 1200.0
    assert box.center == (25.0, 40.0)
    assert box.half_perimeter == 70.0
    assert box.to_xywh() == [10.0, 20.0, 30.0, 40.0]


def test_clamp_to_image():
    box = BoundingBox(-5.0, 10.0, 120.0, 50.0)
    assert box.clamp(100.0, 100.0).as_tuple() == (0.0, 10.0, 100.0, 50.0)


def test_sample_file_loads(sample_clean_data):
    """The bundled sample is a valid clean dataset"""
    ds = dataset_from_dict(sample_clean_data)
    assert ds.n_classes == 3
    assert ds.object_count() == 8
    assert ds.category_ids == (1, 2, 3)
    assert ds.object_map()[2].label == 1
    assert ds.noise_meta == {"seed": None, "corruptions": [], "timestamp": None}


def test_round_trip_is_exact(tmp_path, small_dataset):
    """save/load reproduces every coordinate bit for bit"""
    odd = small_dataset.map_objects(
        lambda o: replace(
            o, box=BoundingBox(o.box.x1 + 0.1, o.box.y1 + 0.2, o.box.x2 + 0.3, o.box.y2 + 0.7)
        )
    )
    path = tmp_path / "ds.json"
    save_dataset(odd, path)
    loaded = load_dataset(path)
    assert loaded == odd

    path2 = tmp_path / "ds2.json"
    save_dataset(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_object_order_is_preserved(small_dataset):
    assert [o.object_id for o in small_dataset.objects()] == [1, 2, 3, 4]
    data = dataset_to_dict(small_dataset)
    assert [a["id"] for a in data["annotations"]] == [1, 2, 3, 4]


def test_duplicate_object_id_rejected(sample_clean_data):
    sample_clean_data["annotations"][1]["id"] = 1
    with pytest.raises(DatasetInvariantError) as err:
        dataset_from_dict(sample_clean_data)
    assert err.value.object_id == 1


def test_unknown_category_rejected(sample_clean_data):
    sample_clean_data["annotations"][0]["category_id"] = 99
    with pytest.raises(DatasetInvariantError):
        dataset_from_dict(sample_clean_data)


def test_unknown_image_rejected(sample_clean_data):
    sample_clean_data["annotations"][0]["image_id"] = 42
    with pytest.raises(DatasetInvariantError):
        dataset_from_dict(sample_clean_data)


def test_zero_area_box_rejected(sample_clean_data):
    sample_clean_data["annotations"][0]["bbox"] = [10.0, 10.0, 0.0, 5.0]
    with pytest.raises(DatasetInvariantError) as err:
        dataset_from_dict(sample_clean_data)
    assert err.value.object_id == 1


def test_box_outside_image_rejected(sample_clean_data):
    sample_clean_data["images"][0].update(width=100, height=100)
    sample_clean_data["annotations"] = [
        {"id": 1, "image_id": 1, "category_id": 1, "bbox": [200.0, 200.0, 50.0, 50.0]}
    ]
    with pytest.raises(DatasetInvariantError) as err:
        dataset_from_dict(sample_clean_data)
    assert err.value.object_id == 1
    assert "outside image 1" in str(err.value)


def test_box_touching_image_border_accepted(sample_clean_data):
    sample_clean_data["annotations"][0]["bbox"] = [0.0, 0.0, 640.0, 480.0]
    box = dataset_from_dict(sample_clean_data).object_map()[1].box
    assert box.as_tuple() == (0.0, 0.0, 640.0, 480.0)


@pytest.mark.parametrize(
    "section, index, key, value",
    [
        ("images", 0, "width", "100"),
        ("images", 0, "height", True),
        ("annotations", 0, "noise_flags", ["refined"]),
    ],
)
def test_wrongly_typed_fields_are_schema_errors(sample_clean_data, section, index, key, value):
    sample_clean_data[section][index][key] = value
    with pytest.raises(DatasetSchemaError):
        dataset_from_dict(sample_clean_data)


@pytest.mark.parametrize("section", ["categories", "images", "annotations"])
def test_sections_must_be_lists(sample_clean_data, section):
    sample_clean_data[section] = 3
    with pytest.raises(DatasetSchemaError) as err:
        dataset_from_dict(sample_clean_data)
    assert section in str(err.value)


def test_duplicate_image_ids_rejected(sample_clean_data):
    sample_clean_data["images"][1]["id"] = 1
    with pytest.raises(DatasetInvariantError) as err:
        dataset_from_dict(sample_clean_data)
    assert "Duplicate image id 1" in str(err.value)


def test_duplicate_image_ids_rejected_in_memory(small_dataset):
    twin = replace(small_dataset.images[1], image_id=1, objects=())
    with pytest.raises(DatasetInvariantError):
        replace(small_dataset, images=(small_dataset.images[0], twin))


def test_missing_field_is_schema_error(sample_clean_data):
    del sample_clean_data["annotations"][0]["image_id"]
    with pytest.raises(DatasetSchemaError):
        dataset_from_dict(sample_clean_data)


def test_malformed_json_is_parse_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(DatasetParseError):
        load_dataset(path)


def test_unknown_flags_are_ignored(sample_clean_data):
    sample_clean_data["annotations"][0]["noise_flags"] = {"refined": True, "legacy": True}
    ds = dataset_from_dict(sample_clean_data)
    assert ds.object_map()[1].flags.refined


def test_with_corruption_does_not_mutate_source(small_dataset):
    noisy = small_dataset.with_corruption({"target": "label"}, seed=3)
    assert noisy.noise_meta["seed"] == 3
    assert noisy.noise_meta["corruptions"] == [{"target": "label"}]
    assert small_dataset.noise_meta["corruptions"] == []


def test_map_objects_can_drop(small_dataset):
    kept = small_dataset.map_objects(lambda o: None if o.object_id % 2 else o)
    assert [o.object_id for o in kept.objects()] == [2, 4]
    assert len(kept.images) == 2


def test_saved_file_is_coco_shaped(dataset_file):
    data = json.loads(dataset_file.read_text())
    ann = data["annotations"][0]
    assert ann["bbox"] == [10.0, 10.0, 30.0, 40.0]
    assert ann["category_id"] == 1
    assert set(data) == {"categories", "images", "annotations", "noise_meta"}
