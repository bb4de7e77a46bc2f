"""Tests of dataset files, loading and augmentation."""
import json

import numpy as np
import pytest
from PIL import Image

from madseq.dataset import (
    ANNOTATION_FILE,
    IMAGE_DIR,
    DatasetLoader,
    DatasetLoadError,
    load_dataset,
    rasterize_polygons,
    records_of_split,
    scale_and_crop,
    summarize,
    write_dataset,
)
from madseq.shapes_world import (
    KEYPOINT_NAMES,
    PERSON_CLASS,
    SHAPE_CLASSES,
    generate_dataset,
)


def _write_doc(root, images, annotations, categories=None):
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    for entry in images:
        Image.new("RGB", (entry["width"], entry["height"])).save(
            root / IMAGE_DIR / entry["file_name"]
        )
    doc = {
        "categories": categories or [{"id": 0, "name": "thing"}],
        "images": images,
        "annotations": annotations,
    }
    (root / ANNOTATION_FILE).write_text(json.dumps(doc))


def _image_entry(image_id=1, width=100, height=200, **kwargs):
    entry = {
        "id": image_id,
        "file_name": f"{image_id}.png",
        "width": width,
        "height": height,
    }
    entry.update(kwargs)
    return entry


def _ann(ann_id=1, image_id=1, bbox=(10, 20, 30, 40), **kwargs):
    entry = {
        "id": ann_id,
        "image_id": image_id,
        "category_id": 0,
        "bbox": list(bbox),
        "mask": {"rows": ["11", "01"]},
    }
    entry.update(kwargs)
    return entry


def test_box_normalization(tmp_path):
    """Test pixel boxes become normalized corners."""
    _write_doc(tmp_path, [_image_entry(captions=["a thing"])], [_ann()])
    (record,) = load_dataset(tmp_path)
    (inst,) = record.annotation.instances
    np.testing.assert_allclose(inst.box, (0.1, 0.1, 0.4, 0.3))
    np.testing.assert_array_equal(inst.bitmask, [[True, True], [False, True]])
    assert record.annotation.captions == [["a", "thing"]]
    assert record.image.shape == (200, 100, 3)
    assert record.annotation.image_size == (100, 200)


def test_empty_annotation_file(tmp_path):
    """Test an empty file gives no records."""
    (tmp_path / ANNOTATION_FILE).write_text("")
    assert load_dataset(tmp_path) == []


def test_invalid_json(tmp_path):
    """Test unreadable JSON is a load error."""
    (tmp_path / ANNOTATION_FILE).write_text("{")
    with pytest.raises(DatasetLoadError):
        load_dataset(tmp_path)


def test_issues_name_offending_entries(tmp_path):
    """Test every bad entry is reported and partial loading skips them."""
    annotations = [
        _ann(1),
        _ann(2, bbox=(90, 20, 30, 40)),
        _ann(3, category_id=7),
        _ann(4, image_id=99),
        _ann(5, keypoints=[1, 2]),
    ]
    _write_doc(tmp_path, [_image_entry()], annotations)
    with pytest.raises(DatasetLoadError) as excinfo:
        load_dataset(tmp_path)
    names = sorted(issue.record_id for issue in excinfo.value.issues)
    assert names == [
        "annotation 2",
        "annotation 3",
        "annotation 4",
        "annotation 5",
    ]
    loader = DatasetLoader(tmp_path, allow_partial=True)
    assert len(loader.issues) == 4
    (record,) = loader.records
    assert len(record.annotation.instances) == 1


def test_missing_image_file(tmp_path):
    """Test a missing image file is reported."""
    _write_doc(tmp_path, [_image_entry()], [])
    (tmp_path / IMAGE_DIR / "1.png").unlink()
    with pytest.raises(DatasetLoadError):
        load_dataset(tmp_path)
    assert DatasetLoader(tmp_path, allow_partial=True).records == []


def test_polygon_segmentation(tmp_path):
    """Test polygons are rasterized over the box."""
    mask = rasterize_polygons([[0, 0, 10, 0, 10, 10, 0, 10]], (0, 0, 10, 10))
    assert mask.shape == (10, 10)
    assert mask.all()
    with pytest.raises(ValueError):
        rasterize_polygons([[0, 0, 1, 1]], (0, 0, 4, 4))
    ann = _ann(bbox=(0, 0, 20, 20), segmentation=[[0, 0, 20, 0, 0, 20]])
    del ann["mask"]
    _write_doc(tmp_path, [_image_entry()], [ann])
    (record,) = load_dataset(tmp_path)
    bitmask = record.annotation.instances[0].bitmask
    assert bitmask.shape == (20, 20)
    assert bitmask[1, 1] and not bitmask[18, 18]


def test_keypoint_visibility(tmp_path):
    """Test only COCO visibility 2 counts as visible."""
    ann = _ann(keypoints=[15, 30, 2, 20, 40, 1, 0, 0, 0])
    _write_doc(tmp_path, [_image_entry()], [ann])
    (record,) = load_dataset(tmp_path)
    kps = record.annotation.instances[0].keypoints
    np.testing.assert_allclose(kps[0], (0.15, 0.15, 1.0))
    assert list(kps[:, 2]) == [1.0, 0.0, 0.0]


def test_write_then_load_generated(world_cfg, tmp_path):
    """Test generated records come back with the same annotations."""
    records = generate_dataset(world_cfg)
    write_dataset(
        records,
        tmp_path,
        categories=SHAPE_CLASSES,
        keypoint_names={PERSON_CLASS: KEYPOINT_NAMES},
    )
    loaded = load_dataset(tmp_path)
    assert len(loaded) == len(records)
    for a, b in zip(records, loaded):
        assert a.split == b.split
        np.testing.assert_array_equal(a.image, b.image)
        assert a.annotation.captions == b.annotation.captions
        assert len(a.annotation.instances) == len(b.annotation.instances)
        for ia, ib in zip(a.annotation.instances, b.annotation.instances):
            assert ia.class_id == ib.class_id
            np.testing.assert_allclose(ia.box, ib.box, atol=1e-9)
            np.testing.assert_array_equal(ia.bitmask, ib.bitmask)
            if ia.keypoints is not None:
                np.testing.assert_allclose(ia.keypoints, ib.keypoints, atol=1e-3)
    val = load_dataset(tmp_path, split="val")
    assert len(val) == world_cfg.num_val
    assert len(records_of_split(records, "train")) == world_cfg.num_train
    doc = json.loads((tmp_path / ANNOTATION_FILE).read_text())
    assert doc["categories"][PERSON_CLASS]["keypoints"] == list(KEYPOINT_NAMES)


def test_write_is_deterministic(world_cfg, tmp_path):
    """Test a fixed seed gives byte-identical files."""
    for name in ("a", "b"):
        write_dataset(generate_dataset(world_cfg), tmp_path / name, SHAPE_CLASSES)
    assert (tmp_path / "a" / ANNOTATION_FILE).read_bytes() == (
        tmp_path / "b" / ANNOTATION_FILE
    ).read_bytes()
    for f in (tmp_path / "a" / IMAGE_DIR).iterdir():
        assert f.read_bytes() == (tmp_path / "b" / IMAGE_DIR / f.name).read_bytes()


def test_scale_and_crop(scene):
    """Test augmented records keep image size and valid annotations."""
    rng = np.random.default_rng(0)
    for _ in range(20):
        out = scale_and_crop(scene, rng)
        assert out.image.shape == scene.image.shape
        assert len(out.annotation.instances) == len(scene.annotation.instances)
        for inst in out.annotation.instances:
            x0, y0, x1, y1 = inst.box
            assert 0 <= x0 <= x1 <= 1 and 0 <= y0 <= y1 <= 1
        assert out.annotation.captions == scene.annotation.captions


def test_scale_and_crop_keeps_width_height(tmp_path):
    """Test augmented annotations of a tall image report (width, height)."""
    _write_doc(tmp_path, [_image_entry()], [_ann()])
    (record,) = load_dataset(tmp_path)
    rng = np.random.default_rng(0)
    for _ in range(5):
        out = scale_and_crop(record, rng)
        assert out.image.shape == (200, 100, 3)
        assert out.annotation.image_size == (100, 200)


def test_scale_and_crop_identity(scene):
    """Test unit scale keeps boxes."""
    out = scale_and_crop(scene, np.random.default_rng(0), 1.0, 1.0)
    for a, b in zip(scene.annotation.instances, out.annotation.instances):
        np.testing.assert_allclose(a.box, b.box, atol=1e-12)
    np.testing.assert_array_equal(out.image, scene.image)


def test_summarize(world_cfg):
    """Test counts of generated records."""
    records = generate_dataset(world_cfg)
    summary = summarize(records)
    assert summary.num_images == len(records)
    assert summary.num_instances == sum(summary.per_class.values())
    assert summary.num_captioned == len(records)
