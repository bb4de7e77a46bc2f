"""Dataset records, COCO-like files on disk and scale-and-crop augmentation.

Directory layout::

    <root>/annotations.json
    <root>/images/<file_name>.png

``annotations.json`` holds ``categories`` (id, name, optional keypoint
names), ``images`` (id, file_name, width, height, split, captions as strings)
and ``annotations`` (id, image_id, category_id, bbox [x, y, w, h] in pixels,
then either ``mask`` {"rows": ["0110", ...]} covering the bbox pixels or
``segmentation`` polygons [[x1, y1, x2, y2, ...], ...] in image pixels, and
optional ``keypoints`` [x1, y1, v1, ...] in pixels with v = 2 visible).

"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw

from madseq.codec import Instance, SceneAnnotation

ANNOTATION_FILE = "annotations.json"
IMAGE_DIR = "images"


@dataclass
class DatasetRecord:
    """One image with its annotation.

    ``image`` is a (height, width, 3) uint8 array.

    """

    record_id: int
    image: np.ndarray
    annotation: SceneAnnotation
    split: str = "train"

    @property
    def file_name(self) -> str:
        """Return image file name."""
        return f"{self.record_id:06d}.png"


@dataclass
class LoadIssue:
    """Schema violation of one image or annotation entry."""

    record_id: str
    message: str

    def __str__(self) -> str:
        """Return 'record: message'."""
        return f"{self.record_id}: {self.message}"


class DatasetLoadError(ValueError):
    """Dataset file violates the schema."""

    def __init__(self, issues: Sequence[LoadIssue]):
        """Init method."""
        self.issues = list(issues)
        lines = "\n".join(f"  {issue}" for issue in self.issues[:20])
        more = len(self.issues) - 20
        if more > 0:
            lines += f"\n  ... {more} more"
        super().__init__(f"{len(self.issues)} dataset load errors:\n{lines}")


def _mask_rows(bitmask: np.ndarray) -> list[str]:
    return ["".join("1" if v else "0" for v in row) for row in np.asarray(bitmask)]


def _pixel_box(box, width: int, height: int) -> list[int]:
    x0 = int(round(box[0] * width))
    y0 = int(round(box[1] * height))
    x1 = int(round(box[2] * width))
    y1 = int(round(box[3] * height))
    return [x0, y0, max(x1 - x0, 1), max(y1 - y0, 1)]


def write_dataset(
    records: Sequence[DatasetRecord],
    path: Union[str, Path],
    categories: Sequence[str],
    keypoint_names: Optional[dict[int, Sequence[str]]] = None,
    log_level: int = 0,
) -> Path:
    """Write records as PNG images and one annotation file.

    The output depends only on the records, so a fixed seed gives
    byte-identical files.

    """
    root = Path(path)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    keypoint_names = keypoint_names or {}
    if log_level:
        t1 = time.time()
        print(f" writing {len(records)} images to {root} ...")

    cats = []
    for i, name in enumerate(categories):
        cat = {"id": i, "name": name}
        if i in keypoint_names:
            cat["keypoints"] = list(keypoint_names[i])
        cats.append(cat)
    images = []
    annotations = []
    for rec in records:
        height, width = rec.image.shape[:2]
        Image.fromarray(np.asarray(rec.image, dtype=np.uint8)).save(
            root / IMAGE_DIR / rec.file_name
        )
        images.append(
            {
                "id": rec.record_id,
                "file_name": rec.file_name,
                "width": width,
                "height": height,
                "split": rec.split,
                "captions": [" ".join(c) for c in rec.annotation.captions],
            }
        )
        for inst in rec.annotation.instances:
            entry = {
                "id": len(annotations),
                "image_id": rec.record_id,
                "category_id": int(inst.class_id),
                "bbox": _pixel_box(inst.box, width, height),
                "mask": {"rows": _mask_rows(inst.bitmask)},
            }
            if inst.keypoints is not None:
                kps = []
                for x, y, v in np.asarray(inst.keypoints, dtype="double"):
                    kps += [round(x * width, 3), round(y * height, 3), 2 if v else 0]
                entry["keypoints"] = kps
            annotations.append(entry)

    doc = {
        "version": 1,
        "categories": cats,
        "images": images,
        "annotations": annotations,
    }
    with open(root / ANNOTATION_FILE, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")
    if log_level:
        print("  - elapsed time =", time.time() - t1, "(s)")
    return root


class DatasetLoader:
    """Reader of the COCO-like dataset layout.

    Every schema violation becomes a LoadIssue naming the offending image or
    annotation. Without ``allow_partial`` any issue raises DatasetLoadError;
    with it, offending annotations and images are skipped.

    """

    def __init__(
        self,
        path: Union[str, Path],
        allow_partial: bool = False,
        split: Optional[str] = None,
        log_level: int = 0,
    ):
        """Init method.

        Parameters
        ----------
        path : str or Path
            Dataset directory or annotation file.
        allow_partial : bool, optional
            Skip bad entries instead of failing. Default is False.
        split : str, optional
            Keep only images of this split.
        log_level : int, optional
            Log level. Default is 0.

        """
        path = Path(path)
        self._annotation_file = path / ANNOTATION_FILE if path.is_dir() else path
        self._root = self._annotation_file.parent
        self._allow_partial = allow_partial
        self._split = split
        self._log_level = log_level
        self._issues: list[LoadIssue] = []
        self._records: list[DatasetRecord] = []
        self._categories: list[str] = []

        self._run()

    @property
    def records(self) -> list[DatasetRecord]:
        """Return loaded records."""
        return self._records

    @property
    def issues(self) -> list[LoadIssue]:
        """Return schema violations found while loading."""
        return self._issues

    @property
    def categories(self) -> list[str]:
        """Return category names by id."""
        return self._categories

    def _run(self):
        if self._log_level:
            t1 = time.time()
            print(f" reading {self._annotation_file} ...")
        text = self._annotation_file.read_text(encoding="utf-8")
        if text.strip():
            try:
                doc = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DatasetLoadError([LoadIssue("file", str(exc))]) from exc
            self._parse(doc)
        if self._issues and not self._allow_partial:
            raise DatasetLoadError(self._issues)
        if self._log_level:
            print(f"  - {len(self._records)} images, {len(self._issues)} issues")
            print("  - elapsed time =", time.time() - t1, "(s)")

    def _issue(self, record_id, message: str) -> None:
        self._issues.append(LoadIssue(str(record_id), message))

    def _parse(self, doc: dict) -> None:
        cats = {}
        for cat in doc.get("categories", []):
            cats[int(cat["id"])] = cat
        self._categories = [cats[k]["name"] for k in sorted(cats)]
        class_of = {cid: i for i, cid in enumerate(sorted(cats))}

        images = {}
        for entry in doc.get("images", []):
            rid = entry.get("id", "?")
            missing = [
                k for k in ("id", "file_name", "width", "height") if k not in entry
            ]
            if missing:
                self._issue(f"image {rid}", f"missing fields {missing}")
                continue
            if self._split is not None and entry.get("split", "train") != self._split:
                continue
            images[entry["id"]] = {"entry": entry, "instances": [], "bad": False}

        for ann in doc.get("annotations", []):
            aid = f"annotation {ann.get('id', '?')}"
            image = images.get(ann.get("image_id"))
            if image is None:
                if self._split is None:
                    self._issue(aid, f"unknown image_id {ann.get('image_id')}")
                continue
            try:
                inst = self._instance(ann, image["entry"], class_of)
            except (KeyError, TypeError, ValueError) as exc:
                self._issue(aid, str(exc))
                image["bad"] = True
                continue
            image["instances"].append(inst)

        for image_id, image in images.items():
            entry = image["entry"]
            if image["bad"] and not self._allow_partial:
                continue
            pixels = self._image(entry)
            if pixels is None:
                continue
            captions = [str(c).split() for c in entry.get("captions", [])]
            annotation = SceneAnnotation(
                image_size=(int(entry["width"]), int(entry["height"])),
                instances=image["instances"],
                captions=[c for c in captions if c],
            )
            self._records.append(
                DatasetRecord(
                    record_id=int(image_id),
                    image=pixels,
                    annotation=annotation,
                    split=entry.get("split", "train"),
                )
            )

    def _image(self, entry: dict) -> Optional[np.ndarray]:
        filename = self._root / IMAGE_DIR / entry["file_name"]
        if not filename.exists():
            self._issue(f"image {entry['id']}", f"file {filename} not found")
            return None
        pixels = np.asarray(Image.open(filename).convert("RGB"), dtype=np.uint8)
        if pixels.shape[:2] != (entry["height"], entry["width"]):
            self._issue(
                f"image {entry['id']}",
                f"size {pixels.shape[1]}x{pixels.shape[0]} differs from "
                f"{entry['width']}x{entry['height']}",
            )
            return None
        return pixels

    def _instance(self, ann: dict, image: dict, class_of: dict) -> Instance:
        width, height = int(image["width"]), int(image["height"])
        if ann["category_id"] not in class_of:
            raise ValueError(f"unknown category_id {ann['category_id']}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        if w <= 0 or h <= 0:
            raise ValueError(f"non-positive bbox size {ann['bbox']}")
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise ValueError(f"bbox {ann['bbox']} outside {width}x{height} image")
        box = (x / width, y / height, (x + w) / width, (y + h) / height)

        if "mask" in ann:
            rows = ann["mask"]["rows"]
            if not rows or any(len(r) != len(rows[0]) for r in rows):
                raise ValueError("mask rows are empty or ragged")
            if any(set(r) - {"0", "1"} for r in rows):
                raise ValueError("mask rows must contain only 0 and 1")
            bitmask = np.array([[c == "1" for c in r] for r in rows], dtype=bool)
        elif "segmentation" in ann:
            bitmask = rasterize_polygons(ann["segmentation"], (x, y, w, h))
        else:
            raise ValueError("annotation has neither mask nor segmentation")

        keypoints = None
        if "keypoints" in ann:
            values = np.asarray(ann["keypoints"], dtype="double")
            if len(values) % 3:
                raise ValueError("keypoints length is not a multiple of 3")
            keypoints = values.reshape(-1, 3)
            keypoints[:, 0] /= width
            keypoints[:, 1] /= height
            keypoints[:, 2] = (keypoints[:, 2] >= 2).astype("double")
            visible = keypoints[:, 2] > 0
            if np.any((keypoints[visible, :2] < 0) | (keypoints[visible, :2] > 1)):
                raise ValueError("visible keypoint outside image")
        return Instance(
            box=box,
            class_id=class_of[ann["category_id"]],
            bitmask=bitmask,
            keypoints=keypoints,
        )


def rasterize_polygons(polygons, bbox) -> np.ndarray:
    """Return bitmask over the bbox pixels of polygons given in image pixels."""
    x, y, w, h = bbox
    cols, rows = max(int(round(w)), 1), max(int(round(h)), 1)
    canvas = Image.new("L", (cols, rows), 0)
    draw = ImageDraw.Draw(canvas)
    for poly in polygons:
        pts = np.asarray(poly, dtype="double").reshape(-1, 2)
        if len(pts) < 3:
            raise ValueError("polygon with fewer than 3 points")
        draw.polygon([(px - x, py - y) for px, py in pts], fill=1)
    return np.asarray(canvas, dtype=np.uint8) > 0


def load_dataset(
    path: Union[str, Path],
    allow_partial: bool = False,
    split: Optional[str] = None,
    log_level: int = 0,
) -> list[DatasetRecord]:
    """Return records of a dataset directory."""
    return DatasetLoader(
        path, allow_partial=allow_partial, split=split, log_level=log_level
    ).records


def scale_and_crop(
    record: DatasetRecord,
    rng: np.random.Generator,
    min_scale: float = 0.6,
    max_scale: float = 1.4,
    fill: Sequence[int] = (0, 0, 0),
) -> DatasetRecord:
    """Return a rescaled record of the same image size.

    A scale below 1 shrinks the image onto a canvas filled with ``fill`` at
    a random offset. A scale above 1 enlarges it and crops a window that
    contains every instance box; when no such window exists the record is
    returned unchanged. Boxes and keypoints follow the same affine map, box
    bitmasks are kept as they are.

    """
    height, width = record.image.shape[:2]
    scale = float(rng.uniform(min_scale, max_scale))
    new_w = max(int(round(width * scale)), 1)
    new_h = max(int(round(height * scale)), 1)
    resized = Image.fromarray(np.asarray(record.image, dtype=np.uint8)).resize(
        (new_w, new_h), Image.BILINEAR
    )
    instances = record.annotation.instances

    if new_w <= width and new_h <= height:
        ox = int(rng.integers(0, width - new_w + 1))
        oy = int(rng.integers(0, height - new_h + 1))
        canvas = Image.new("RGB", (width, height), tuple(int(c) for c in fill))
        canvas.paste(resized, (ox, oy))
        shift_x, shift_y = ox, oy
    else:
        if instances:
            boxes = np.array([inst.box for inst in instances], dtype="double")
            ux0 = boxes[:, 0].min() * new_w
            uy0 = boxes[:, 1].min() * new_h
            ux1 = boxes[:, 2].max() * new_w
            uy1 = boxes[:, 3].max() * new_h
        else:
            ux0, uy0, ux1, uy1 = 0.0, 0.0, 0.0, 0.0
        lo_x, hi_x = max(int(np.ceil(ux1)) - width, 0), min(int(ux0), new_w - width)
        lo_y, hi_y = max(int(np.ceil(uy1)) - height, 0), min(int(uy0), new_h - height)
        if lo_x > hi_x or lo_y > hi_y:
            return record
        cx = int(rng.integers(lo_x, hi_x + 1))
        cy = int(rng.integers(lo_y, hi_y + 1))
        canvas = resized.crop((cx, cy, cx + width, cy + height))
        shift_x, shift_y = -cx, -cy

    def map_x(v):
        return np.clip((np.asarray(v) * new_w + shift_x) / width, 0.0, 1.0)

    def map_y(v):
        return np.clip((np.asarray(v) * new_h + shift_y) / height, 0.0, 1.0)

    moved = []
    for inst in instances:
        x0, y0, x1, y1 = inst.box
        box = (
            float(map_x(x0)),
            float(map_y(y0)),
            float(map_x(x1)),
            float(map_y(y1)),
        )
        keypoints = None
        if inst.keypoints is not None:
            keypoints = np.array(inst.keypoints, dtype="double")
            keypoints[:, 0] = map_x(keypoints[:, 0])
            keypoints[:, 1] = map_y(keypoints[:, 1])
        moved.append(
            Instance(
                box=box,
                class_id=inst.class_id,
                bitmask=inst.bitmask,
                keypoints=keypoints,
            )
        )
    annotation = SceneAnnotation(
        image_size=(width, height),
        instances=moved,
        captions=[list(c) for c in record.annotation.captions],
    )
    return DatasetRecord(
        record_id=record.record_id,
        image=np.asarray(canvas, dtype=np.uint8),
        annotation=annotation,
        split=record.split,
    )


def records_of_split(records: Sequence[DatasetRecord], split: str) -> list:
    """Return records tagged with a split."""
    return [r for r in records if r.split == split]


@dataclass
class DatasetSummary:
    """Instance and caption counts of a record list."""

    num_images: int = 0
    num_instances: int = 0
    num_keypoint_instances: int = 0
    num_captioned: int = 0
    per_class: dict[int, int] = field(default_factory=dict)


def summarize(records: Sequence[DatasetRecord]) -> DatasetSummary:
    """Return counts of a record list."""
    summary = DatasetSummary(num_images=len(records))
    for rec in records:
        for inst in rec.annotation.instances:
            summary.num_instances += 1
            summary.per_class[inst.class_id] = (
                summary.per_class.get(inst.class_id, 0) + 1
            )
            if inst.keypoints is not None:
                summary.num_keypoint_instances += 1
        if rec.annotation.captions:
            summary.num_captioned += 1
    return summary
