"""Synthetic scenes of colored shapes with boxes, masks, keypoints and captions."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from madseq.codec import Instance, SceneAnnotation
from madseq.dataset import DatasetRecord

SHAPE_CLASSES = ("circle", "square", "triangle", "bar", "stickman")
PERSON_CLASS = SHAPE_CLASSES.index("stickman")
KEYPOINT_NAMES = ("head", "left_hand", "right_hand", "left_foot", "right_foot")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 80, 230),
    "yellow": (235, 215, 40),
    "purple": (150, 60, 200),
    "white": (240, 240, 240),
}
RELATIONS = {"left": "right", "right": "left", "above": "below", "below": "above"}
BACKGROUND = (24, 24, 24)


@dataclass(frozen=True)
class ShapesWorldConfig:
    """Scene generator settings.

    Parameters
    ----------
    image_size : int
        Side of the square images in pixels.
    min_shapes, max_shapes : int
        Range of the number of shapes per image.
    min_shape_frac, max_shape_frac : float
        Range of the shape size as a fraction of image_size.
    limb_dropout : float
        Probability that a stickman limb is left out (its keypoint invisible).
    num_train, num_val : int
        Dataset sizes written by gen-data.
    data_seed : int
        Seed of the scene generator.

    """

    image_size: int = 256
    min_shapes: int = 1
    max_shapes: int = 8
    min_shape_frac: float = 0.12
    max_shape_frac: float = 0.3
    limb_dropout: float = 0.2
    num_train: int = 2000
    num_val: int = 200
    data_seed: int = 0

    def __post_init__(self):
        """Validate settings."""
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}.")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError("Need 1 <= min_shapes <= max_shapes.")
        if not 0 < self.min_shape_frac <= self.max_shape_frac < 1:
            raise ValueError("Need 0 < min_shape_frac <= max_shape_frac < 1.")
        if not 0 <= self.limb_dropout < 1:
            raise ValueError("limb_dropout must be in [0, 1).")

    def to_dict(self) -> dict:
        """Return plain dict."""
        return asdict(self)


def caption_words() -> tuple[str, ...]:
    """Return every word the caption grammar can produce, sorted."""
    words = {"a", "of"} | set(RELATIONS) | set(COLORS) | set(SHAPE_CLASSES)
    return tuple(sorted(words))


def _stickman(draw: ImageDraw.ImageDraw, box, color, visible: np.ndarray):
    """Draw a stickman in a pixel box and return its (5, 2) keypoints."""
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    cx = x0 + w / 2
    r = min(w, h) * 0.16
    head = (cx, y0 + r)
    neck = (cx, y0 + 2 * r)
    hip = (cx, y0 + h * 0.62)
    shoulder = (cx, y0 + 2 * r + h * 0.08)
    hands = [(x0 + 0.5, y0 + h * 0.45), (x1 - 1.5, y0 + h * 0.45)]
    feet = [(x0 + w * 0.15, y1 - 1.5), (x1 - w * 0.15 - 1, y1 - 1.5)]
    width = max(2, int(min(w, h) / 12))
    draw.ellipse((cx - r, y0, cx + r, y0 + 2 * r), fill=color)
    draw.line([neck, hip], fill=color, width=width)
    for i, hand in enumerate(hands):
        if visible[1 + i]:
            draw.line([shoulder, hand], fill=color, width=width)
    for i, foot in enumerate(feet):
        if visible[3 + i]:
            draw.line([hip, foot], fill=color, width=width)
    return np.array([head] + hands + feet, dtype="double")


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, box, color) -> None:
    x0, y0, x1, y1 = box
    if shape == "circle":
        draw.ellipse((x0, y0, x1 - 1, y1 - 1), fill=color)
    elif shape in ("square", "bar"):
        draw.rectangle((x0, y0, x1 - 1, y1 - 1), fill=color)
    elif shape == "triangle":
        apex = ((x0 + x1 - 1) / 2, y0)
        draw.polygon([apex, (x0, y1 - 1), (x1 - 1, y1 - 1)], fill=color)
    else:
        raise ValueError(f"Unknown shape '{shape}'.")


def _shape_extent(shape: str, size: int, rng: np.random.Generator) -> tuple[int, int]:
    if shape == "bar":
        long_side, short_side = size, max(size // 4, 3)
        if rng.random() < 0.5:
            return long_side, short_side
        return short_side, long_side
    if shape == "stickman":
        return max(int(size * 0.6), 8), size
    return size, size


def _relation(a: np.ndarray, b: np.ndarray) -> str:
    """Return relation word of box a with respect to box b."""
    ca = (a[:2] + a[2:]) / 2
    cb = (b[:2] + b[2:]) / 2
    dx, dy = ca - cb
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "above" if dy < 0 else "below"


def _phrase(color: str, shape: str) -> list[str]:
    return ["a", color, shape]


def _relation_words(rel: str) -> list[str]:
    return [rel, "of"] if rel in ("left", "right") else [rel]


def make_captions(objects: list[tuple[str, str, np.ndarray]], rng) -> list[list[str]]:
    """Return reference captions of (color, shape, box) objects.

    Two objects give "a <color> <shape> <relation> a <color> <shape>" and its
    inverse; a single object gives "a <color> <shape>".

    """
    if not objects:
        return []
    if len(objects) == 1:
        color, shape, _ = objects[0]
        return [_phrase(color, shape)]
    i, j = rng.choice(len(objects), 2, replace=False)
    ci, si, bi = objects[i]
    cj, sj, bj = objects[j]
    rel = _relation(bi, bj)
    forward = _phrase(ci, si) + _relation_words(rel) + _phrase(cj, sj)
    inverse = _phrase(cj, sj) + _relation_words(RELATIONS[rel]) + _phrase(ci, si)
    return [forward, inverse]


def generate_scene(
    cfg: ShapesWorldConfig,
    rng: np.random.Generator,
    record_id: int = 0,
    split: str = "train",
    num_shapes: Optional[int] = None,
) -> DatasetRecord:
    """Render one scene of non-overlapping shapes.

    Shape boxes are placed by rejection sampling so that they neither overlap
    nor leave the image. Every annotation box is the tight box of the drawn
    pixels and the bitmask covers exactly that box. Stickman limbs that are
    left out are not drawn and their keypoints are invisible.

    """
    side = cfg.image_size
    n_shapes = (
        int(rng.integers(cfg.min_shapes, cfg.max_shapes + 1))
        if num_shapes is None
        else num_shapes
    )
    image = Image.new("RGB", (side, side), BACKGROUND)
    draw = ImageDraw.Draw(image)
    placed: list[tuple[int, int, int, int]] = []
    instances = []
    objects = []
    color_names = list(COLORS)
    lo = max(int(cfg.min_shape_frac * side), 6)
    hi = max(int(cfg.max_shape_frac * side), lo)
    for _ in range(n_shapes):
        class_id = int(rng.integers(len(SHAPE_CLASSES)))
        shape = SHAPE_CLASSES[class_id]
        color = color_names[int(rng.integers(len(color_names)))]
        box = None
        for _ in range(100):
            w, h = _shape_extent(shape, int(rng.integers(lo, hi + 1)), rng)
            x0 = int(rng.integers(0, side - w + 1))
            y0 = int(rng.integers(0, side - h + 1))
            cand = (x0, y0, x0 + w, y0 + h)
            if all(
                cand[2] + 1 < p[0]
                or p[2] + 1 < cand[0]
                or cand[3] + 1 < p[1]
                or p[3] + 1 < cand[1]
                for p in placed
            ):
                box = cand
                break
        if box is None:
            break
        placed.append(box)

        mask_img = Image.new("L", (side, side), 0)
        mask_draw = ImageDraw.Draw(mask_img)
        keypoints = None
        if shape == "stickman":
            visible = np.ones(len(KEYPOINT_NAMES), dtype=bool)
            visible[1:] = rng.random(len(KEYPOINT_NAMES) - 1) >= cfg.limb_dropout
            points = _stickman(draw, box, COLORS[color], visible)
            _stickman(mask_draw, box, 255, visible)
            keypoints = np.zeros((len(KEYPOINT_NAMES), 3), dtype="double")
            keypoints[:, :2] = (points + 0.5) / side
            keypoints[:, 2] = visible
        else:
            _draw_shape(draw, shape, box, COLORS[color])
            _draw_shape(mask_draw, shape, box, 255)

        mask = np.asarray(mask_img) > 0
        ys, xs = np.nonzero(mask)
        px0, py0, px1, py1 = xs.min(), ys.min(), xs.max() + 1, ys.max() + 1
        if keypoints is not None:
            keypoints[:, 0] = np.where(
                keypoints[:, 2] > 0,
                np.clip(keypoints[:, 0], px0 / side, px1 / side),
                0.0,
            )
            keypoints[:, 1] = np.where(
                keypoints[:, 2] > 0,
                np.clip(keypoints[:, 1], py0 / side, py1 / side),
                0.0,
            )
        tight = np.array([px0, py0, px1, py1], dtype="double") / side
        instances.append(
            Instance(
                box=tuple(float(v) for v in tight),
                class_id=class_id,
                bitmask=mask[py0:py1, px0:px1].copy(),
                keypoints=keypoints,
            )
        )
        objects.append((color, shape, tight))

    annotation = SceneAnnotation(
        image_size=(side, side),
        instances=instances,
        captions=make_captions(objects, rng),
    )
    return DatasetRecord(
        record_id=record_id,
        image=np.asarray(image, dtype=np.uint8).copy(),
        annotation=annotation,
        split=split,
    )


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Return the generator of the index-th scene of a seeded dataset."""
    return np.random.default_rng([int(seed), int(index)])


def generate_dataset(
    cfg: ShapesWorldConfig, log_level: int = 0
) -> list[DatasetRecord]:
    """Return num_train training records followed by num_val validation records.

    Scene i only depends on (data_seed, i).

    """
    if log_level:
        t1 = time.time()
        print(f" generating {cfg.num_train} + {cfg.num_val} scenes ...")
    records = []
    for i in range(cfg.num_train + cfg.num_val):
        split = "train" if i < cfg.num_train else "val"
        records.append(
            generate_scene(cfg, scene_rng(cfg.data_seed, i), record_id=i, split=split)
        )
    if log_level:
        print("  - elapsed time =", time.time() - t1, "(s)")
    return records
