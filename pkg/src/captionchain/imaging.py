"""Pixel-level operations: crop, rectangle annotation, PNG/JPEG codec, scene rendering.

Images are immutable 8-bit RGB rasters backed by numpy arrays. Crops use
half-open pixel intervals so adjacent crops tile exactly. All functions
return new images; inputs are never modified.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImagingError, UsageError
from .geometry import ImageSize, NormBox, to_pixels

RGB = tuple[int, int, int]

# High-contrast annotation palette, cycled in entry order.
PALETTE: tuple[RGB, ...] = (
    (0, 200, 0),      # green
    (0, 90, 230),     # blue
    (230, 50, 50),    # red
    (240, 200, 0),    # yellow
    (0, 200, 210),    # cyan
    (220, 60, 220),   # magenta
    (250, 140, 30),   # orange
    (150, 80, 240),   # purple
)

PRED_COLOR: RGB = PALETTE[0]
TRUTH_COLOR: RGB = PALETTE[1]


class RasterImage:
    """An immutable width x height RGB8 raster."""

    __slots__ = ("_pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.asarray(pixels)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise UsageError(f"pixel data must be (h, w, 3) uint8, got {arr.shape} {arr.dtype}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise UsageError("images must be at least 1x1")
        arr = np.ascontiguousarray(arr).copy()
        arr.setflags(write=False)
        self._pixels = arr

    @classmethod
    def filled(cls, size: ImageSize, color: RGB) -> "RasterImage":
        arr = np.empty((size.height, size.width, 3), dtype=np.uint8)
        arr[:, :] = color
        return cls(arr)

    @property
    def pixels(self) -> np.ndarray:
        return self._pixels

    @property
    def width(self) -> int:
        return self._pixels.shape[1]

    @property
    def height(self) -> int:
        return self._pixels.shape[0]

    @property
    def size(self) -> ImageSize:
        return ImageSize(self.width, self.height)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self._pixels.shape == other._pixels.shape and bool(
            np.array_equal(self._pixels, other._pixels)
        )

    def __repr__(self) -> str:
        return f"RasterImage({self.width}x{self.height})"


def load_image(path: str | Path) -> RasterImage:
    """Decode a PNG or JPEG file to RGB8. Alpha is composited over black."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("RGBA", "LA", "PA") or (img.mode == "P" and "transparency" in img.info):
                rgba = img.convert("RGBA")
                black = Image.new("RGBA", rgba.size, (0, 0, 0, 255))
                img = Image.alpha_composite(black, rgba)
            rgb = img.convert("RGB")
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise ImagingError(f"cannot decode image {path}: {exc}") from exc
    return RasterImage(np.asarray(rgb, dtype=np.uint8))


def encode_png(image: RasterImage) -> bytes:
    """Encode losslessly as PNG. Deterministic for identical pixel data."""
    buf = io.BytesIO()
    Image.fromarray(image.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_png(image: RasterImage, path: str | Path) -> None:
    Path(path).write_bytes(encode_png(image))


def crop(image: RasterImage, region: NormBox) -> RasterImage:
    """Extract exactly the pixels of a normalized region (half-open bounds)."""
    px = to_pixels(region, image.size)
    if px.is_degenerate:
        raise ImagingError(
            f"crop region {_fmt_box(region)} is degenerate at {image.width}x{image.height} "
            f"(pixel rect {px.as_tuple()})"
        )
    return RasterImage(image.pixels[px.y1 : px.y2, px.x1 : px.x2])


def default_stroke(size: ImageSize) -> int:
    """Stroke width that stays visible without occluding small objects."""
    return max(1, round(0.004 * min(size.width, size.height)))


def draw_boxes(
    image: RasterImage,
    layers: Sequence[tuple[NormBox, RGB, int]],
) -> RasterImage:
    """Rasterize rectangle outlines onto a copy of the image.

    Each layer is (box, color, stroke width in px). Boxes are drawn in list
    order, so later outlines overdraw earlier ones; boxes partially outside
    the image are clipped. Strokes grow inward from the box edge.
    """
    out = image.pixels.copy()
    h, w = out.shape[:2]
    for box, color, stroke in layers:
        if stroke < 1:
            raise UsageError(f"stroke width must be >= 1, got {stroke}")
        px = to_pixels(box, image.size)
        if px.is_degenerate:
            continue
        x1, y1, x2, y2 = px.as_tuple()
        t = min(stroke, px.width, px.height)
        col = np.array(color, dtype=np.uint8)
        # Top and bottom bands, then side bands, all clipped to the raster.
        out[max(0, y1) : min(h, y1 + t), max(0, x1) : min(w, x2)] = col
        out[max(0, y2 - t) : min(h, y2), max(0, x1) : min(w, x2)] = col
        out[max(0, y1) : min(h, y2), max(0, x1) : min(w, x1 + t)] = col
        out[max(0, y1) : min(h, y2), max(0, x2 - t) : min(w, x2)] = col
    return RasterImage(out)


def annotate(
    image: RasterImage,
    boxes: Sequence[NormBox],
    colors: Sequence[RGB] | None = None,
    stroke: int | None = None,
) -> RasterImage:
    """Outline boxes using the default palette cycle and stroke width."""
    if stroke is None:
        stroke = default_stroke(image.size)
    if colors is None:
        colors = [PALETTE[i % len(PALETTE)] for i in range(len(boxes))]
    layers = [(box, colors[i], stroke) for i, box in enumerate(boxes)]
    return draw_boxes(image, layers)


@dataclass(frozen=True, slots=True)
class SceneObject:
    """A solid colored rectangle in a synthetic scene."""

    name: str
    color: RGB
    box: NormBox

    def __post_init__(self):
        if not self.name.strip():
            raise UsageError("scene object name must be non-empty")


@dataclass(frozen=True, slots=True)
class SceneSpec:
    """A deterministic synthetic scene: background plus ordered solid rectangles."""

    canvas: ImageSize
    background: RGB
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        if len(self.objects) < 1:
            raise UsageError("a scene needs at least one object")
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise UsageError(f"scene object names must be unique, got {names}")

    def find(self, name: str) -> SceneObject:
        for obj in self.objects:
            if obj.name == name:
                return obj
        raise UsageError(f"no object named {name!r} in scene")


def render_scene(spec: SceneSpec) -> RasterImage:
    """Fill the background, then draw each object as a filled rectangle in order."""
    arr = np.empty((spec.canvas.height, spec.canvas.width, 3), dtype=np.uint8)
    arr[:, :] = spec.background
    for obj in spec.objects:
        px = to_pixels(obj.box, spec.canvas)
        arr[px.y1 : px.y2, px.x1 : px.x2] = obj.color
    return RasterImage(arr)


def scene_to_dict(spec: SceneSpec) -> dict:
    return {
        "canvas": {"width": spec.canvas.width, "height": spec.canvas.height},
        "background": list(spec.background),
        "objects": [
            {"name": o.name, "color": list(o.color), "box": o.box.as_list()} for o in spec.objects
        ],
    }


def scene_from_dict(doc: dict) -> SceneSpec:
    try:
        canvas = ImageSize(int(doc["canvas"]["width"]), int(doc["canvas"]["height"]))
        background = tuple(int(c) for c in doc["background"])
        objects = tuple(
            SceneObject(
                name=str(o["name"]),
                color=tuple(int(c) for c in o["color"]),
                box=NormBox(*[float(v) for v in o["box"]]),
            )
            for o in doc["objects"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed scene document: {exc}") from exc
    return SceneSpec(canvas=canvas, background=background, objects=objects)


def scene_to_json(spec: SceneSpec) -> str:
    return json.dumps(scene_to_dict(spec), sort_keys=True)


def _fmt_box(box: NormBox) -> str:
    return "[" + ", ".join(f"{v:.4f}" for v in box.as_list()) + "]"
