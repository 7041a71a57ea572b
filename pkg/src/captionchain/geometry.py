"""Exact bounding-box arithmetic in normalized and pixel coordinates.

Every box in this package is axis-aligned xyxy: [top-left x, top-left y,
bottom-right x, bottom-right y]. The canonical in-memory form is
:class:`NormBox`, with coordinates as fractions of image width/height in
[0, 1]; pixel-space boxes appear only at the imaging boundary and use
half-open integer intervals so adjacent crops tile exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ParseError, UsageError

# Model replies occasionally come back in pixel or 0-1000 coordinates.
# Legitimate normalized output never exceeds 1 by much, so anything above
# this threshold is treated as pixel-scale when an image size is known.
PIXEL_SCALE_THRESHOLD = 1.5


@dataclass(frozen=True, slots=True)
class ImageSize:
    """Positive pixel dimensions of an image."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise UsageError(f"image size must be >= 1x1, got {self.width}x{self.height}")


@dataclass(frozen=True, slots=True)
class NormBox:
    """A validated box in normalized coordinates: 0 <= x1 <= x2 <= 1, same for y.

    Zero-area boxes are representable; callers check :attr:`is_degenerate`
    before operations that need extent (cropping, expansion).
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise UsageError(f"box coordinates must be finite, got {self.as_tuple()}")
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise UsageError(
                f"box must satisfy 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1, got {self.as_tuple()}"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    @property
    def is_degenerate(self) -> bool:
        return self.area == 0.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True, slots=True)
class PixelBox:
    """A box in integer pixel coordinates with half-open extents (x2, y2 exclusive)."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not isinstance(v, int):
                raise UsageError(f"pixel coordinates must be integers, got {self.as_tuple()}")
        if not (0 <= self.x1 <= self.x2 and 0 <= self.y1 <= self.y2):
            raise UsageError(f"pixel box must satisfy 0 <= x1 <= x2, 0 <= y1 <= y2, got {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def is_degenerate(self) -> bool:
        return self.area == 0

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: NormBox | PixelBox, b: NormBox | PixelBox) -> float:
    """Intersection over union of two boxes of the same coordinate kind.

    Returns 0.0 when the union has zero area (both boxes degenerate).
    """
    if type(a) is not type(b):
        raise UsageError(
            f"cannot compute iou across coordinate kinds: {type(a).__name__} vs {type(b).__name__}"
        )
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, float(ix)) * max(0.0, float(iy))
    union = float(a.area) + float(b.area) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def expand_and_clamp(box: NormBox, scale: float) -> NormBox:
    """Scale a box about its center, then clamp each coordinate to [0, 1].

    Clamping truncates; it never translates the box to preserve its size,
    so the result stays centered on the original wherever possible.
    A degenerate input comes back unchanged (its clamp is itself).
    """
    if not (scale > 0.0) or not math.isfinite(scale):
        raise UsageError(f"scale must be a positive finite number, got {scale}")
    if box.is_degenerate:
        return box
    cx, cy = box.center
    half_w = box.width * scale / 2.0
    half_h = box.height * scale / 2.0
    return NormBox(
        _clamp01(cx - half_w),
        _clamp01(cy - half_h),
        _clamp01(cx + half_w),
        _clamp01(cy + half_h),
    )


def to_pixels(box: NormBox, size: ImageSize) -> PixelBox:
    """Convert to pixel coordinates: scale, round half up, order-clamp to bounds."""
    x1 = _round_half_up(box.x1 * size.width)
    y1 = _round_half_up(box.y1 * size.height)
    x2 = _round_half_up(box.x2 * size.width)
    y2 = _round_half_up(box.y2 * size.height)
    x1 = max(0, min(x1, size.width))
    y1 = max(0, min(y1, size.height))
    x2 = max(x1, min(x2, size.width))
    y2 = max(y1, min(y2, size.height))
    return PixelBox(x1, y1, x2, y2)


def from_pixels(box: PixelBox, size: ImageSize) -> NormBox:
    """Convert to normalized coordinates. Round-trips exactly through to_pixels."""
    if box.x2 > size.width or box.y2 > size.height:
        raise UsageError(f"pixel box {box.as_tuple()} exceeds image size {size.width}x{size.height}")
    return NormBox(
        box.x1 / size.width,
        box.y1 / size.height,
        box.x2 / size.width,
        box.y2 / size.height,
    )


def sanitize(raw: Sequence[float], size: ImageSize | None = None) -> NormBox:
    """Coerce four raw reals from a model reply into a valid NormBox.

    Swaps reversed corners, clamps to [0, 1], and, when any magnitude exceeds
    ``PIXEL_SCALE_THRESHOLD`` and an image size is supplied, first rescales the
    values as pixel coordinates. Non-finite input is a parse error.
    """
    values = [float(v) for v in raw]
    if len(values) != 4:
        raise ParseError(f"expected 4 coordinates, got {len(values)}")
    if not all(math.isfinite(v) for v in values):
        raise ParseError(f"non-finite coordinates: {values}")
    x1, y1, x2, y2 = values
    if size is not None and any(abs(v) > PIXEL_SCALE_THRESHOLD for v in values):
        x1, x2 = x1 / size.width, x2 / size.width
        y1, y2 = y1 / size.height, y2 / size.height
    if x1 > x2:
        x1, x2 = x2, x1
    if y1 > y2:
        y1, y2 = y2, y1
    return NormBox(_clamp01(x1), _clamp01(y1), _clamp01(x2), _clamp01(y2))


def _clamp01(v: float) -> float:
    return 0.0 if v < 0.0 else 1.0 if v > 1.0 else v


def _round_half_up(v: float) -> int:
    # Deterministic tie handling; Python's round() would round half to even.
    return int(math.floor(v + 0.5))
