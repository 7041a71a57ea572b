"""A scripted stand-in backend whose task behaviors are pure functions of a
known synthetic scene, making strategy gains analytically provable.

Per-task behavior:

* GDESC lists a prefix of the scene's objects (the fraction set by
  ``grounding_fidelity``) with their true boxes.
* REC copies the target's true box verbatim when a box within 0.01 per
  coordinate appears anywhere in the prompt context; otherwise it returns
  the true box shrunk about its center by ``rec_shrink`` - mimicking a model
  that finds the object but misses its boundaries. Requests carrying a crop
  ``region`` are answered in that region's frame.
* VQA answers yes iff the crop region's IoU with the true box reaches
  ``vqa_iou_threshold``.
* CAPTION names the scene object with maximal IoU against the crop region.

A verbatim copy scores IoU 1.0 and a center shrink by ``s`` scores IoU
``s**2``, so context either fixes the prediction exactly or not at all.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Mapping

from .errors import OracleError, UsageError
from .geometry import NormBox, iou
from .grounding import GroundedDescription, GroundedEntry, serialize_grounded, _BOX_RE
from .imaging import SceneSpec
from .model import Backend, ModelReply, ModelRequest, TaskKind

CONTEXT_BOX_TOLERANCE = 0.01


@dataclass(frozen=True, slots=True)
class SyntheticOracleConfig:
    """The scene behind one sample plus the oracle's behavior knobs."""

    scene: SceneSpec
    target: str
    rec_shrink: float = 0.7
    vqa_iou_threshold: float = 0.5
    grounding_fidelity: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.rec_shrink <= 1.0):
            raise UsageError(f"rec_shrink must be in (0, 1], got {self.rec_shrink}")
        if not (0.0 < self.vqa_iou_threshold < 1.0):
            raise UsageError(f"vqa_iou_threshold must be in (0, 1), got {self.vqa_iou_threshold}")
        if not (0.0 <= self.grounding_fidelity <= 1.0):
            raise UsageError(f"grounding_fidelity must be in [0, 1], got {self.grounding_fidelity}")
        self.scene.find(self.target)  # target must exist


class OracleBackend(Backend):
    """Backend resolving each request against per-sample scene configs.

    Stateless per request: identical (config, request) pairs always produce
    identical replies, regardless of call order or thread.
    """

    backend_id = "oracle"

    def __init__(self, configs: Mapping[str, SyntheticOracleConfig]):
        self._configs = dict(configs)

    def complete(self, request: ModelRequest) -> ModelReply:
        started = time.monotonic()
        cfg = self._configs.get(request.sample_id)
        if cfg is None:
            raise OracleError(f"unknown sample id {request.sample_id!r}")
        if request.task is TaskKind.GDESC:
            text = self._gdesc(cfg)
        elif request.task is TaskKind.REC:
            text = self._rec(cfg, request)
        elif request.task is TaskKind.VQA:
            text = self._vqa(cfg, request)
        elif request.task is TaskKind.CAPTION:
            text = self._caption(cfg, request)
        else:
            raise OracleError(f"unsupported task {request.task!r}")
        return self._reply(text, started)

    @staticmethod
    def _gdesc(cfg: SyntheticOracleConfig) -> str:
        total = len(cfg.scene.objects)
        listed = math.ceil(cfg.grounding_fidelity * total)
        entries = tuple(
            GroundedEntry(index=i + 1, description=obj.name, box=obj.box)
            for i, obj in enumerate(cfg.scene.objects[:listed])
        )
        return serialize_grounded(GroundedDescription(entries=entries))

    def _rec(self, cfg: SyntheticOracleConfig, request: ModelRequest) -> str:
        true_box = cfg.scene.find(cfg.target).box
        if request.region is not None:
            true_box = _to_region_frame(true_box, request.region)
        for candidate in _boxes_in_text(request.prompt):
            if _close(candidate, true_box, CONTEXT_BOX_TOLERANCE):
                return _format_reply_box(candidate)
        return _format_reply_box(_shrink_about_center(true_box, cfg.rec_shrink))

    @staticmethod
    def _vqa(cfg: SyntheticOracleConfig, request: ModelRequest) -> str:
        if request.region is None:
            raise OracleError("VQA request carries no crop region")
        true_box = cfg.scene.find(cfg.target).box
        return "Yes" if iou(request.region, true_box) >= cfg.vqa_iou_threshold else "No"

    @staticmethod
    def _caption(cfg: SyntheticOracleConfig, request: ModelRequest) -> str:
        if request.region is None:
            raise OracleError("CAPTION request carries no crop region")
        best = max(cfg.scene.objects, key=lambda obj: iou(request.region, obj.box))
        return best.name


def _boxes_in_text(text: str) -> list[NormBox]:
    boxes = []
    for m in _BOX_RE.finditer(text):
        values = [float(m.group(i)) for i in range(1, 5)]
        if all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in values):
            x1, y1, x2, y2 = values
            if x1 <= x2 and y1 <= y2:
                boxes.append(NormBox(x1, y1, x2, y2))
    return boxes


def _close(a: NormBox, b: NormBox, tol: float) -> bool:
    return all(abs(u - v) <= tol for u, v in zip(a.as_list(), b.as_list()))


def _shrink_about_center(box: NormBox, factor: float) -> NormBox:
    cx, cy = box.center
    half_w = box.width * factor / 2.0
    half_h = box.height * factor / 2.0
    # rounding can overshoot the unit square by an ulp when an edge sits on it
    return NormBox(
        max(0.0, cx - half_w),
        max(0.0, cy - half_h),
        min(1.0, cx + half_w),
        min(1.0, cy + half_h),
    )


def _to_region_frame(box: NormBox, region: NormBox) -> NormBox:
    """Express a full-frame box in a crop region's coordinates, clamped to [0,1]."""
    if region.is_degenerate:
        raise OracleError(f"degenerate crop region {region.as_list()}")

    def cl(v: float) -> float:
        return 0.0 if v < 0.0 else 1.0 if v > 1.0 else v

    return NormBox(
        cl((box.x1 - region.x1) / region.width),
        cl((box.y1 - region.y1) / region.height),
        cl((box.x2 - region.x1) / region.width),
        cl((box.y2 - region.y1) / region.height),
    )


def _format_reply_box(box: NormBox) -> str:
    # repr keeps full float precision so shrink arithmetic survives the text
    # round-trip; context copies stay verbatim either way.
    return "[" + ", ".join(repr(v) for v in box.as_list()) + "]"
