"""The six context strategies as executable procedures.

Each strategy drives the model through a fixed sequence of task calls and
returns the final predicted box together with a full audit trace. The
caption-chain strategy iteratively verifies the predicted region with a
yes/no check, captions rejected regions, and re-predicts with the rejected
(box, caption) pairs appended to the context, up to a trial cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import ImagingError, ParseError, StrategyError, UsageError
from .geometry import NormBox, expand_and_clamp
from .grounding import (
    GroundedDescription,
    RecContext,
    format_box,
    parse_bbox_reply,
    parse_grounded,
    parse_yes_no,
    strip_boxes,
)
from .imaging import RasterImage, annotate, crop
from .model import Backend, ModelRequest, TaskKind, build_prompt, request_digest


class StrategyKind(str, Enum):
    BASELINE = "baseline"
    OBJECT_DESC = "object_desc"
    GROUNDED_DESC = "grounded_desc"
    CROP_REFINE = "crop_refine"
    DRAW_BOXES = "draw_boxes"
    CHAIN_OF_CAPTION = "chain_of_caption"


@dataclass(frozen=True, slots=True)
class RunConfig:
    """Knobs shared by the strategies. Defaults: 5 context objects, 1.5x crop
    expansion, 3 trials, exact-box verification crops, lenient parsing."""

    strategy: StrategyKind = StrategyKind.CHAIN_OF_CAPTION
    n_objects: int = 5
    crop_scale: float = 1.5
    max_trials: int = 3
    vqa_crop_mode: str = "exact"
    grounded_parse_policy: str = "lenient"
    gdesc_include_expression: bool = False

    def __post_init__(self):
        if self.n_objects < 0:
            raise UsageError(f"n_objects must be >= 0, got {self.n_objects}")
        if self.crop_scale <= 0:
            raise UsageError(f"crop_scale must be > 0, got {self.crop_scale}")
        if self.max_trials < 1:
            raise UsageError(f"max_trials must be >= 1, got {self.max_trials}")
        if self.vqa_crop_mode not in ("exact", "expanded"):
            raise UsageError(f"vqa_crop_mode must be 'exact' or 'expanded', got {self.vqa_crop_mode!r}")
        if self.grounded_parse_policy not in ("strict", "lenient"):
            raise UsageError(
                f"grounded_parse_policy must be 'strict' or 'lenient', got {self.grounded_parse_policy!r}"
            )

    def snapshot(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "n_objects": self.n_objects,
            "crop_scale": self.crop_scale,
            "max_trials": self.max_trials,
            "vqa_crop_mode": self.vqa_crop_mode,
            "grounded_parse_policy": self.grounded_parse_policy,
            "gdesc_include_expression": self.gdesc_include_expression,
            "crop_policy": "aspect-preserving, no padding",
        }


@dataclass(slots=True)
class ModelCall:
    """One model invocation as seen by the strategy: what was asked (by
    digest) and what the parsed outcome was."""

    task: str
    digest: str
    ok: bool
    detail: str


@dataclass(slots=True)
class RunTrace:
    """Audit record of a single strategy run over one sample."""

    sample_id: str
    strategy: str
    calls: list[ModelCall] = field(default_factory=list)
    trial_boxes: list[NormBox] = field(default_factory=list)
    vqa_answers: list[bool] = field(default_factory=list)
    captions: list[str] = field(default_factory=list)
    appended: list[tuple[NormBox, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    final_box: NormBox | None = None
    trials_used: int = 0
    terminated_by: str = "completed"

    def count(self, task: TaskKind) -> int:
        return sum(1 for c in self.calls if c.task == task.value)

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "strategy": self.strategy,
            "calls": [
                {"task": c.task, "digest": c.digest, "ok": c.ok, "detail": c.detail}
                for c in self.calls
            ],
            "trial_boxes": [b.as_list() for b in self.trial_boxes],
            "vqa_answers": self.vqa_answers,
            "captions": self.captions,
            "appended": [[b.as_list(), c] for b, c in self.appended],
            "warnings": self.warnings,
            "final_box": self.final_box.as_list() if self.final_box else None,
            "trials_used": self.trials_used,
            "terminated_by": self.terminated_by,
        }


class _Run:
    """Shared plumbing for one strategy run: issues task calls, parses
    replies, and records everything on the trace."""

    def __init__(
        self,
        image: RasterImage,
        expression: str,
        client: Backend,
        cfg: RunConfig,
        sample_id: str,
        strategy: StrategyKind,
    ):
        if not expression.strip():
            raise UsageError("referring expression must be non-empty")
        self.image = image
        self.expression = expression
        self.client = client
        self.cfg = cfg
        self.sample_id = sample_id
        self.trace = RunTrace(sample_id=sample_id, strategy=strategy.value)

    def complete(
        self,
        task: TaskKind,
        prompt: str,
        image: RasterImage,
        trial: int = 0,
        region: NormBox | None = None,
    ) -> tuple[str, ModelCall]:
        request = ModelRequest(
            task=task,
            image=image,
            prompt=prompt,
            sample_id=self.sample_id,
            trial=trial,
            region=region,
        )
        reply = self.client.complete(request)
        call = ModelCall(task=task.value, digest=request_digest(request), ok=True, detail="")
        self.trace.calls.append(call)
        return reply.text, call

    def gdesc(self) -> GroundedDescription:
        prompt = build_prompt(
            TaskKind.GDESC,
            n_objects=self.cfg.n_objects,
            expression=self.expression,
            include_expression_in_scan=self.cfg.gdesc_include_expression,
        )
        text, call = self.complete(TaskKind.GDESC, prompt, self.image)
        grounded = parse_grounded(
            text,
            expected_count=self.cfg.n_objects,
            policy=self.cfg.grounded_parse_policy,
            image_size=self.image.size,
        )
        call.detail = f"{len(grounded)} entries"
        self.trace.warnings.extend(grounded.warnings)
        return grounded

    def rec(
        self,
        context: RecContext | str,
        image: RasterImage | None = None,
        trial: int = 0,
        region: NormBox | None = None,
    ) -> NormBox | None:
        """One box prediction. Returns None on an unusable reply (recorded)."""
        image = image if image is not None else self.image
        prompt = build_prompt(TaskKind.REC, context=context, expression=self.expression)
        text, call = self.complete(TaskKind.REC, prompt, image, trial=trial, region=region)
        try:
            box = parse_bbox_reply(text, image_size=image.size)
        except ParseError as exc:
            call.ok = False
            call.detail = str(exc)
            self.trace.warnings.append(f"trial {trial}: unparseable box reply")
            return None
        if box.is_degenerate:
            call.ok = False
            call.detail = f"degenerate box {format_box(box)}"
            self.trace.warnings.append(f"trial {trial}: degenerate box discarded")
            return None
        call.detail = format_box(box)
        return box

    def vqa(self, region_image: RasterImage, region: NormBox, trial: int) -> bool:
        prompt = build_prompt(TaskKind.VQA, expression=self.expression)
        text, call = self.complete(TaskKind.VQA, prompt, region_image, trial=trial, region=region)
        try:
            answer = parse_yes_no(text)
        except ParseError:
            # Accepting on garbage output would silently inflate accuracy.
            call.ok = False
            call.detail = f"unparseable answer {text!r}, treated as no"
            self.trace.warnings.append(f"trial {trial}: unparseable yes/no reply")
            answer = False
        else:
            call.detail = "yes" if answer else "no"
        self.trace.vqa_answers.append(answer)
        return answer

    def caption(self, region_image: RasterImage, region: NormBox, trial: int) -> str:
        prompt = build_prompt(TaskKind.CAPTION)
        text, call = self.complete(TaskKind.CAPTION, prompt, region_image, trial=trial, region=region)
        caption = " ".join(text.split()) or "(empty caption)"
        call.detail = caption
        self.trace.captions.append(caption)
        return caption

    def finish(self, box: NormBox, terminated_by: str = "completed") -> tuple[NormBox, RunTrace]:
        self.trace.final_box = box
        self.trace.terminated_by = terminated_by
        self.trace.trials_used = self.trace.count(TaskKind.REC)
        return box, self.trace

    def fail(self, message: str) -> StrategyError:
        self.trace.terminated_by = "parse_exhaustion"
        self.trace.trials_used = self.trace.count(TaskKind.REC)
        return StrategyError(f"{message} (sample {self.sample_id!r})", trace=self.trace)


def empty_context(expression: str) -> RecContext:
    return RecContext(GroundedDescription(), (), expression)


def run_baseline(
    image: RasterImage, expression: str, client: Backend, sample_id: str = ""
) -> tuple[NormBox, RunTrace]:
    """A single plain box prediction with no added context."""
    cfg = RunConfig(strategy=StrategyKind.BASELINE)
    run = _Run(image, expression, client, cfg, sample_id, StrategyKind.BASELINE)
    box = run.rec(empty_context(expression), trial=1)
    if box is None:
        raise run.fail("baseline prediction unparseable")
    run.trace.trial_boxes.append(box)
    return run.finish(box)


def run_grounded(
    image: RasterImage, expression: str, client: Backend, cfg: RunConfig, sample_id: str = ""
) -> tuple[NormBox, RunTrace]:
    """Generate a grounded description, then predict with it as textual context."""
    _require_objects(cfg)
    run = _Run(image, expression, client, cfg, sample_id, StrategyKind.GROUNDED_DESC)
    grounded = run.gdesc()
    box = run.rec(RecContext(grounded, (), expression), trial=1)
    if box is None:
        raise run.fail("grounded prediction unparseable")
    run.trace.trial_boxes.append(box)
    return run.finish(box)


def run_object_desc(
    image: RasterImage, expression: str, client: Backend, cfg: RunConfig, sample_id: str = ""
) -> tuple[NormBox, RunTrace]:
    """Like the grounded strategy, but the context drops all coordinates."""
    _require_objects(cfg)
    run = _Run(image, expression, client, cfg, sample_id, StrategyKind.OBJECT_DESC)
    grounded = run.gdesc()
    box = run.rec(strip_boxes(grounded), trial=1)
    if box is None:
        raise run.fail("object-description prediction unparseable")
    run.trace.trial_boxes.append(box)
    return run.finish(box)


def run_crop(
    image: RasterImage, expression: str, client: Backend, cfg: RunConfig, sample_id: str = ""
) -> tuple[NormBox, RunTrace]:
    """Predict, crop around the prediction at ``crop_scale``, re-predict on the
    crop, and map the result back to full-image coordinates."""
    run = _Run(image, expression, client, cfg, sample_id, StrategyKind.CROP_REFINE)
    first = run.rec(empty_context(expression), trial=1)
    if first is None:
        raise run.fail("initial prediction unparseable")
    run.trace.trial_boxes.append(first)
    region = expand_and_clamp(first, cfg.crop_scale)
    try:
        cropped = crop(image, region)
    except ImagingError as exc:
        run.trace.warnings.append(f"crop failed, keeping initial prediction: {exc}")
        return run.finish(first)
    second = run.rec(empty_context(expression), image=cropped, trial=2, region=region)
    if second is None:
        run.trace.warnings.append("refined prediction unparseable, keeping initial prediction")
        return run.finish(first)
    mapped = map_from_region(second, region)
    run.trace.trial_boxes.append(mapped)
    return run.finish(mapped)


def run_draw(
    image: RasterImage, expression: str, client: Backend, cfg: RunConfig, sample_id: str = ""
) -> tuple[NormBox, RunTrace]:
    """Draw the grounded description's boxes onto the image, then predict on
    the annotated image with the plain expression (no textual context)."""
    _require_objects(cfg)
    run = _Run(image, expression, client, cfg, sample_id, StrategyKind.DRAW_BOXES)
    grounded = run.gdesc()
    annotated = annotate(image, grounded.boxes) if grounded.entries else image
    box = run.rec(empty_context(expression), image=annotated, trial=1)
    if box is None:
        raise run.fail("prediction on annotated image unparseable")
    run.trace.trial_boxes.append(box)
    return run.finish(box)


def run_chain_of_caption(
    image: RasterImage, expression: str, client: Backend, cfg: RunConfig, sample_id: str = ""
) -> tuple[NormBox, RunTrace]:
    """Grounded prediction refined by verify/caption/re-predict.

    Each trial is one box prediction. The predicted region is verified with a
    yes/no check; a yes terminates the run. Otherwise the region is captioned
    and the rejected (box, caption) pair is appended to the context before the
    next trial. Unusable predictions consume their trial and keep the previous
    box. After ``max_trials`` predictions without a yes, the last box wins.
    """
    _require_objects(cfg)
    run = _Run(image, expression, client, cfg, sample_id, StrategyKind.CHAIN_OF_CAPTION)
    grounded = run.gdesc()
    ctx = RecContext(grounded, (), expression)
    box: NormBox | None = None
    for trial in range(1, cfg.max_trials + 1):
        parsed = run.rec(ctx, trial=trial)
        if parsed is not None:
            box = parsed
            run.trace.trial_boxes.append(parsed)
        if box is None:
            continue
        region = box if cfg.vqa_crop_mode == "exact" else expand_and_clamp(box, cfg.crop_scale)
        try:
            region_image = crop(image, region)
        except ImagingError as exc:
            run.trace.warnings.append(f"trial {trial}: verification crop failed: {exc}")
            continue
        if run.vqa(region_image, region, trial):
            run.trace.appended = list(ctx.appended)
            return run.finish(box, terminated_by="verified")
        caption = run.caption(region_image, region, trial)
        ctx = ctx.with_appended(box, caption)
    run.trace.appended = list(ctx.appended)
    if box is None:
        raise run.fail("no usable prediction in any trial")
    return run.finish(box, terminated_by="max_trials")


def map_from_region(box: NormBox, region: NormBox) -> NormBox:
    """Map a box expressed in a crop region's frame back to full-image
    coordinates. Exact at the frame corners: [0,0,1,1] maps to the region."""
    if region.is_degenerate:
        raise UsageError(f"cannot map out of a degenerate region {region.as_list()}")

    def lerp(lo: float, hi: float, v: float) -> float:
        return min(1.0, max(0.0, lo * (1.0 - v) + hi * v))

    return NormBox(
        lerp(region.x1, region.x2, box.x1),
        lerp(region.y1, region.y2, box.y1),
        lerp(region.x1, region.x2, box.x2),
        lerp(region.y1, region.y2, box.y2),
    )


def run_strategy(
    image: RasterImage,
    expression: str,
    client: Backend,
    cfg: RunConfig,
    sample_id: str = "",
) -> tuple[NormBox, RunTrace]:
    """Dispatch to the strategy selected in the config."""
    if cfg.strategy is StrategyKind.BASELINE:
        return run_baseline(image, expression, client, sample_id)
    if cfg.strategy is StrategyKind.OBJECT_DESC:
        return run_object_desc(image, expression, client, cfg, sample_id)
    if cfg.strategy is StrategyKind.GROUNDED_DESC:
        return run_grounded(image, expression, client, cfg, sample_id)
    if cfg.strategy is StrategyKind.CROP_REFINE:
        return run_crop(image, expression, client, cfg, sample_id)
    if cfg.strategy is StrategyKind.DRAW_BOXES:
        return run_draw(image, expression, client, cfg, sample_id)
    if cfg.strategy is StrategyKind.CHAIN_OF_CAPTION:
        return run_chain_of_caption(image, expression, client, cfg, sample_id)
    raise UsageError(f"unknown strategy {cfg.strategy!r}")


def _require_objects(cfg: RunConfig) -> None:
    if cfg.n_objects < 1:
        raise UsageError(f"{cfg.strategy.value} needs n_objects >= 1, got {cfg.n_objects}")
