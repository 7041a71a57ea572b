"""Training-free context strategies for referring-expression box prediction.

The package drives an external vision-language model through grounded
description generation, box prediction, crop verification, and caption-based
re-prediction, and evaluates each context strategy with Acc@IoU metrics
over user datasets or a self-contained synthetic benchmark.
"""

from .geometry import ImageSize, NormBox, PixelBox, expand_and_clamp, from_pixels, iou, sanitize, to_pixels
from .grounding import (
    GroundedDescription,
    GroundedEntry,
    RecContext,
    assemble_context,
    parse_bbox_reply,
    parse_grounded,
    parse_yes_no,
    serialize_grounded,
    strip_boxes,
)
from .imaging import RasterImage, SceneObject, SceneSpec, crop, draw_boxes, encode_png, load_image, render_scene
from .model import (
    Backend,
    LiveBackend,
    MockBackend,
    ModelReply,
    ModelRequest,
    RecordingBackend,
    ReplayBackend,
    TaskKind,
    build_prompt,
)
from .oracle import OracleBackend, SyntheticOracleConfig
from .pipeline import (
    RunConfig,
    RunTrace,
    StrategyKind,
    run_baseline,
    run_chain_of_caption,
    run_crop,
    run_draw,
    run_grounded,
    run_object_desc,
    run_strategy,
)
from .evalkit import (
    Dataset,
    EvalReport,
    Sample,
    accuracy_at,
    compare_reports,
    evaluate,
    load_dataset,
    load_report,
    write_report,
)
from .synthetic import SyntheticParams, generate_synthetic_dataset, write_synthetic_dataset

__version__ = "0.1.0"
