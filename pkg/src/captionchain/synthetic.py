"""Self-contained synthetic benchmark: scenes of non-overlapping colored
rectangles, expressions naming one rectangle by color and shape, and exact
ground-truth boxes.

Box coordinates land on a 0.01 grid so 2-decimal serialization round-trips
them exactly; with a scripted scene backend that makes context-driven gains
provable rather than statistical. Generation is deterministic per seed.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from .errors import GenerationError
from .evalkit import Dataset, EvalReport, Sample, evaluate
from .geometry import ImageSize, NormBox
from .imaging import SceneObject, SceneSpec, render_scene, save_png, scene_from_dict, scene_to_dict
from .oracle import OracleBackend, SyntheticOracleConfig
from .pipeline import RunConfig, StrategyKind

COLORS: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("red", (210, 50, 45)),
    ("green", (60, 170, 75)),
    ("blue", (55, 95, 215)),
    ("yellow", (230, 215, 70)),
    ("cyan", (70, 200, 215)),
    ("magenta", (200, 70, 195)),
    ("orange", (235, 140, 50)),
    ("purple", (135, 75, 205)),
)

BACKGROUND: tuple[int, int, int] = (28, 28, 32)

# Side lengths in percent of the canvas; placement also snaps to this grid.
MIN_SIDE = 10
MAX_SIDE = 26
MARGIN = 2
PLACEMENT_ATTEMPTS = 500


@dataclass(frozen=True, slots=True)
class SyntheticParams:
    count: int = 50
    objects_per_scene: int = 4
    size: ImageSize = ImageSize(128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise GenerationError(f"count must be >= 1, got {self.count}")
        if not (1 <= self.objects_per_scene <= 2 * len(COLORS)):
            raise GenerationError(
                f"objects_per_scene must be in [1, {2 * len(COLORS)}], got {self.objects_per_scene}"
            )


@dataclass(frozen=True, slots=True)
class SceneFixture:
    """The scene behind one sample plus which object the expression refers to."""

    scene: SceneSpec
    target: str


def generate_synthetic_dataset(
    params: SyntheticParams,
) -> tuple[Dataset, dict[str, SceneFixture]]:
    """Build ``count`` single-target samples, one scene each.

    Sample image paths are ``images/<id>.png`` relative to the directory later
    passed to :func:`write_synthetic_dataset` (and to ``images_root`` at
    evaluation time).
    """
    rng = random.Random(params.seed)
    samples: list[Sample] = []
    fixtures: dict[str, SceneFixture] = {}
    for i in range(params.count):
        sample_id = f"scene{i:04d}"
        scene = _generate_scene(rng, params)
        target = rng.choice(scene.objects)
        samples.append(
            Sample(
                id=sample_id,
                image=f"images/{sample_id}.png",
                expression=f"the {target.name}",
                gt=target.box,
            )
        )
        fixtures[sample_id] = SceneFixture(scene=scene, target=target.name)
    name = f"synthetic-{params.count}x{params.objects_per_scene}-seed{params.seed}"
    return Dataset(name=name, samples=tuple(samples), source_format="synthetic"), fixtures


def _generate_scene(rng: random.Random, params: SyntheticParams) -> SceneSpec:
    kinds = [(color, shape) for color, _ in COLORS for shape in ("square", "rectangle")]
    chosen = rng.sample(kinds, params.objects_per_scene)
    placed: list[tuple[int, int, int, int]] = []
    objects: list[SceneObject] = []
    palette = dict(COLORS)
    for color_name, shape in chosen:
        rect = _place_rect(rng, shape, placed)
        if rect is None:
            raise GenerationError(
                f"infeasible packing: {params.objects_per_scene} objects do not fit"
            )
        placed.append(rect)
        x1, y1, x2, y2 = rect
        objects.append(
            SceneObject(
                name=f"{color_name} {shape}",
                color=palette[color_name],
                box=NormBox(x1 / 100, y1 / 100, x2 / 100, y2 / 100),
            )
        )
    return SceneSpec(canvas=params.size, background=BACKGROUND, objects=tuple(objects))


def _place_rect(
    rng: random.Random, shape: str, placed: list[tuple[int, int, int, int]]
) -> tuple[int, int, int, int] | None:
    for _ in range(PLACEMENT_ATTEMPTS):
        w = rng.randint(MIN_SIDE, MAX_SIDE)
        if shape == "square":
            h = w
        else:
            h = rng.randint(MIN_SIDE, MAX_SIDE)
            if h == w:
                continue
        x1 = rng.randint(MARGIN, 100 - MARGIN - w)
        y1 = rng.randint(MARGIN, 100 - MARGIN - h)
        rect = (x1, y1, x1 + w, y1 + h)
        if all(not _overlap(rect, other, MARGIN) for other in placed):
            return rect
    return None


def _overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int], margin: int) -> bool:
    return not (
        a[2] + margin <= b[0]
        or b[2] + margin <= a[0]
        or a[3] + margin <= b[1]
        or b[3] + margin <= a[1]
    )


def write_synthetic_dataset(
    dataset: Dataset, fixtures: dict[str, SceneFixture], out_dir: str | Path
) -> Path:
    """Render scene images and write ``dataset.jsonl`` plus ``scenes.jsonl``.

    Returns the dataset file path. Re-running with identical inputs rewrites
    identical bytes.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for sample in dataset.samples:
        fixture = fixtures[sample.id]
        save_png(render_scene(fixture.scene), out_dir / sample.image)
    dataset_path = out_dir / "dataset.jsonl"
    with dataset_path.open("w", encoding="utf-8") as handle:
        for sample in dataset.samples:
            fixture = fixtures[sample.id]
            handle.write(
                json.dumps(
                    {
                        "id": sample.id,
                        "image": sample.image,
                        "expression": sample.expression,
                        "bbox": sample.gt.as_list(),
                        "bbox_space": "normalized",
                        "width": fixture.scene.canvas.width,
                        "height": fixture.scene.canvas.height,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with (out_dir / "scenes.jsonl").open("w", encoding="utf-8") as handle:
        for sample in dataset.samples:
            fixture = fixtures[sample.id]
            handle.write(
                json.dumps(
                    {
                        "id": sample.id,
                        "target": fixture.target,
                        "scene": scene_to_dict(fixture.scene),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return dataset_path


def load_fixtures(path: str | Path) -> dict[str, SceneFixture]:
    fixtures: dict[str, SceneFixture] = {}
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            rec = json.loads(line)
            fixtures[rec["id"]] = SceneFixture(
                scene=scene_from_dict(rec["scene"]), target=rec["target"]
            )
    return fixtures


def oracle_for_fixtures(
    fixtures: dict[str, SceneFixture],
    rec_shrink: float = 0.7,
    vqa_iou_threshold: float = 0.5,
    grounding_fidelity: float = 1.0,
) -> OracleBackend:
    return OracleBackend(
        {
            sample_id: SyntheticOracleConfig(
                scene=f.scene,
                target=f.target,
                rec_shrink=rec_shrink,
                vqa_iou_threshold=vqa_iou_threshold,
                grounding_fidelity=grounding_fidelity,
            )
            for sample_id, f in fixtures.items()
        }
    )


def sweep_object_counts(
    dataset: Dataset,
    fixtures: dict[str, SceneFixture],
    n_values: list[int],
    *,
    images_root: str | Path,
    rec_shrink: float = 0.7,
    vqa_iou_threshold: float = 0.5,
    parallelism: int = 1,
) -> list[tuple[int, EvalReport]]:
    """Grounded-context accuracy as a function of the object-count budget.

    For each n the scene backend lists the fraction ``min(1, n / total)`` of
    its objects; n = 0 degenerates to the plain baseline (no description at
    all). Listed objects are always a prefix of the scene order, so larger
    budgets strictly extend smaller ones.
    """
    results: list[tuple[int, EvalReport]] = []
    for n in n_values:
        if n < 0:
            raise GenerationError(f"object count must be >= 0, got {n}")
        client = OracleBackend(
            {
                sample_id: SyntheticOracleConfig(
                    scene=f.scene,
                    target=f.target,
                    rec_shrink=rec_shrink,
                    vqa_iou_threshold=vqa_iou_threshold,
                    grounding_fidelity=min(1.0, n / len(f.scene.objects)),
                )
                for sample_id, f in fixtures.items()
            }
        )
        cfg = RunConfig(
            strategy=StrategyKind.BASELINE if n == 0 else StrategyKind.GROUNDED_DESC,
            n_objects=max(1, n),
        )
        results.append((n, evaluate(dataset, cfg, client, parallelism, images_root=images_root)))
    return results
