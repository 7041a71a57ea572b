"""Dataset ingestion, Acc@IoU metrics, batch evaluation, and report emission.

Accuracy thresholds are inclusive: a sample counts at threshold t when its
IoU is >= t. Failed samples score IoU 0 rather than being excluded, so
denominators always equal the full dataset. Reports are deterministic for
deterministic backends regardless of the parallelism level.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import CaptionChainError, DatasetError, StrategyError, UsageError
from .geometry import ImageSize, NormBox, PixelBox, from_pixels, iou
from .imaging import load_image
from .model import Backend
from .pipeline import RunConfig, RunTrace, run_strategy

THRESHOLDS = (0.5, 0.7, 0.9)
THRESHOLD_RULE = "inclusive (>=)"


@dataclass(frozen=True, slots=True)
class Sample:
    """One evaluation case: an image, a referring expression, and the true box."""

    id: str
    image: str
    expression: str
    gt: NormBox

    def __post_init__(self):
        if not self.id:
            raise DatasetError("sample id must be non-empty")
        if not self.expression.strip():
            raise DatasetError(f"sample {self.id!r} has an empty expression")
        if self.gt.is_degenerate:
            raise DatasetError(f"sample {self.id!r} has a degenerate ground-truth box")


@dataclass(frozen=True, slots=True)
class Dataset:
    name: str
    samples: tuple[Sample, ...]
    source_format: str = "canonical"

    def __post_init__(self):
        if not self.samples:
            raise DatasetError(f"dataset {self.name!r} has no samples")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate sample ids in {self.name!r}: {dupes}")


@dataclass(frozen=True, slots=True)
class SampleResult:
    id: str
    box: NormBox | None
    iou: float
    trials_used: int
    terminated_by: str
    status: str  # ok | failed | skipped
    error: str | None = None

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "box": self.box.as_list() if self.box else None,
            "iou": self.iou,
            "trials_used": self.trials_used,
            "terminated_by": self.terminated_by,
            "status": self.status,
            "error": self.error,
        }


@dataclass(frozen=True)
class EvalReport:
    """Per-sample records plus Acc at the 0.5/0.7/0.9 thresholds."""

    dataset: str
    strategy: str
    config: dict
    samples: tuple[SampleResult, ...]
    acc: dict[str, float]
    failures: int

    def __post_init__(self):
        if not (self.acc["0.9"] <= self.acc["0.7"] <= self.acc["0.5"]):
            raise UsageError(f"accuracy must be monotone over thresholds, got {self.acc}")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "strategy": self.strategy,
            "config": self.config,
            "samples": [s.to_record() for s in self.samples],
            "acc": self.acc,
            "failures": self.failures,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def accuracy_at(ious: Sequence[float], threshold: float) -> float:
    """Fraction of IoU values meeting the threshold (inclusive)."""
    if not ious:
        raise UsageError("accuracy over an empty list is undefined")
    if not (0.0 < threshold < 1.0):
        raise UsageError(f"threshold must be in (0, 1), got {threshold}")
    if any(v < 0.0 or v > 1.0 for v in ious):
        raise UsageError("all IoU values must be in [0, 1]")
    return sum(1 for v in ious if v >= threshold) / len(ious)


def load_dataset(path: str | Path, format: str = "canonical") -> Dataset:
    """Load samples from disk.

    ``canonical`` is line-delimited JSON records
    ``{id, image, expression, bbox, bbox_space, width, height}`` with xyxy
    boxes either normalized or in pixels. ``refcoco`` is a JSON array in the
    common annotation layout: per-image entries with a pixel ``bbox`` as
    [x, y, w, h] and a list of expressions, each expression becoming a sample.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset not found: {path}")
    if format == "canonical":
        samples = _load_canonical(path)
    elif format == "refcoco":
        samples = _load_refcoco(path)
    else:
        raise UsageError(f"unknown dataset format {format!r}")
    return Dataset(name=path.stem, samples=tuple(samples), source_format=format)


def _load_canonical(path: Path) -> list[Sample]:
    samples = []
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                bbox = [float(v) for v in rec["bbox"]]
                space = rec.get("bbox_space", "normalized")
                if space == "pixel":
                    size = ImageSize(int(rec["width"]), int(rec["height"]))
                    gt = from_pixels(
                        PixelBox(*(int(round(v)) for v in bbox)), size
                    )
                elif space == "normalized":
                    gt = NormBox(*bbox)
                else:
                    raise DatasetError(f"unknown bbox_space {space!r}")
                samples.append(
                    Sample(
                        id=str(rec["id"]),
                        image=str(rec["image"]),
                        expression=str(rec["expression"]),
                        gt=gt,
                    )
                )
            except DatasetError:
                raise
            except (KeyError, TypeError, ValueError, CaptionChainError) as exc:
                raise DatasetError(f"bad record at {path}:{lineno}: {exc}") from exc
    if not samples:
        raise DatasetError(f"no samples in {path}")
    return samples


def _load_refcoco(path: Path) -> list[Sample]:
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise DatasetError(f"{path} must contain a JSON array of annotations")
    samples = []
    for pos, entry in enumerate(entries):
        try:
            image_id = entry["image_id"]
            image = str(entry.get("file_name", f"{image_id}.jpg"))
            size = ImageSize(int(entry["width"]), int(entry["height"]))
            x, y, w, h = (float(v) for v in entry["bbox"])
            gt = from_pixels(
                PixelBox(
                    int(round(x)),
                    int(round(y)),
                    int(round(x + w)),
                    int(round(y + h)),
                ),
                size,
            )
            texts = entry.get("expressions")
            if texts is None:
                texts = [s["sent"] for s in entry["sentences"]]
            for k, text in enumerate(texts):
                samples.append(
                    Sample(id=f"{image_id}#{k}", image=image, expression=str(text), gt=gt)
                )
        except DatasetError:
            raise
        except (KeyError, TypeError, ValueError, CaptionChainError) as exc:
            raise DatasetError(f"bad annotation at {path}[{pos}]: {exc}") from exc
    if not samples:
        raise DatasetError(f"no samples in {path}")
    return samples


def evaluate(
    dataset: Dataset,
    cfg: RunConfig,
    client: Backend,
    parallelism: int = 1,
    *,
    images_root: str | Path | None = None,
    cancel_event: threading.Event | None = None,
    trace_log: list[RunTrace] | None = None,
) -> EvalReport:
    """Run one strategy over every sample with bounded concurrency.

    Per-sample errors are recorded as failures with IoU 0 and never abort the
    batch. Results keep dataset order, so the report is byte-identical across
    parallelism levels for deterministic backends. Pass ``trace_log`` to
    collect per-sample traces (in dataset order). A set ``cancel_event``
    lets in-flight samples finish and marks pending ones skipped.
    """
    if parallelism < 1:
        raise UsageError(f"parallelism must be >= 1, got {parallelism}")
    root = Path(images_root) if images_root is not None else None

    def run_one(sample: Sample) -> tuple[SampleResult, RunTrace | None]:
        if cancel_event is not None and cancel_event.is_set():
            return (
                SampleResult(sample.id, None, 0.0, 0, "skipped", "skipped"),
                None,
            )
        try:
            image_path = root / sample.image if root is not None else Path(sample.image)
            image = load_image(image_path)
            box, trace = run_strategy(image, sample.expression, client, cfg, sample.id)
            return (
                SampleResult(
                    sample.id,
                    box,
                    iou(box, sample.gt),
                    trace.trials_used,
                    trace.terminated_by,
                    "ok",
                ),
                trace,
            )
        except StrategyError as exc:
            trace = exc.trace
            return (
                SampleResult(
                    sample.id,
                    None,
                    0.0,
                    trace.trials_used if trace else 0,
                    trace.terminated_by if trace else "parse_exhaustion",
                    "failed",
                    error=str(exc),
                ),
                trace,
            )
        except CaptionChainError as exc:
            return (
                SampleResult(sample.id, None, 0.0, 0, "error", "failed", error=str(exc)),
                None,
            )

    if parallelism == 1:
        outcomes = [run_one(s) for s in dataset.samples]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(run_one, dataset.samples))

    results = tuple(result for result, _ in outcomes)
    if trace_log is not None:
        trace_log.extend(trace for _, trace in outcomes if trace is not None)
    return make_report(dataset.name, cfg, client.backend_id, results)


def make_report(
    dataset_name: str, cfg: RunConfig, backend_id: str, results: tuple[SampleResult, ...]
) -> EvalReport:
    ious = [r.iou for r in results]
    config = cfg.snapshot()
    config["threshold_rule"] = THRESHOLD_RULE
    config["backend"] = backend_id
    return EvalReport(
        dataset=dataset_name,
        strategy=cfg.strategy.value,
        config=config,
        samples=results,
        acc={f"{t}": accuracy_at(ious, t) for t in THRESHOLDS},
        failures=sum(1 for r in results if r.status == "failed"),
    )


def format_report_table(report: EvalReport) -> str:
    header = f"{'dataset':<20} {'strategy':<18} {'Acc_0.5':>8} {'Acc_0.7':>8} {'Acc_0.9':>8} {'fail':>5}"
    row = (
        f"{report.dataset:<20} {report.strategy:<18} "
        f"{report.acc['0.5'] * 100:8.2f} {report.acc['0.7'] * 100:8.2f} "
        f"{report.acc['0.9'] * 100:8.2f} {report.failures:5d}"
    )
    return header + "\n" + row


def write_report(report: EvalReport, path: str | Path) -> Path:
    """Write the JSON document plus a human-readable table alongside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json(), encoding="utf-8")
    path.with_suffix(".txt").write_text(format_report_table(report) + "\n", encoding="utf-8")
    return path


def load_report(path: str | Path) -> EvalReport:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        samples = tuple(
            SampleResult(
                id=rec["id"],
                box=NormBox(*rec["box"]) if rec["box"] else None,
                iou=float(rec["iou"]),
                trials_used=int(rec["trials_used"]),
                terminated_by=rec["terminated_by"],
                status=rec["status"],
                error=rec.get("error"),
            )
            for rec in doc["samples"]
        )
        return EvalReport(
            dataset=doc["dataset"],
            strategy=doc["strategy"],
            config=doc["config"],
            samples=samples,
            acc={k: float(v) for k, v in doc["acc"].items()},
            failures=int(doc["failures"]),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"cannot load report {path}: {exc}") from exc


def compare_reports(a: EvalReport, b: EvalReport) -> dict[str, float]:
    """Per-threshold accuracy deltas (b minus a) in percentage points."""
    if a.dataset != b.dataset:
        raise UsageError(f"reports cover different datasets: {a.dataset!r} vs {b.dataset!r}")
    ids_a = {s.id for s in a.samples}
    ids_b = {s.id for s in b.samples}
    if ids_a != ids_b:
        raise UsageError(
            f"reports cover different samples; symmetric difference: {sorted(ids_a ^ ids_b)}"
        )
    return {key: (b.acc[key] - a.acc[key]) * 100.0 for key in a.acc}


def format_delta_table(a: EvalReport, b: EvalReport) -> str:
    """Side-by-side accuracies with signed percentage-point deltas."""
    deltas = compare_reports(a, b)
    lines = [f"{'threshold':<10} {a.strategy:>12} {b.strategy:>12} {'delta':>10}"]
    for key in sorted(a.acc):
        lines.append(
            f"Acc_{key:<6} {a.acc[key] * 100:12.2f} {b.acc[key] * 100:12.2f} "
            f"{deltas[key]:+10.2f}"
        )
    return "\n".join(lines)
