"""Operator entry point.

Subcommands: ``run`` (single sample, debugging), ``eval`` (batch evaluation
with reports), ``gen-synthetic`` (self-contained benchmark), ``compare``
(accuracy deltas between two reports).

Config precedence: command-line flags > --config file > environment >
defaults. API keys are never passed as flags; the live backend reads the
variable named by --api-key-env. Exit codes: 0 success, 1 runtime/strategy
failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys
import threading
from pathlib import Path

from .errors import (
    BackendError,
    CaptionChainError,
    DatasetError,
    GenerationError,
    StrategyError,
    UsageError,
)
from .evalkit import (
    Dataset,
    evaluate,
    format_delta_table,
    format_report_table,
    load_dataset,
    load_report,
    write_report,
)
from .geometry import ImageSize, iou
from .imaging import PRED_COLOR, TRUTH_COLOR, default_stroke, draw_boxes, load_image, save_png
from .model import (
    Backend,
    LiveBackend,
    MockBackend,
    RecordingBackend,
    ReplayBackend,
    TaskKind,
)
from .pipeline import RunConfig, StrategyKind, run_strategy
from .synthetic import (
    SyntheticParams,
    generate_synthetic_dataset,
    load_fixtures,
    oracle_for_fixtures,
    write_synthetic_dataset,
)
from .transcript import TranscriptWriter

ENV_PREFIX = "CAPTIONCHAIN"

DEFAULTS: dict = {
    "backend": "oracle",
    "endpoint": None,
    "model": None,
    "api_key_env": "CAPTIONCHAIN_API_KEY",
    "strategy": "chain_of_caption",
    "dataset": None,
    "dataset_format": "canonical",
    "images_root": None,
    "scenes": None,
    "out": "out",
    "n_objects": 5,
    "crop_scale": 1.5,
    "max_trials": 3,
    "vqa_crop_mode": "exact",
    "grounded_parse_policy": "lenient",
    "parallelism": 1,
    "transcript": None,
    "record": False,
    "replay": False,
    "seed": 0,
    "mock_script": None,
    "oracle_shrink": 0.7,
    "oracle_vqa_threshold": 0.5,
    "oracle_fidelity": 1.0,
}

# Settings that may come from the environment as CAPTIONCHAIN_<NAME>.
ENV_KEYS = ("endpoint", "model", "api_key_env", "images_root", "out")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        cfg = _resolve_config(args)
    except (UsageError, DatasetError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, cfg)
    except (UsageError, DatasetError, GenerationError, BackendError) as exc:
        # Configuration-stage problems; command bodies re-raise runtime
        # backend failures as StrategyError/CaptionChainError below.
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CaptionChainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="captionchain",
        description="Context strategies and caption-chain refinement for "
        "referring-expression box prediction.",
        epilog="Config precedence: flags > --config file > environment > defaults. "
        "Environment: CAPTIONCHAIN_ENDPOINT, CAPTIONCHAIN_MODEL, CAPTIONCHAIN_API_KEY_ENV, "
        "CAPTIONCHAIN_IMAGES_ROOT, CAPTIONCHAIN_OUT. API keys are read from the variable "
        "named by --api-key-env, never from flags. Exit codes: 0 ok, 1 runtime failure, "
        "2 configuration error.",
    )
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(command=None)

    run_p = sub.add_parser("run", help="run one sample and write its trace and annotated image")
    _add_common(run_p)
    run_p.add_argument("--sample-id", help="sample to run (default: first in the dataset)")
    run_p.set_defaults(func=cmd_run)

    eval_p = sub.add_parser("eval", help="evaluate a dataset and write reports")
    _add_common(eval_p)
    eval_p.set_defaults(func=cmd_eval)

    gen_p = sub.add_parser("gen-synthetic", help="generate a synthetic benchmark directory")
    gen_p.add_argument("--out", help="output directory")
    gen_p.add_argument("--count", type=int, default=50)
    gen_p.add_argument("--objects-per-scene", type=int, default=4)
    gen_p.add_argument("--size", default="128x128", help="canvas size WxH")
    gen_p.add_argument("--seed", type=int)
    gen_p.add_argument("--config")
    gen_p.set_defaults(func=cmd_gen_synthetic)

    cmp_p = sub.add_parser("compare", help="print accuracy deltas between two reports")
    cmp_p.add_argument("report_a")
    cmp_p.add_argument("report_b")
    cmp_p.add_argument("--config")
    cmp_p.set_defaults(func=cmd_compare)
    return parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file mirroring these flags")
    p.add_argument("--backend", choices=["live", "mock", "oracle", "replay"])
    p.add_argument("--endpoint", help="chat-completions URL for the live backend")
    p.add_argument("--model", help="model name for the live backend")
    p.add_argument("--api-key-env", help="environment variable holding the API key")
    p.add_argument(
        "--strategy",
        choices=[s.value for s in StrategyKind] + ["all"],
    )
    p.add_argument("--dataset", help="dataset file path")
    p.add_argument("--dataset-format", choices=["canonical", "refcoco"])
    p.add_argument("--images-root", help="directory image paths are relative to")
    p.add_argument("--scenes", help="scene fixtures for the oracle backend")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-objects", type=int)
    p.add_argument("--crop-scale", type=float)
    p.add_argument("--max-trials", type=int)
    p.add_argument("--vqa-crop-mode", choices=["exact", "expanded"])
    p.add_argument("--grounded-parse-policy", choices=["strict", "lenient"])
    p.add_argument("--parallelism", type=int)
    p.add_argument("--transcript", help="transcript path for --record/--replay")
    p.add_argument("--record", action="store_const", const=True, default=None)
    p.add_argument("--replay", action="store_const", const=True, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--mock-script", help="JSON file mapping task name to reply or reply list")
    p.add_argument("--oracle-shrink", type=float)
    p.add_argument("--oracle-vqa-threshold", type=float)
    p.add_argument("--oracle-fidelity", type=float)


def _resolve_config(args: argparse.Namespace) -> dict:
    """Merge flags over config file over environment over defaults."""
    cfg = dict(DEFAULTS)
    for key in ENV_KEYS:
        env_value = os.environ.get(f"{ENV_PREFIX}_{key.upper()}")
        if env_value:
            cfg[key] = env_value
    config_path = getattr(args, "config", None)
    if config_path:
        doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config file keys: {sorted(unknown)}")
        cfg.update(doc)
    for key in DEFAULTS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            cfg[key] = flag_value
    return cfg


def _run_config(cfg: dict, strategy: str) -> RunConfig:
    return RunConfig(
        strategy=StrategyKind(strategy),
        n_objects=cfg["n_objects"],
        crop_scale=cfg["crop_scale"],
        max_trials=cfg["max_trials"],
        vqa_crop_mode=cfg["vqa_crop_mode"],
        grounded_parse_policy=cfg["grounded_parse_policy"],
    )


def _load_dataset(cfg: dict) -> tuple[Dataset, Path]:
    if not cfg["dataset"]:
        raise UsageError("--dataset is required")
    path = Path(cfg["dataset"])
    dataset = load_dataset(path, format=cfg["dataset_format"])
    images_root = Path(cfg["images_root"]) if cfg["images_root"] else path.parent
    return dataset, images_root


def _build_backend(cfg: dict, dataset_path: Path | None) -> Backend:
    kind = cfg["backend"]
    if cfg["replay"]:
        kind = "replay"
    if kind == "replay":
        if not cfg["transcript"]:
            raise UsageError("replay needs --transcript")
        backend: Backend = ReplayBackend(cfg["transcript"])
    elif kind == "live":
        if not cfg["endpoint"] or not cfg["model"]:
            raise UsageError("live backend needs --endpoint and --model")
        backend = LiveBackend(
            endpoint=cfg["endpoint"],
            model=cfg["model"],
            api_key_env=cfg["api_key_env"],
            seed=cfg["seed"],
        )
        backend.probe()
    elif kind == "oracle":
        scenes = cfg["scenes"]
        if not scenes and dataset_path is not None:
            candidate = dataset_path.parent / "scenes.jsonl"
            scenes = str(candidate) if candidate.exists() else None
        if not scenes:
            raise UsageError("oracle backend needs --scenes (or scenes.jsonl next to the dataset)")
        backend = oracle_for_fixtures(
            load_fixtures(scenes),
            rec_shrink=cfg["oracle_shrink"],
            vqa_iou_threshold=cfg["oracle_vqa_threshold"],
            grounding_fidelity=cfg["oracle_fidelity"],
        )
    elif kind == "mock":
        if not cfg["mock_script"]:
            raise UsageError("mock backend needs --mock-script")
        doc = json.loads(Path(cfg["mock_script"]).read_text(encoding="utf-8"))
        backend = MockBackend({TaskKind(task): reply for task, reply in doc.items()})
    else:
        raise UsageError(f"unknown backend {kind!r}")
    if cfg["record"]:
        if not cfg["transcript"]:
            raise UsageError("--record needs --transcript")
        backend = RecordingBackend(backend, TranscriptWriter(cfg["transcript"]))
    return backend


def cmd_run(args: argparse.Namespace, cfg: dict) -> int:
    if cfg["strategy"] == "all":
        raise UsageError("run takes a single --strategy, not 'all'")
    dataset, images_root = _load_dataset(cfg)
    sample_id = args.sample_id or dataset.samples[0].id
    matches = [s for s in dataset.samples if s.id == sample_id]
    if not matches:
        raise UsageError(f"sample {sample_id!r} not in dataset {dataset.name!r}")
    sample = matches[0]
    backend = _build_backend(cfg, Path(cfg["dataset"]))
    run_cfg = _run_config(cfg, cfg["strategy"])
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    image = load_image(images_root / sample.image)
    try:
        box, trace = run_strategy(image, sample.expression, backend, run_cfg, sample.id)
    except StrategyError as exc:
        if exc.trace is not None:
            _write_traces([exc.trace], out_dir / f"trace_{sample.id}.jsonl")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CaptionChainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    score = iou(box, sample.gt)
    print(f"sample {sample.id} strategy {run_cfg.strategy.value}")
    print(f"final box {box.as_list()}")
    print(f"IoU {score:.6f}")
    print(f"trials {trace.trials_used} terminated_by {trace.terminated_by}")
    _write_traces([trace], out_dir / f"trace_{sample.id}.jsonl")
    stroke = default_stroke(image.size)
    annotated = draw_boxes(
        image, [(sample.gt, TRUTH_COLOR, stroke), (box, PRED_COLOR, stroke)]
    )
    save_png(annotated, out_dir / f"annotated_{sample.id}.png")
    return 0


def cmd_eval(args: argparse.Namespace, cfg: dict) -> int:
    dataset, images_root = _load_dataset(cfg)
    backend = _build_backend(cfg, Path(cfg["dataset"]))
    strategies = (
        [s.value for s in StrategyKind] if cfg["strategy"] == "all" else [cfg["strategy"]]
    )
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    cancel_event = threading.Event()
    previous_handlers = {}
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            previous_handlers[sig] = signal.signal(sig, lambda *_: cancel_event.set())
        except ValueError:
            pass  # not the main thread
    try:
        failed = False
        for strategy in strategies:
            run_cfg = _run_config(cfg, strategy)
            traces = []
            report = evaluate(
                dataset,
                run_cfg,
                backend,
                parallelism=cfg["parallelism"],
                images_root=images_root,
                cancel_event=cancel_event,
                trace_log=traces,
            )
            write_report(report, out_dir / f"report_{strategy}.json")
            _write_traces(traces, out_dir / f"traces_{strategy}.jsonl")
            print(format_report_table(report))
            if report.failures == len(report.samples):
                failed = True
        return 1 if failed else 0
    finally:
        for sig, handler in previous_handlers.items():
            signal.signal(sig, handler)


def cmd_gen_synthetic(args: argparse.Namespace, cfg: dict) -> int:
    if not getattr(args, "out", None) and cfg["out"] == DEFAULTS["out"]:
        raise UsageError("--out is required")
    out_dir = Path(args.out or cfg["out"])
    try:
        width, height = (int(v) for v in args.size.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"--size must be WxH, got {args.size!r}") from exc
    params = SyntheticParams(
        count=args.count,
        objects_per_scene=args.objects_per_scene,
        size=ImageSize(width, height),
        seed=args.seed if args.seed is not None else cfg["seed"],
    )
    dataset, fixtures = generate_synthetic_dataset(params)
    dataset_path = write_synthetic_dataset(dataset, fixtures, out_dir)
    print(dataset_path)
    return 0


def cmd_compare(args: argparse.Namespace, cfg: dict) -> int:
    report_a = load_report(args.report_a)
    report_b = load_report(args.report_b)
    print(format_delta_table(report_a, report_b))
    return 0


def _write_traces(traces, path: Path) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for trace in traces:
            handle.write(json.dumps(trace.to_record(), sort_keys=True) + "\n")


if __name__ == "__main__":
    sys.exit(main())
