from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from captionchain.errors import StrategyError, UsageError
from captionchain.geometry import NormBox, iou
from captionchain.imaging import RasterImage
from captionchain.model import MockBackend, TaskKind
from captionchain.oracle import OracleBackend, SyntheticOracleConfig
from captionchain.pipeline import (
    RunConfig,
    StrategyKind,
    map_from_region,
    run_baseline,
    run_chain_of_caption,
    run_crop,
    run_draw,
    run_grounded,
    run_object_desc,
    run_strategy,
)

GDESC_REPLY = "1. a red mug [0.10, 0.10, 0.30, 0.30]\n2. a blue bowl [0.50, 0.50, 0.90, 0.90]"


def image_64() -> RasterImage:
    rng = np.random.default_rng(3)
    return RasterImage(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8))


def call_tasks(trace) -> list[str]:
    return [c.task for c in trace.calls]


class TestBaseline:
    def test_single_rec_call(self):
        mock = MockBackend({TaskKind.REC: "[0,0,1,1]"})
        box, trace = run_baseline(image_64(), "the mug", mock, "s")
        assert box == NormBox(0, 0, 1, 1)
        assert call_tasks(trace) == ["REC"]
        assert trace.trials_used == 1
        assert trace.terminated_by == "completed"

    def test_unparseable_reply_is_strategy_error(self):
        mock = MockBackend({TaskKind.REC: "no box"})
        with pytest.raises(StrategyError) as err:
            run_baseline(image_64(), "the mug", mock, "s")
        assert err.value.trace.terminated_by == "parse_exhaustion"
        assert err.value.trace.final_box is None

    def test_oracle_shrink(self, two_object_scene, oracle, scene_image):
        box, trace = run_baseline(scene_image, "the red square", oracle, "s1")
        assert box.as_list() == pytest.approx([0.26, 0.26, 0.54, 0.54])
        assert iou(box, NormBox(0.2, 0.2, 0.6, 0.6)) == pytest.approx(0.49)


class TestGrounded:
    def test_call_sequence(self):
        mock = MockBackend({TaskKind.GDESC: GDESC_REPLY, TaskKind.REC: "[0.1, 0.1, 0.3, 0.3]"})
        cfg = RunConfig(strategy=StrategyKind.GROUNDED_DESC)
        box, trace = run_grounded(image_64(), "the mug", mock, cfg, "s")
        assert call_tasks(trace) == ["GDESC", "REC"]

    def test_context_reaches_prompt(self):
        seen = {}

        def rec_reply(request):
            seen["prompt"] = request.prompt
            return "[0.1, 0.1, 0.3, 0.3]"

        mock = MockBackend({TaskKind.GDESC: GDESC_REPLY, TaskKind.REC: rec_reply})
        cfg = RunConfig(strategy=StrategyKind.GROUNDED_DESC)
        run_grounded(image_64(), "the mug", mock, cfg, "s")
        assert "1. a red mug [0.10, 0.10, 0.30, 0.30]" in seen["prompt"]
        assert '"the mug"' in seen["prompt"]

    def test_empty_gdesc_proceeds_with_warning(self):
        mock = MockBackend({TaskKind.GDESC: "nothing useful", TaskKind.REC: "[0,0,1,1]"})
        cfg = RunConfig(strategy=StrategyKind.GROUNDED_DESC)
        box, trace = run_grounded(image_64(), "the mug", mock, cfg, "s")
        assert box == NormBox(0, 0, 1, 1)
        assert any("no grounded entries" in w for w in trace.warnings)

    def test_oracle_verbatim_when_listed(self, oracle, scene_image):
        cfg = RunConfig(strategy=StrategyKind.GROUNDED_DESC)
        box, trace = run_grounded(scene_image, "the red square", oracle, cfg, "s1")
        assert box == NormBox(0.2, 0.2, 0.6, 0.6)

    def test_oracle_fidelity_zero_equals_baseline(self, two_object_scene, scene_image):
        zero = OracleBackend(
            {
                "s1": SyntheticOracleConfig(
                    scene=two_object_scene, target="red square", grounding_fidelity=0.0
                )
            }
        )
        cfg = RunConfig(strategy=StrategyKind.GROUNDED_DESC)
        grounded_box, _ = run_grounded(scene_image, "the red square", zero, cfg, "s1")
        baseline_box, _ = run_baseline(scene_image, "the red square", zero, "s1")
        assert grounded_box == baseline_box

    def test_requires_objects(self):
        cfg = RunConfig(strategy=StrategyKind.GROUNDED_DESC, n_objects=0)
        with pytest.raises(UsageError):
            run_grounded(image_64(), "t", MockBackend({}), cfg, "s")


class TestObjectDesc:
    def test_context_has_no_brackets(self):
        seen = {}

        def rec_reply(request):
            seen["prompt"] = request.prompt
            return "[0.1, 0.1, 0.3, 0.3]"

        mock = MockBackend({TaskKind.GDESC: GDESC_REPLY, TaskKind.REC: rec_reply})
        cfg = RunConfig(strategy=StrategyKind.OBJECT_DESC)
        run_object_desc(image_64(), "the mug", mock, cfg, "s")
        context_block = seen["prompt"].split("Locate the object")[0]
        assert "a red mug" in context_block
        assert "[" not in context_block

    def test_call_sequence(self):
        mock = MockBackend({TaskKind.GDESC: GDESC_REPLY, TaskKind.REC: "[0.2, 0.2, 0.4, 0.4]"})
        cfg = RunConfig(strategy=StrategyKind.OBJECT_DESC)
        _, trace = run_object_desc(image_64(), "the mug", mock, cfg, "s")
        assert call_tasks(trace) == ["GDESC", "REC"]

    def test_oracle_equals_baseline(self, oracle, scene_image):
        # stripping the boxes removes what the verbatim-copy rule needs
        cfg = RunConfig(strategy=StrategyKind.OBJECT_DESC)
        desc_box, _ = run_object_desc(scene_image, "the red square", oracle, cfg, "s1")
        base_box, _ = run_baseline(scene_image, "the red square", oracle, "s1")
        assert desc_box == base_box


class TestCrop:
    def test_identity_second_reply_returns_crop_region(self):
        mock = MockBackend({TaskKind.REC: ["[0.4, 0.4, 0.6, 0.6]", "[0, 0, 1, 1]"]})
        cfg = RunConfig(strategy=StrategyKind.CROP_REFINE)
        box, trace = run_crop(image_64(), "t", mock, cfg, "s")
        assert box.as_list() == pytest.approx([0.35, 0.35, 0.65, 0.65])
        assert trace.count(TaskKind.REC) == 2

    def test_affine_mapping_example(self):
        mock = MockBackend({TaskKind.REC: ["[0.4, 0.4, 0.6, 0.6]", "[0.5, 0.5, 1, 1]"]})
        cfg = RunConfig(strategy=StrategyKind.CROP_REFINE)
        box, _ = run_crop(image_64(), "t", mock, cfg, "s")
        assert box.as_list() == pytest.approx([0.5, 0.5, 0.65, 0.65])

    def test_first_failure_is_strategy_error(self):
        mock = MockBackend({TaskKind.REC: "garbage"})
        cfg = RunConfig(strategy=StrategyKind.CROP_REFINE)
        with pytest.raises(StrategyError):
            run_crop(image_64(), "t", mock, cfg, "s")

    def test_second_failure_falls_back(self):
        mock = MockBackend({TaskKind.REC: ["[0.4, 0.4, 0.6, 0.6]", "garbage"]})
        cfg = RunConfig(strategy=StrategyKind.CROP_REFINE)
        box, trace = run_crop(image_64(), "t", mock, cfg, "s")
        assert box == NormBox(0.4, 0.4, 0.6, 0.6)
        assert any("keeping initial" in w for w in trace.warnings)

    def test_crop_request_carries_region(self):
        regions = []

        def rec_reply(request):
            regions.append(request.region)
            return "[0.4, 0.4, 0.6, 0.6]"

        mock = MockBackend({TaskKind.REC: rec_reply})
        cfg = RunConfig(strategy=StrategyKind.CROP_REFINE)
        run_crop(image_64(), "t", mock, cfg, "s")
        assert regions[0] is None
        assert regions[1].as_list() == pytest.approx([0.35, 0.35, 0.65, 0.65])


class TestMapFromRegion:
    def test_unit_box_maps_to_region(self):
        region = NormBox(0.35, 0.35, 0.65, 0.65)
        assert map_from_region(NormBox(0, 0, 1, 1), region) == region

    def test_degenerate_region_rejected(self):
        with pytest.raises(UsageError):
            map_from_region(NormBox(0, 0, 1, 1), NormBox(0.5, 0.1, 0.5, 0.9))

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_round_trip_error_tiny(self, data):
        x = sorted(data.draw(st.tuples(st.floats(0, 0.4), st.floats(0.6, 1))))
        y = sorted(data.draw(st.tuples(st.floats(0, 0.4), st.floats(0.6, 1))))
        region = NormBox(x[0], y[0], x[1], y[1])
        bx = sorted(data.draw(st.tuples(st.floats(0, 1), st.floats(0, 1))))
        by = sorted(data.draw(st.tuples(st.floats(0, 1), st.floats(0, 1))))
        inner = NormBox(bx[0], by[0], bx[1], by[1])
        mapped = map_from_region(inner, region)
        back = [
            (mapped.x1 - region.x1) / region.width,
            (mapped.y1 - region.y1) / region.height,
            (mapped.x2 - region.x1) / region.width,
            (mapped.y2 - region.y1) / region.height,
        ]
        for a, b in zip(back, inner.as_list()):
            assert abs(a - b) <= 1e-9


class TestDraw:
    def test_call_sequence_and_annotation(self):
        images = {}

        def rec_reply(request):
            images["rec_image"] = request.image
            return "[0.1, 0.1, 0.3, 0.3]"

        mock = MockBackend({TaskKind.GDESC: GDESC_REPLY, TaskKind.REC: rec_reply})
        cfg = RunConfig(strategy=StrategyKind.DRAW_BOXES)
        source = image_64()
        _, trace = run_draw(source, "the mug", mock, cfg, "s")
        assert call_tasks(trace) == ["GDESC", "REC"]
        assert images["rec_image"] != source  # boxes were drawn

    def test_rec_prompt_has_no_textual_context(self):
        prompts = {}

        def rec_reply(request):
            prompts["rec"] = request.prompt
            return "[0.1, 0.1, 0.3, 0.3]"

        mock = MockBackend({TaskKind.GDESC: GDESC_REPLY, TaskKind.REC: rec_reply})
        cfg = RunConfig(strategy=StrategyKind.DRAW_BOXES)
        run_draw(image_64(), "the mug", mock, cfg, "s")
        assert "a red mug" not in prompts["rec"]

    def test_empty_gdesc_sends_unannotated_image(self):
        images = {}

        def rec_reply(request):
            images["rec_image"] = request.image
            return "[0.1, 0.1, 0.3, 0.3]"

        mock = MockBackend({TaskKind.GDESC: "", TaskKind.REC: rec_reply})
        cfg = RunConfig(strategy=StrategyKind.DRAW_BOXES)
        source = image_64()
        run_draw(source, "the mug", mock, cfg, "s")
        assert images["rec_image"] == source


class TestChainOfCaption:
    def test_vqa_yes_short_circuits(self):
        mock = MockBackend(
            {
                TaskKind.GDESC: GDESC_REPLY,
                TaskKind.REC: "[0.1, 0.1, 0.3, 0.3]",
                TaskKind.VQA: "Yes",
            }
        )
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION, max_trials=3)
        box, trace = run_chain_of_caption(image_64(), "the mug", mock, cfg, "s")
        assert call_tasks(trace) == ["GDESC", "REC", "VQA"]
        assert trace.count(TaskKind.CAPTION) == 0
        assert box == NormBox(0.1, 0.1, 0.3, 0.3)
        assert trace.terminated_by == "verified"
        assert trace.trials_used == 1

    def test_vqa_no_runs_to_trial_cap(self):
        mock = MockBackend(
            {
                TaskKind.GDESC: GDESC_REPLY,
                TaskKind.REC: "[0.1, 0.1, 0.3, 0.3]",
                TaskKind.VQA: "No",
                TaskKind.CAPTION: "a shiny mug",
            }
        )
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION, max_trials=3)
        box, trace = run_chain_of_caption(image_64(), "the mug", mock, cfg, "s")
        assert trace.count(TaskKind.GDESC) == 1
        assert trace.count(TaskKind.REC) == 3
        assert trace.count(TaskKind.VQA) == 3
        assert trace.count(TaskKind.CAPTION) == 3
        assert len(trace.appended) == 3
        assert trace.terminated_by == "max_trials"
        assert trace.trials_used == 3

    def test_context_accumulates_in_rejection_order(self):
        rec_prompts = []

        def rec_reply(request):
            rec_prompts.append(request.prompt)
            return f"[0.1, 0.1, 0.{2 + len(rec_prompts)}, 0.3]"

        mock = MockBackend(
            {
                TaskKind.GDESC: GDESC_REPLY,
                TaskKind.REC: rec_reply,
                TaskKind.VQA: "No",
                TaskKind.CAPTION: ["first reject", "second reject", "third reject"],
            }
        )
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION, max_trials=3)
        _, trace = run_chain_of_caption(image_64(), "the mug", mock, cfg, "s")
        assert "first reject" not in rec_prompts[0]
        assert "first reject" in rec_prompts[1] and "second reject" not in rec_prompts[1]
        assert rec_prompts[2].index("first reject") < rec_prompts[2].index("second reject")
        assert [c for _, c in trace.appended] == ["first reject", "second reject", "third reject"]

    def test_vqa_parse_failure_counts_as_no(self):
        mock = MockBackend(
            {
                TaskKind.GDESC: GDESC_REPLY,
                TaskKind.REC: "[0.1, 0.1, 0.3, 0.3]",
                TaskKind.VQA: "hard to say",
                TaskKind.CAPTION: "something",
            }
        )
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION, max_trials=2)
        _, trace = run_chain_of_caption(image_64(), "the mug", mock, cfg, "s")
        assert trace.vqa_answers == [False, False]
        assert trace.count(TaskKind.CAPTION) == 2
        assert any("unparseable yes/no" in w for w in trace.warnings)

    def test_rec_failure_consumes_trial_and_keeps_previous(self):
        mock = MockBackend(
            {
                TaskKind.GDESC: GDESC_REPLY,
                TaskKind.REC: ["[0.1, 0.1, 0.3, 0.3]", "garbage", "[0.2, 0.2, 0.4, 0.4]"],
                TaskKind.VQA: "No",
                TaskKind.CAPTION: "cap",
            }
        )
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION, max_trials=3)
        box, trace = run_chain_of_caption(image_64(), "the mug", mock, cfg, "s")
        assert trace.count(TaskKind.REC) == 3
        assert box == NormBox(0.2, 0.2, 0.4, 0.4)
        # trial 2 re-verified the retained box
        assert [b.as_list() for b, _ in trace.appended][:2] == [
            [0.1, 0.1, 0.3, 0.3],
            [0.1, 0.1, 0.3, 0.3],
        ]

    def test_all_rec_failures_is_parse_exhaustion(self):
        mock = MockBackend({TaskKind.GDESC: GDESC_REPLY, TaskKind.REC: "garbage"})
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION, max_trials=3)
        with pytest.raises(StrategyError) as err:
            run_chain_of_caption(image_64(), "the mug", mock, cfg, "s")
        assert err.value.trace.terminated_by == "parse_exhaustion"
        assert err.value.trace.count(TaskKind.REC) == 3
        assert err.value.trace.count(TaskKind.VQA) == 0

    def test_first_yes_matches_grounded_result(self, oracle, scene_image):
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION)
        coc_box, coc_trace = run_chain_of_caption(
            scene_image, "the red square", oracle, cfg, "s1"
        )
        grounded_box, grounded_trace = run_grounded(
            scene_image, "the red square", oracle, RunConfig(strategy=StrategyKind.GROUNDED_DESC), "s1"
        )
        assert coc_box == grounded_box
        assert coc_trace.terminated_by == "verified"
        # byte-identical prompts up to the loop: same digests for GDESC and first REC
        assert [c.digest for c in coc_trace.calls[:2]] == [
            c.digest for c in grounded_trace.calls[:2]
        ]

    def test_oracle_fidelity_zero_loops_to_cap(self, two_object_scene, scene_image):
        backend = OracleBackend(
            {
                "s1": SyntheticOracleConfig(
                    scene=two_object_scene,
                    target="red square",
                    grounding_fidelity=0.0,
                    rec_shrink=0.7,
                    vqa_iou_threshold=0.5,
                )
            }
        )
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION, max_trials=3)
        box, trace = run_chain_of_caption(scene_image, "the red square", backend, cfg, "s1")
        assert trace.terminated_by == "max_trials"
        assert trace.count(TaskKind.REC) == 3
        assert iou(box, NormBox(0.2, 0.2, 0.6, 0.6)) == pytest.approx(0.49)

    def test_expanded_vqa_crop_mode(self):
        regions = []

        def vqa_reply(request):
            regions.append(request.region)
            return "Yes"

        mock = MockBackend(
            {
                TaskKind.GDESC: GDESC_REPLY,
                TaskKind.REC: "[0.4, 0.4, 0.6, 0.6]",
                TaskKind.VQA: vqa_reply,
            }
        )
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION, vqa_crop_mode="expanded")
        run_chain_of_caption(image_64(), "t", mock, cfg, "s")
        assert regions[0].as_list() == pytest.approx([0.35, 0.35, 0.65, 0.65])

    def test_exact_vqa_crop_mode_default(self):
        regions = []

        def vqa_reply(request):
            regions.append(request.region)
            return "Yes"

        mock = MockBackend(
            {
                TaskKind.GDESC: GDESC_REPLY,
                TaskKind.REC: "[0.4, 0.4, 0.6, 0.6]",
                TaskKind.VQA: vqa_reply,
            }
        )
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION)
        run_chain_of_caption(image_64(), "t", mock, cfg, "s")
        assert regions[0].as_list() == pytest.approx([0.4, 0.4, 0.6, 0.6])


class TestDispatchAndTraces:
    def test_dispatch_covers_all_strategies(self, oracle, scene_image):
        for strategy in StrategyKind:
            cfg = RunConfig(strategy=strategy)
            box, trace = run_strategy(scene_image, "the red square", oracle, cfg, "s1")
            assert trace.strategy == strategy.value
            assert trace.final_box == box

    def test_trace_record_is_jsonable(self, oracle, scene_image):
        import json

        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION)
        _, trace = run_strategy(scene_image, "the red square", oracle, cfg, "s1")
        record = trace.to_record()
        assert json.loads(json.dumps(record)) == record
        assert record["final_box"] == [0.2, 0.2, 0.6, 0.6]

    def test_digests_stable_across_runs(self, oracle, scene_image):
        cfg = RunConfig(strategy=StrategyKind.CHAIN_OF_CAPTION)
        _, first = run_strategy(scene_image, "the red square", oracle, cfg, "s1")
        _, second = run_strategy(scene_image, "the red square", oracle, cfg, "s1")
        assert [c.digest for c in first.calls] == [c.digest for c in second.calls]
