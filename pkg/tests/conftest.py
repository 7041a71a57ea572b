from __future__ import annotations

import numpy as np
import pytest

from captionchain.geometry import ImageSize, NormBox
from captionchain.imaging import RasterImage, SceneObject, SceneSpec, render_scene
from captionchain.oracle import OracleBackend, SyntheticOracleConfig


@pytest.fixture
def two_object_scene() -> SceneSpec:
    return SceneSpec(
        canvas=ImageSize(128, 128),
        background=(28, 28, 32),
        objects=(
            SceneObject("red square", (210, 50, 45), NormBox(0.2, 0.2, 0.6, 0.6)),
            SceneObject("blue rectangle", (55, 95, 215), NormBox(0.7, 0.1, 0.9, 0.5)),
        ),
    )


@pytest.fixture
def scene_image(two_object_scene) -> RasterImage:
    return render_scene(two_object_scene)


@pytest.fixture
def oracle(two_object_scene) -> OracleBackend:
    return OracleBackend(
        {"s1": SyntheticOracleConfig(scene=two_object_scene, target="red square")}
    )


def make_oracle(scene: SceneSpec, target: str, **knobs) -> OracleBackend:
    return OracleBackend({"s1": SyntheticOracleConfig(scene=scene, target=target, **knobs)})


@pytest.fixture
def blank_image() -> RasterImage:
    return RasterImage(np.zeros((96, 96, 3), dtype=np.uint8))
