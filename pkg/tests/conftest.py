"""Shared fixtures: a small synthetic dataset reused across test modules."""

from __future__ import annotations

import numpy as np
import pytest

from icfusion.core import LabelConfig
from icfusion.dataset import ingest
from icfusion.synthgen import SynthSpec, generate


@pytest.fixture(scope="session")
def labels() -> LabelConfig:
    return LabelConfig.default()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Three intersections per class, 96 px frames; cheap enough for units."""
    spec = SynthSpec(t_per_class=3, f_per_class=3, image_size=96, seed=1)
    return generate(spec, tmp_path_factory.mktemp("tiny_ds"))


@pytest.fixture(scope="session")
def tiny_ingest(tiny_dataset, labels):
    return ingest(tiny_dataset.root, tiny_dataset.annotation_path, labels)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
