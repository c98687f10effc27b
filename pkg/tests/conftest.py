import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xmad import extractor
from xmad.io import (
    RgbImage,
    Sample,
    StructuredPointCloud,
    SynthConfig,
    generate_synthetic_dataset,
)

SMALL_SYNTH = SynthConfig(
    n_train=14,
    n_test_normal=8,
    n_test_anomalous=8,
    grid=12,
    dim=16,
    coupling=0.9,
    anomaly_strength=3.0,
    seed=11,
)


@pytest.fixture(scope="session")
def synth_data():
    return generate_synthetic_dataset(SMALL_SYNTH)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    # expose each phase's outcome so fixtures can report pass/fail lines
    outcome = yield
    rep = outcome.get_result()
    setattr(item, "rep_" + rep.when, rep)


def make_raw_sample(sample_id, seed, rows=4, cols=4, dim=8):
    """A tiny dual-modality sample with raw data plus extracted features.

    Image is 4x the feature grid (4x4 pixel patches); the point grid carries
    a smooth surface with no background so grouping always succeeds.
    """
    rng = np.random.default_rng(seed)
    h, w = 4 * rows, 4 * cols
    pixels = rng.random((h, w, 3)).astype(np.float32)
    gx, gy = np.meshgrid(np.linspace(0, 1, w), np.linspace(0, 1, h))
    z = 0.5 + 0.1 * np.sin(3 * gx) + 0.1 * gy + 0.02 * rng.random((h, w))
    coords = np.stack([gx, gy, z], axis=2).astype(np.float32)
    image = RgbImage(pixels)
    cloud = StructuredPointCloud(coords)

    rgb_spec = extractor.ExtractorSpec("rgb", "synthetic", rows, cols, dim, seed=3)
    pc_spec = extractor.ExtractorSpec("pc", "synthetic", rows, cols, dim, seed=3)
    grouping = extractor.GroupingConfig(n_groups=12, group_size=6, idw_k=3, seed=0)
    return Sample(
        sample_id=sample_id,
        rgb=image,
        pc=cloud,
        rgb_features=extractor.extract_rgb(rgb_spec, image),
        pc_features=extractor.pc_feature_map(pc_spec, cloud, grouping),
        label="normal",
    )


@pytest.fixture(scope="session")
def raw_samples():
    return [make_raw_sample(f"raw_{i}", 100 + i) for i in range(4)]
