import json

import numpy as np
import pytest
import torch

from geowalk.core.run_config import BackboneConfig, TrainConfig
from geowalk.services.catalog import synth_catalog
from geowalk.services.graph import build_bundle
from geowalk.services.manifold import ManifoldSpec
from geowalk.services.prompt_encoder import GeometryPrompt
from geowalk.services.training import build_dataset


@pytest.fixture(autouse=True)
def seeded():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def specs():
    return {
        "euclidean": ManifoldSpec.euclidean(),
        "hyperbolic": ManifoldSpec.hyperbolic(-1.0),
        "spherical": ManifoldSpec.spherical(1.0),
    }


@pytest.fixture
def small_catalog():
    return synth_catalog(seed=3, n=48, n_clusters=2, depth=2, feature_dim=6)


@pytest.fixture
def small_bundle(small_catalog):
    catalog, _ = small_catalog
    return build_bundle(catalog, k=4)


@pytest.fixture
def small_dataset(small_catalog, specs):
    catalog, targets = small_catalog
    generator = torch.Generator().manual_seed(1)
    prompts = {
        kind: GeometryPrompt(spec, catalog.ids, torch.randn(catalog.n, 4, generator=generator, dtype=torch.float64))
        for kind, spec in specs.items()
    }
    return build_dataset(catalog, targets, prompts, val_fraction=0.25, seed=0)


@pytest.fixture
def small_backbone():
    return BackboneConfig(layers=2, model_dim=8, heads=2, adapter_period=1, ffn_dim=16)


@pytest.fixture
def short_training():
    return TrainConfig(epochs=1, batch_size=16, warm_fit_epochs=1, warmup_steps=0)


@pytest.fixture
def desk_config(tmp_path):
    """JSON run config small enough for end-to-end command runs"""
    path = tmp_path / "run.json"
    path.write_text(
        json.dumps(
            {
                "seed": 5,
                "synth": {"n": 60, "n_clusters": 2, "depth": 2, "feature_dim": 8},
                "graph": {"k": 4},
                "prompt": {"hidden_dim": 8, "out_dim": 4, "epochs": 2},
                "backbone": {"layers": 2, "model_dim": 8, "heads": 2, "adapter_period": 1, "ffn_dim": 16},
                "train": {"epochs": 1, "warm_fit_epochs": 1, "batch_size": 16, "warmup_steps": 0},
                "sweep": {"periods": [1, 2]},
            }
        )
    )
    return path
