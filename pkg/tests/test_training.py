import math

import numpy as np
import pandas as pd
import pytest
import torch

from geowalk.core.errors import CatalogValidationError, ConfigurationError, EmptyInputError
from geowalk.core.run_config import PromptConfig, RunConfig, TrainConfig
from geowalk.services.prompt_encoder import (
    GeometryPrompt,
    build_prompt_model,
    encode,
    load_split,
    save_split,
    stage1_train,
)
from geowalk.services.training import (
    PREDICTION_COLUMNS,
    TRACE_COLUMNS,
    SweepRun,
    build_dataset,
    build_host_model,
    combined_loss,
    predict,
    score_predictions,
    smooth_l1,
    stage2_train,
    steps_to_threshold,
    sweep_summary,
    train_host,
)


def loss_trace(values, start=1):
    return pd.DataFrame(
        [{"step": start + i, "task": "combined", "metric": "loss", "value": v} for i, v in enumerate(values)],
        columns=TRACE_COLUMNS,
    )


class TestSmoothL1:
    def test_examples(self):
        assert float(smooth_l1(0.0, 0.0)) == 0.0
        assert float(smooth_l1(0.5, 0.0)) == pytest.approx(0.125)
        assert float(smooth_l1(3.0, 0.0)) == pytest.approx(2.5)

    def test_continuous_at_beta(self):
        below = float(smooth_l1(2.0 - 1e-9, 0.0, beta=2.0))
        above = float(smooth_l1(2.0 + 1e-9, 0.0, beta=2.0))
        assert below == pytest.approx(above, abs=1e-8)

    def test_rejects_non_positive_beta(self):
        with pytest.raises(ConfigurationError):
            smooth_l1(1.0, 0.0, beta=0.0)


class TestCombinedLoss:
    def setup_method(self):
        self.logits = torch.tensor([[2.0, 0.5], [0.1, 1.0]], dtype=torch.float64)
        self.classes = torch.tensor([0, 1])
        self.pred = torch.tensor([0.2, 2.0], dtype=torch.float64)
        self.target = torch.tensor([0.0, 0.0], dtype=torch.float64)

    def test_affine_in_lambda(self):
        values = [float(combined_loss(self.logits, self.classes, self.pred, self.target, lam)) for lam in (0.0, 1.0, 2.0)]
        assert values[2] - values[1] == pytest.approx(values[1] - values[0], abs=1e-12)
        regression = float(smooth_l1(self.pred, self.target).mean())
        assert values[1] - values[0] == pytest.approx(regression, abs=1e-12)

    def test_absent_task_adds_nothing(self):
        numeric_only = float(combined_loss(None, None, self.pred, self.target, lam=0.5))
        assert numeric_only == pytest.approx(0.5 * float(smooth_l1(self.pred, self.target).mean()))
        class_only = float(combined_loss(self.logits, self.classes, None, None))
        assert class_only == pytest.approx(float(torch.nn.functional.cross_entropy(self.logits, self.classes)))

    def test_no_tasks(self):
        with pytest.raises(EmptyInputError):
            combined_loss(None, None, None, None)


class TestDataset:
    def test_shapes_and_split(self, small_dataset, small_catalog):
        catalog, _ = small_catalog
        assert small_dataset.n == catalog.n
        assert small_dataset.modality_dims == {
            "prompt_euclidean": 4,
            "prompt_hyperbolic": 4,
            "prompt_spherical": 4,
            "feature": catalog.feature_dim,
        }
        assert len(small_dataset.train_idx) + len(small_dataset.val_idx) == catalog.n
        assert len(small_dataset.val_idx) == 12

    def test_prompt_ids_must_match(self, small_catalog, specs):
        catalog, targets = small_catalog
        prompts = {
            kind: GeometryPrompt(spec, list(reversed(catalog.ids)), torch.zeros(catalog.n, 2))
            for kind, spec in specs.items()
        }
        with pytest.raises(CatalogValidationError):
            build_dataset(catalog, targets, prompts, 0.25, 0)

    def test_stage_one_split_is_reused(self, tmp_path, small_catalog, small_bundle):
        catalog, targets = small_catalog
        config = PromptConfig(hidden_dim=4, out_dim=2, epochs=1, val_fraction=0.1)
        model = build_prompt_model(small_bundle, catalog.feature_dim, config, seed=3)
        features = torch.from_numpy(catalog.features).float()
        stage1 = stage1_train(model, small_bundle, features, torch.from_numpy(targets.regression).float(), config, seed=3)
        split = load_split(save_split(catalog.ids, stage1.train_idx, stage1.val_idx, tmp_path / "split.csv"), catalog.ids)
        prompts = {kind: encode(model.encoders[kind], features, graph, catalog.ids) for kind, graph in small_bundle.items()}
        dataset = build_dataset(catalog, targets, prompts, 0.5, 0, split)
        assert np.array_equal(dataset.val_idx, stage1.val_idx)
        assert not set(dataset.val_idx) & set(stage1.train_idx)

    def test_empty_validation_split(self, small_catalog, specs):
        catalog, targets = small_catalog
        prompts = {kind: GeometryPrompt(spec, catalog.ids, torch.zeros(catalog.n, 2)) for kind, spec in specs.items()}
        with pytest.raises(CatalogValidationError):
            build_dataset(catalog, targets, prompts, 0.25, 0, (np.arange(catalog.n), np.array([], dtype=np.int64)))

    def test_missing_geometry(self, small_catalog, specs):
        catalog, targets = small_catalog
        prompts = {"euclidean": GeometryPrompt(specs["euclidean"], catalog.ids, torch.zeros(catalog.n, 2))}
        with pytest.raises(CatalogValidationError):
            build_dataset(catalog, targets, prompts, 0.25, 0)


class TestStageTwo:
    def test_zero_epochs_only_evaluates(self, small_dataset, small_backbone):
        model = build_host_model(small_dataset, small_backbone, seed=0)
        result = stage2_train(model, small_dataset, TrainConfig(epochs=0))
        assert result.steps == 0
        assert result.frozen_unchanged
        assert set(result.trace["step"]) == {0}
        assert set(result.metrics) == {"val_r2", "val_f1", "val_loss"}

    def test_full_training_unfreezes_backbone(self, small_dataset, small_backbone):
        frozen = stage2_train(build_host_model(small_dataset, small_backbone, seed=0), small_dataset, TrainConfig(epochs=0))
        full = stage2_train(
            build_host_model(small_dataset, small_backbone, seed=0),
            small_dataset,
            TrainConfig(epochs=0, frozen_attention=False),
        )
        assert full.trainable_parameters > frozen.trainable_parameters
        assert all(p.requires_grad for p in full.model.parameters())

    def test_train_host_keeps_backbone_frozen(self, small_dataset, small_backbone, short_training):
        run_config = RunConfig(backbone=small_backbone, train=short_training)
        result = train_host(small_dataset, run_config)
        assert result.frozen_unchanged
        assert result.steps == math.ceil(len(small_dataset.train_idx) / short_training.batch_size)
        assert list(result.trace.columns) == TRACE_COLUMNS
        assert "warm_fit" in set(result.trace["task"])
        assert math.isfinite(result.metrics["val_loss"])

    def test_same_seed_same_trace(self, small_dataset, small_backbone, short_training):
        run_config = RunConfig(backbone=small_backbone, train=short_training)
        first = train_host(small_dataset, run_config).trace
        second = train_host(small_dataset, run_config).trace
        pd.testing.assert_frame_equal(first, second)

    def test_too_many_classes_for_head(self, small_dataset, small_backbone):
        model = build_host_model(small_dataset, small_backbone, seed=0)
        small_dataset.classes = np.full(small_dataset.n, 7)
        with pytest.raises(ConfigurationError):
            stage2_train(model, small_dataset, TrainConfig(epochs=0))

    def test_predict_columns(self, small_dataset, small_backbone):
        model = build_host_model(small_dataset, small_backbone, seed=0)
        frame = predict(model, small_dataset, small_dataset.val_idx)
        assert list(frame.columns) == PREDICTION_COLUMNS
        assert frame["id"].tolist() == [small_dataset.ids[i] for i in small_dataset.val_idx]
        assert frame["class_pred"].between(0, small_backbone.vocabulary - 1).all()


class TestScoring:
    def test_perfect_predictions(self):
        frame = pd.DataFrame(
            {
                "regression_target": [1.0, 2.0, 4.0],
                "regression_pred": [1.0, 2.0, 4.0],
                "class_target": [0, 1, 1],
                "class_pred": [0, 1, 1],
            }
        )
        assert score_predictions(frame) == {"r2": 1.0, "f1": 1.0}

    def test_constant_targets_give_nan_r2(self):
        frame = pd.DataFrame(
            {"regression_target": [1.0, 1.0], "regression_pred": [1.0, 2.0], "class_target": [0, 0], "class_pred": [0, 0]}
        )
        assert math.isnan(score_predictions(frame)["r2"])


class TestSweep:
    def test_steps_to_threshold(self):
        trace = loss_trace([3.0, 1.5, 0.9, 1.2])
        assert steps_to_threshold(trace, 1.0) == 3
        assert steps_to_threshold(trace, 3.0) == 1
        assert steps_to_threshold(trace, 0.1) is None

    def test_summary_defaults_to_worst_final_loss(self):
        runs = {
            1: SweepRun(1, [1, 2], loss_trace([2.0, 1.0, 0.5]), {"val_loss": 0.5}, 100),
            2: SweepRun(2, [2], loss_trace([2.0, 1.5, 0.8]), {"val_loss": 0.8}, 60),
            4: SweepRun(4, [], error="boom"),
        }
        summary = sweep_summary(runs)
        assert summary["period"].tolist() == [1, 2, 4]
        assert summary["threshold"].iloc[0] == 0.8
        assert summary["steps_to_threshold"].iloc[0] == 3
        assert summary["steps_to_threshold"].iloc[1] == 3
        assert summary["adapter_layers"].tolist() == ["1 2", "2", ""]
        assert summary["error"].iloc[2] == "boom"

    def test_summary_with_explicit_threshold(self):
        runs = {1: SweepRun(1, [1], loss_trace([2.0, 1.0, 0.5]))}
        assert sweep_summary(runs, threshold=1.0)["steps_to_threshold"].tolist() == [2]
