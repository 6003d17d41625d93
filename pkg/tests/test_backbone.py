import pytest
import torch

from geowalk.core.errors import DimensionError, NormalizationError
from geowalk.core.run_config import BackboneConfig
from geowalk.services.backbone import (
    MODALITIES,
    HostModel,
    ModalProjection,
    backbone_forward,
    count_trainable,
    freeze_backbone,
    is_stage2_trainable,
    load_host_model,
    parameter_digest,
    replay_accumulate,
    save_host_model,
)
from geowalk.services.geo_moe import GateTrace

DIMS = {"prompt_euclidean": 4, "prompt_hyperbolic": 4, "prompt_spherical": 4, "feature": 6}


def random_inputs(batch, dtype=torch.float32):
    return {m: torch.randn(batch, width, dtype=dtype) + 0.1 for m, width in DIMS.items()}


def make_model(**overrides):
    values = {"layers": 2, "model_dim": 8, "heads": 2, "adapter_period": 1, "ffn_dim": 16}
    values.update(overrides)
    return HostModel(BackboneConfig(**values), DIMS)


class TestPlacement:
    def test_every_fourth_layer(self):
        config = BackboneConfig(layers=8, model_dim=8, heads=2, adapter_period=4, ffn_dim=16)
        assert config.adapter_layers() == [4, 8]
        model = HostModel(config, DIMS)
        assert [i + 1 for i, block in enumerate(model.blocks) if block.adapter is not None] == [4, 8]

    def test_period_longer_than_depth_means_no_adapters(self):
        assert make_model(layers=2, adapter_period=3).adapters() == []

    def test_single_layer_traces_every_token(self):
        model = make_model(layers=1, adapter_period=1)
        assert len(model.adapters()) == 1
        trace = GateTrace()
        model(random_inputs(3), "regression", trace)
        assert len(trace) == 3 * (len(MODALITIES) + 1)

    def test_euclidean_expert_inherits_host_ffn(self):
        model = make_model()
        for block in model.blocks:
            assert torch.equal(block.adapter.experts[0].w1, block.ffn_in.weight)
            assert torch.allclose(block.adapter.experts[0].w2, 3 * block.ffn_out.weight)
            assert torch.allclose(block.adapter.experts[0].b2, 3 * block.ffn_out.bias)


class TestModalProjection:
    def setup_method(self):
        self.proj = ModalProjection({"feature": 3}, 3, modalities=("feature",)).double()

    def test_zero_scale_gives_zero_token(self):
        with torch.no_grad():
            self.proj.alphas["feature"].zero_()
        token = self.proj({"feature": torch.randn(2, 3, dtype=torch.float64)})
        assert torch.equal(token, torch.zeros(2, 1, 3, dtype=torch.float64))

    def test_identity_projection_of_unit_input(self):
        with torch.no_grad():
            self.proj.projections["feature"].weight.copy_(torch.eye(3))
        x = torch.tensor([[0.6, 0.0, 0.8]], dtype=torch.float64)
        assert torch.allclose(self.proj({"feature": x})[:, 0], x, atol=1e-15)

    def test_input_scale_is_removed(self):
        x = torch.randn(4, 3, dtype=torch.float64)
        assert torch.allclose(self.proj({"feature": 2 * x}), self.proj({"feature": x}), atol=1e-15)

    def test_zero_input_is_rejected(self):
        with pytest.raises(NormalizationError):
            self.proj({"feature": torch.zeros(1, 3, dtype=torch.float64)})

    def test_missing_and_mismatched_modalities(self):
        with pytest.raises(DimensionError):
            self.proj({})
        with pytest.raises(DimensionError):
            self.proj({"feature": torch.ones(1, 4, dtype=torch.float64)})


class TestReplay:
    def test_sums_left_to_right(self):
        last = torch.tensor([1.0, 2.0])
        out = replay_accumulate(last, [torch.tensor([0.5, 0.5]), torch.tensor([-1.0, 1.0])])
        assert out.tolist() == [0.5, 3.5]

    def test_single_modality_is_added_exactly(self):
        last, h = torch.randn(3, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)
        assert torch.equal(replay_accumulate(last, [h]), last + h)

    def test_order_does_not_matter(self):
        last = torch.randn(3, 8, dtype=torch.float64)
        hs = [torch.randn(3, 8, dtype=torch.float64) for _ in range(4)]
        assert torch.allclose(replay_accumulate(last, hs), replay_accumulate(last, hs[::-1]), atol=1e-12)

    def test_no_modalities_returns_last(self):
        last = torch.tensor([1.0, 2.0])
        assert torch.equal(replay_accumulate(last, []), last)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            replay_accumulate(torch.zeros(2), [torch.zeros(3)])


class TestForward:
    def test_output_shapes(self):
        model = make_model()
        out = model(random_inputs(5), "classification")
        assert out.hidden.shape == (5, len(MODALITIES) + 1, 8)
        assert out.last.shape == (5, 8)
        assert out.numeric.shape == (5,)
        assert out.logits.shape == (5, 4)

    def test_batch_order_does_not_matter(self):
        model = make_model().double().eval()
        inputs = random_inputs(6, dtype=torch.float64)
        perm = torch.tensor([4, 1, 5, 0, 3, 2])
        with torch.no_grad():
            base = model(inputs, "regression").numeric
            shuffled = model({m: x[perm] for m, x in inputs.items()}, "regression").numeric
        assert torch.allclose(shuffled, base[perm], atol=1e-12)

    def test_unbatched_tokens(self):
        model = make_model()
        hidden, last = backbone_forward(model, torch.randn(5, 8))
        assert hidden.shape == (5, 8)
        assert torch.equal(last, hidden[-1])

    def test_token_width_must_match(self):
        with pytest.raises(DimensionError):
            backbone_forward(make_model(), torch.randn(2, 5, 7))

    def test_unknown_task(self):
        with pytest.raises(ValueError):
            make_model()(random_inputs(2), "ranking")


class TestFreezing:
    def test_trainable_names(self):
        assert is_stage2_trainable("proj.alphas.feature")
        assert is_stage2_trainable("blocks.1.adapter.gate.w_g")
        assert is_stage2_trainable("numeric_head.weight")
        assert not is_stage2_trainable("blocks.0.attn.in_proj_weight")
        assert not is_stage2_trainable("blocks.0.ffn_in.weight")

    def test_freeze_leaves_only_stage2_parameters(self):
        model = make_model()
        total = count_trainable(model)
        trainable = freeze_backbone(model)
        assert all(is_stage2_trainable(name) for name in trainable)
        assert 0 < count_trainable(model) < total
        freeze_backbone(model, frozen=False)
        assert count_trainable(model) == total

    def test_digest_tracks_parameter_changes(self):
        model = make_model()
        names = [n for n, _ in model.named_parameters() if not is_stage2_trainable(n)]
        before = parameter_digest(model, names)
        with torch.no_grad():
            model.blocks[0].adapter.gate.w_g.add_(1.0)
        assert parameter_digest(model, names) == before
        with torch.no_grad():
            model.blocks[0].ffn_in.weight.add_(1.0)
        assert parameter_digest(model, names) != before


def test_checkpoint_round_trip(tmp_path):
    model = make_model().eval()
    inputs = random_inputs(3)
    path = save_host_model(model, tmp_path / "host.json", meta={"epochs": 2})
    loaded, meta = load_host_model(path)
    loaded.eval()
    assert meta["epochs"] == 2
    assert parameter_digest(loaded) == parameter_digest(model)
    with torch.no_grad():
        assert torch.equal(loaded(inputs, "regression").numeric, model(inputs, "regression").numeric)
