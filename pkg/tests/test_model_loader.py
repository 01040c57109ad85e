import pytest
import torch

from app.model_loader import (CHECKPOINT_MAGIC, build_model, checkpoint_bytes, load_checkpoint, model_from_bytes,
                              save_checkpoint)
from models.errors import GaotError
from tests.conftest import fitted_model, random_sample, tiny_config


@pytest.fixture
def model(rng):
    samples = [random_sample(rng, 20) for _ in range(2)]
    return fitted_model(tiny_config(scales=(1.0, 1.5)), samples)


class TestCheckpoint:
    def test_bytes_round_trip_is_exact(self, model):
        blob = checkpoint_bytes(model, "desk")
        assert blob.startswith(CHECKPOINT_MAGIC)
        back, profile = model_from_bytes(blob)
        assert profile == "desk"
        assert back.config == model.config
        assert checkpoint_bytes(back, profile) == blob
        for name, tensor in model.state_dict().items():
            assert torch.equal(back.state_dict()[name], tensor), name

    def test_loaded_model_predicts_identically(self, model, rng, tmp_path):
        path = save_checkpoint(model, str(tmp_path / "ck" / "final.gck"))
        back = load_checkpoint(path)
        s = random_sample(rng, 15)
        graph = model.build_graph(s.points)
        assert back.is_normalized
        assert torch.equal(back(s.input_fields, 0.0, 0.0, graph), model(s.input_fields, 0.0, 0.0, graph))

    def test_no_temp_files_left(self, model, tmp_path):
        save_checkpoint(model, str(tmp_path / "a.gck"))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["a.gck"]

    def test_bad_magic(self):
        with pytest.raises(GaotError, match="magic"):
            model_from_bytes(b"PICKLE!!" + bytes(64))

    def test_truncated(self, model):
        with pytest.raises(GaotError):
            model_from_bytes(checkpoint_bytes(model)[:-16])


class TestBuildModel:
    def test_same_seed_same_weights(self):
        a, b = build_model(tiny_config(), 5), build_model(tiny_config(), 5)
        for (name, p), q in zip(a.named_parameters(), b.parameters()):
            assert torch.equal(p, q), name

    def test_does_not_touch_global_generator(self):
        torch.manual_seed(3)
        expected = torch.rand(2)
        torch.manual_seed(3)
        build_model(tiny_config(), 9)
        assert torch.equal(torch.rand(2), expected)

    def test_different_seeds_differ(self):
        a, b = build_model(tiny_config(), 1), build_model(tiny_config(), 2)
        assert not torch.equal(next(a.parameters()), next(b.parameters()))
