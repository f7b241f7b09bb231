import numpy as np
import pytest
import torch

from diffpretrain.errors import CheckpointError, ConditioningError, ConfigError
from diffpretrain.models.schemas import BprConfig
from diffpretrain.networks.bpr import SliceScorer, bpr_losses
from diffpretrain.pipeline.bpr import (
    BprModel, coordinate_map, evaluate_bpr, fit_normalization, load_bpr, model_fingerprint, save_bpr,
    slice_scores, train_bpr,
)
from diffpretrain.storage.checkpoint import save_checkpoint
from diffpretrain.synth.phantom import generate_phantom
from diffpretrain.volumes.volume import Volume, VolumeKind

QUICK = BprConfig(steps=20, progress=False, log_every=10)


@pytest.fixture(scope="module")
def quick_model(images):
    return train_bpr(images, QUICK)


class TestLosses:
    def test_evenly_spaced_increasing_scores(self):
        order, dist = bpr_losses(torch.tensor([0.0, 1.0, 2.0, 3.0, 4.0]))
        assert dist.item() == pytest.approx(0.0)
        reversed_order, _ = bpr_losses(torch.tensor([4.0, 3.0, 2.0, 1.0, 0.0]))
        assert order.item() < reversed_order.item()

    def test_uneven_steps_cost_distance_loss(self):
        _, dist = bpr_losses(torch.tensor([0.0, 1.0, 3.0, 3.5]))
        assert dist.item() > 0.0

    def test_batched_scores(self):
        order, dist = bpr_losses(torch.zeros(4, 6))
        assert order.item() == pytest.approx(4 * 5 * np.log(2.0))
        assert dist.item() == pytest.approx(0.0)

    def test_needs_three_slices(self):
        with pytest.raises(ValueError):
            bpr_losses(torch.zeros(2))


class TestTraining:
    def test_losses_are_recorded(self, quick_model):
        assert len(quick_model.losses) == QUICK.steps
        assert np.isfinite(quick_model.losses).all()
        assert quick_model.score_min < quick_model.score_max

    def test_is_deterministic(self, images, quick_model):
        again = train_bpr(images, QUICK)
        assert again.losses == quick_model.losses
        assert model_fingerprint(again) == model_fingerprint(quick_model)

    def test_needs_two_volumes(self, images):
        with pytest.raises(ConfigError, match="at least 2"):
            train_bpr(images[:1], QUICK)

    def test_volumes_must_hold_enough_slices(self):
        short = [Volume(data=np.zeros((10, 16, 16), np.float32)) for _ in range(2)]
        with pytest.raises(ConfigError, match="slices_per_sample"):
            train_bpr(short, QUICK)

    def test_normalization_uses_percentiles(self, images, quick_model):
        scores = np.concatenate([slice_scores(quick_model, v) for v in images])
        lo, hi = np.percentile(scores, quick_model.config.percentiles)
        assert quick_model.score_min == pytest.approx(lo)
        assert quick_model.score_max == pytest.approx(hi)


class TestCoordinateMap:
    def test_broadcast_and_range(self, images, quick_model):
        coords = coordinate_map(quick_model, images[0])
        assert coords.kind == VolumeKind.COORD
        assert coords.shape == images[0].shape
        assert coords.data.min() >= -1.0 and coords.data.max() <= 1.0
        for z in range(coords.shape[0]):
            assert np.unique(coords.data[z]).size == 1

    def test_rejects_unnormalized_input(self, quick_model):
        raw = Volume(data=np.full((4, 8, 8), 100.0, np.float32))
        with pytest.raises(ConditioningError, match="normalized"):
            coordinate_map(quick_model, raw)

    def test_values_follow_the_fitted_range(self):
        model = BprModel(scorer=SliceScorer(), config=QUICK, score_min=0.0, score_max=4.0)
        np.testing.assert_allclose(model.normalize(np.array([-1.0, 0.0, 2.0, 4.0, 9.0])), [-1, -1, 0, 1, 1])

    def test_fit_normalization_sets_range(self, images):
        model = BprModel(scorer=SliceScorer(), config=QUICK)
        fit_normalization(model, images[:2])
        assert model.score_min < model.score_max


class TestPersistence:
    def test_save_and_load(self, tmp_path, images, quick_model):
        path = save_bpr(quick_model, tmp_path / "bpr")
        loaded = load_bpr(path)
        assert loaded.score_min == quick_model.score_min
        assert loaded.score_max == quick_model.score_max
        np.testing.assert_array_equal(slice_scores(loaded, images[0]), slice_scores(quick_model, images[0]))
        assert model_fingerprint(loaded) == model_fingerprint(quick_model)

    def test_wrong_kind(self, tmp_path):
        save_checkpoint(tmp_path / "other", "probe", {"w": torch.zeros(1)}, config={})
        with pytest.raises(CheckpointError, match="expected 'bpr'"):
            load_bpr(tmp_path / "other")

    def test_missing_normalization_constants(self, tmp_path, quick_model):
        path = save_bpr(quick_model, tmp_path / "bpr")
        tensors = {f"scorer/{k}": v for k, v in quick_model.scorer.state_dict().items()}
        save_checkpoint(path, "bpr", tensors, config=quick_model.config.model_dump())
        with pytest.raises(CheckpointError, match="normalization"):
            load_bpr(path)


def test_evaluation_reports_rank_agreement(quick_model):
    held_out = [generate_phantom(seed) for seed in (100, 101)]
    result = evaluate_bpr(quick_model, held_out)
    assert len(result.per_volume_spearman) == 2
    assert -1.0 <= result.spearman <= 1.0
    assert 0.0 <= result.monotone_fraction <= 1.0
