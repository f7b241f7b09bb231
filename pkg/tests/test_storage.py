import json

import numpy as np
import pytest
import torch

from diffpretrain.errors import CheckpointError, MissingArtifactError
from diffpretrain.models.schemas import ExtractionPlan
from diffpretrain.storage import FeatureCache, checkpoint_hash, load_checkpoint, read_manifest, save_checkpoint
from diffpretrain.volumes import FeatureVolume

PLAN = ExtractionPlan(levels=[0], level_channels=[2, 4], timesteps=[1])


def _tensors():
    return {
        "model/w": torch.arange(6, dtype=torch.float32).reshape(2, 3),
        "model/b": torch.tensor([1.5], dtype=torch.float64),
        "rng/state": torch.tensor([1, 2, 255], dtype=torch.uint8),
        "count": torch.tensor([7], dtype=torch.int64),
    }


class TestCheckpoint:
    def test_tensors_and_metadata_survive(self, tmp_path):
        save_checkpoint(tmp_path / "ckpt", "denoiser", _tensors(), config={"levels": 2},
                        schedule={"T": 10}, step=4, extra={"conditioned": False})
        checkpoint = load_checkpoint(tmp_path / "ckpt", expected_kind="denoiser")
        for name, tensor in _tensors().items():
            assert checkpoint.tensors[name].dtype == tensor.dtype
            assert torch.equal(checkpoint.tensors[name], tensor)
        assert checkpoint.manifest.step == 4
        assert checkpoint.manifest.schedule == {"T": 10}
        assert set(checkpoint.group("model")) == {"w", "b"}

    def test_manifest_lists_offsets(self, tmp_path):
        save_checkpoint(tmp_path / "ckpt", "bpr", _tensors(), config={})
        manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
        entries = [manifest["tensors"][name] for name in sorted(manifest["tensors"])]
        offsets = [entry["offset"] for entry in entries]
        assert offsets[0] == 0
        assert all(a["offset"] + a["nbytes"] == b["offset"] for a, b in zip(entries, entries[1:]))

    def test_wrong_kind(self, tmp_path):
        save_checkpoint(tmp_path / "ckpt", "bpr", _tensors(), config={})
        with pytest.raises(CheckpointError, match="expected 'denoiser'"):
            load_checkpoint(tmp_path / "ckpt", expected_kind="denoiser")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_checkpoint(tmp_path / "nothing")

    def test_truncated_payload(self, tmp_path):
        path = save_checkpoint(tmp_path / "ckpt", "bpr", _tensors(), config={})
        payload = path / "tensors.bin"
        payload.write_bytes(payload.read_bytes()[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_corrupt_manifest(self, tmp_path):
        path = save_checkpoint(tmp_path / "ckpt", "bpr", _tensors(), config={})
        (path / "manifest.json").write_text("{", encoding="utf-8")
        with pytest.raises(CheckpointError):
            read_manifest(path)

    def test_hash_ignores_run_info(self, tmp_path):
        a = save_checkpoint(tmp_path / "a", "bpr", _tensors(), config={}, run_info={"wall_seconds": 1.0})
        b = save_checkpoint(tmp_path / "b", "bpr", _tensors(), config={}, run_info={"wall_seconds": 2.0})
        assert checkpoint_hash(a) == checkpoint_hash(b)
        c = save_checkpoint(tmp_path / "c", "bpr", _tensors(), config={}, step=1)
        assert checkpoint_hash(a) != checkpoint_hash(c)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(CheckpointError, match="dtype"):
            save_checkpoint(tmp_path / "ckpt", "bpr", {"x": torch.zeros(1, dtype=torch.float16)}, config={})


class TestFeatureCache:
    def _features(self):
        data = np.random.default_rng(0).standard_normal((2, 3, 4, 5)).astype(np.float32)
        return FeatureVolume(data=data, spacing=(2.0, 1.0, 1.0), plan=PLAN, backbone="abc")

    def test_save_then_load(self, tmp_path):
        cache = FeatureCache(tmp_path)
        key = FeatureCache.key("abc", "volume", PLAN)
        assert key not in cache and cache.load(key) is None
        cache.save(key, self._features())
        loaded = cache.load(key)
        assert key in cache
        np.testing.assert_array_equal(loaded.data, self._features().data)
        assert loaded.plan == PLAN and loaded.spacing == (2.0, 1.0, 1.0)

    def test_key_depends_on_every_input(self):
        base = FeatureCache.key("abc", "volume", PLAN)
        assert base == FeatureCache.key("abc", "volume", PLAN)
        assert base != FeatureCache.key("abd", "volume", PLAN)
        assert base != FeatureCache.key("abc", "other", PLAN)
        assert base != FeatureCache.key("abc", "volume", PLAN.model_copy(update={"timesteps": [2]}))
        assert base != FeatureCache.key("abc", "volume", PLAN, conditioning="bpr")

    def test_unreadable_entry_is_a_miss(self, tmp_path):
        cache = FeatureCache(tmp_path)
        key = FeatureCache.key("abc", "volume", PLAN)
        entry = cache.save(key, self._features())
        (entry / "features.bin").write_bytes(b"\x00" * 5)
        assert cache.load(key) is None

    def test_channels_must_match_plan(self):
        with pytest.raises(ValueError):
            FeatureVolume(data=np.zeros((3, 2, 2, 2), np.float32), plan=PLAN)
