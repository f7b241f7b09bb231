import numpy as np
import pytest

from diffpretrain.errors import MissingArtifactError, ShapeMismatchError, VolumeFormatError
from diffpretrain.volumes import (
    Volume, VolumeKind, is_normalized, load_volume, normalize_intensity, resample, save_volume, volume_hash,
)


def _linear_field(shape, spacing):
    zz, yy, xx = np.meshgrid(*(np.arange(n) * s for n, s in zip(shape, spacing)), indexing="ij")
    return (0.5 * zz + 2.0 * yy - xx).astype(np.float32)


class TestV3dFormat:
    def test_image_and_label_survive_disk(self, tmp_path):
        rng = np.random.default_rng(3)
        image = Volume(data=rng.standard_normal((3, 4, 5)).astype(np.float32), spacing=(2.0, 1.0, 0.5))
        labels = Volume(data=rng.integers(0, 8, (3, 4, 5)).astype(np.uint8), kind=VolumeKind.LABEL)
        save_volume(image, tmp_path / "image.v3d")
        save_volume(labels, tmp_path / "labels.v3d")

        loaded = load_volume(tmp_path / "image.v3d")
        assert loaded.spacing == (2.0, 1.0, 0.5)
        assert loaded.kind == VolumeKind.IMAGE
        np.testing.assert_array_equal(loaded.data, image.data)
        assert load_volume(tmp_path / "labels.v3d").data.dtype == np.uint8

    def test_header_is_one_json_line(self, tmp_path):
        save_volume(Volume(data=np.zeros((2, 2, 2), np.float32)), tmp_path / "v.v3d")
        header, _, payload = (tmp_path / "v.v3d").read_bytes().partition(b"\n")
        assert b'"shape": [2, 2, 2]' in header
        assert len(payload) == 8 * 4

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_volume(tmp_path / "absent.v3d")

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "v.v3d"
        save_volume(Volume(data=np.zeros((2, 3, 4), np.float32)), path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(VolumeFormatError, match="payload size"):
            load_volume(path)

    def test_garbage_header(self, tmp_path):
        path = tmp_path / "v.v3d"
        path.write_bytes(b"not json\n\x00\x00")
        with pytest.raises(VolumeFormatError):
            load_volume(path)

    def test_unknown_dtype(self, tmp_path):
        path = tmp_path / "v.v3d"
        path.write_bytes(b'{"shape": [1, 1, 1], "spacing": [1, 1, 1], "dtype": "f16", "kind": "image"}\n\x00\x00')
        with pytest.raises(VolumeFormatError, match="dtype"):
            load_volume(path)

    def test_label_ids_must_fit_a_byte(self, tmp_path):
        labels = Volume(data=np.full((1, 1, 2), 300, dtype=np.int64), kind=VolumeKind.LABEL)
        with pytest.raises(VolumeFormatError):
            save_volume(labels, tmp_path / "labels.v3d")

    def test_labels_load_back_as_bytes(self, tmp_path):
        labels = Volume(data=np.array([[[0, 3], [7, 255]]], dtype=np.int64), kind=VolumeKind.LABEL)
        save_volume(labels, tmp_path / "labels.v3d")
        loaded = load_volume(tmp_path / "labels.v3d")
        assert loaded.data.dtype == np.uint8
        np.testing.assert_array_equal(loaded.data, labels.data)

    def test_hash_tracks_content(self):
        a = Volume(data=np.zeros((2, 2, 2), np.float32))
        b = Volume(data=np.zeros((2, 2, 2), np.float32))
        c = Volume(data=np.ones((2, 2, 2), np.float32))
        assert volume_hash(a) == volume_hash(b)
        assert volume_hash(a) != volume_hash(c)


class TestVolumeModel:
    def test_rejects_non_3d(self):
        with pytest.raises(ValueError):
            Volume(data=np.zeros((4, 4)))

    def test_labels_must_be_integer(self):
        with pytest.raises(ValueError):
            Volume(data=np.zeros((2, 2, 2), np.float32), kind=VolumeKind.LABEL)

    def test_spacing_must_be_positive(self):
        with pytest.raises(ValueError):
            Volume(data=np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


class TestResample:
    def test_linear_field_is_reproduced(self):
        shape, spacing = (5, 6, 7), (2.0, 2.0, 2.0)
        v = Volume(data=_linear_field(shape, spacing), spacing=spacing)
        out = resample(v, (1.0, 1.0, 1.0))
        assert out.shape == (10, 12, 14)
        assert out.spacing == (1.0, 1.0, 1.0)
        # new voxel i sits at i mm; past the last old voxel the edge value repeats
        inside = tuple(slice(0, (n - 1) * int(s) + 1) for n, s in zip(shape, spacing))
        expected = _linear_field(out.shape, out.spacing)
        np.testing.assert_allclose(out.data[inside], expected[inside], atol=1e-4)

    def test_downsampled_ramp_keeps_the_stated_pitch(self):
        ramp = np.broadcast_to(np.arange(8, dtype=np.float32)[:, None, None], (8, 2, 2)).copy()
        out = resample(Volume(data=ramp), (2.0, 1.0, 1.0))
        assert out.shape == (4, 2, 2)
        np.testing.assert_allclose(out.data[:, 0, 0], [0.0, 2.0, 4.0, 6.0], atol=1e-6)

    @pytest.mark.parametrize("target", [(2.0, 1.0, 0.5), (0.7, 1.3, 1.0), (1.0, 1.0, 3.0)])
    def test_constant_field_stays_constant(self, target):
        v = Volume(data=np.full((6, 7, 8), 0.5, np.float32), spacing=(1.0, 1.0, 2.0))
        out = resample(v, target)
        np.testing.assert_allclose(out.data, 0.5, atol=1e-6)

    def test_labels_keep_their_ids(self):
        rng = np.random.default_rng(0)
        labels = Volume(data=rng.integers(0, 4, (4, 6, 6)).astype(np.uint8), spacing=(2.0, 1.0, 1.0),
                        kind=VolumeKind.LABEL)
        out = resample(labels, (1.0, 2.0, 2.0))
        assert out.shape == (8, 3, 3)
        assert out.data.dtype == np.uint8
        assert set(np.unique(out.data)) <= set(np.unique(labels.data))

    def test_same_spacing_copies(self):
        v = Volume(data=np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        out = resample(v, v.spacing)
        np.testing.assert_array_equal(out.data, v.data)

    def test_empty_axis(self):
        v = Volume(data=np.zeros((1, 4, 4), np.float32))
        with pytest.raises(ShapeMismatchError):
            resample(v, (4.0, 1.0, 1.0))


class TestNormalize:
    def test_window_maps_to_unit_range(self):
        v = Volume(data=np.array([-1000.0, -160.0, 40.0, 240.0, 3000.0], np.float32).reshape(1, 1, 5))
        out = normalize_intensity(v, (-160.0, 240.0))
        np.testing.assert_allclose(out.data.ravel(), [-1.0, -1.0, 0.0, 1.0, 1.0], atol=1e-6)
        assert is_normalized(out)

    def test_unnormalized_and_label_volumes(self):
        assert not is_normalized(Volume(data=np.full((1, 1, 1), 2.0, np.float32)))
        assert not is_normalized(Volume(data=np.zeros((1, 1, 1), np.uint8), kind=VolumeKind.LABEL))

    def test_bad_window(self):
        with pytest.raises(ValueError):
            normalize_intensity(Volume(data=np.zeros((1, 1, 1))), (1.0, 1.0))
