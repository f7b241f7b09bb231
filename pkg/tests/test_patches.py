import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffpretrain.errors import PatchGridError, ShapeMismatchError
from diffpretrain.volumes import (
    PatchAccumulator, Volume, coverage_map, extract_patch, fuse_patches, plan_patch_grid,
)


@st.composite
def grids(draw):
    volume_shape = tuple(draw(st.integers(1, 20)) for _ in range(3))
    patch_shape = tuple(draw(st.integers(1, n)) for n in volume_shape)
    overlap = draw(st.sampled_from([0.0, 0.25, 0.5]))
    return volume_shape, patch_shape, overlap


class TestPatchGrid:
    @given(grids(), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_fusing_identity_outputs_reproduces_the_volume(self, grid_args, seed):
        volume_shape, patch_shape, overlap = grid_args
        data = np.random.default_rng(seed).standard_normal(volume_shape).astype(np.float32)
        grid = plan_patch_grid(volume_shape, patch_shape, overlap)

        assert coverage_map(grid).min() >= 1
        fused = fuse_patches(grid, [data[grid.slices(o)] for o in grid.origins])
        np.testing.assert_allclose(fused, data, atol=1e-6)

    @given(grids())
    @settings(max_examples=60, deadline=None)
    def test_origins_stay_inside_and_reach_the_far_edge(self, grid_args):
        volume_shape, patch_shape, overlap = grid_args
        grid = plan_patch_grid(volume_shape, patch_shape, overlap)
        origins = np.array(grid.origins)
        assert (origins >= 0).all()
        assert ((origins + np.array(patch_shape)) <= np.array(volume_shape)).all()
        for axis in range(3):
            assert origins[:, axis].max() == volume_shape[axis] - patch_shape[axis]

    def test_strides_follow_overlap(self):
        grid = plan_patch_grid((16, 32, 32), (8, 16, 16), 0.5)
        assert grid.strides == (4, 8, 8)
        assert len(grid) == 3 * 3 * 3

    def test_patch_larger_than_volume(self):
        with pytest.raises(PatchGridError, match="larger"):
            plan_patch_grid((4, 4, 4), (8, 4, 4))

    @pytest.mark.parametrize("overlap", [-0.1, 1.0])
    def test_overlap_out_of_range(self, overlap):
        with pytest.raises(PatchGridError):
            plan_patch_grid((8, 8, 8), (4, 4, 4), overlap)


class TestFusion:
    def test_multichannel_outputs_are_averaged(self):
        grid = plan_patch_grid((1, 1, 3), (1, 1, 2), 0.5)
        outputs = [np.full((2, 1, 1, 2), float(i)) for i in range(len(grid))]
        fused = fuse_patches(grid, outputs)
        assert fused.shape == (2, 1, 1, 3)
        np.testing.assert_allclose(fused[0, 0, 0], [0.0, 0.5, 1.0])

    def test_wrong_number_of_outputs(self):
        grid = plan_patch_grid((4, 4, 4), (2, 2, 2), 0.0)
        with pytest.raises(ShapeMismatchError):
            fuse_patches(grid, [np.zeros((2, 2, 2))])

    def test_accumulator_rejects_channel_change(self):
        grid = plan_patch_grid((2, 2, 4), (2, 2, 2), 0.0)
        accumulator = PatchAccumulator(grid)
        accumulator.add(grid.origins[0], np.zeros((3, 2, 2, 2)))
        with pytest.raises(ShapeMismatchError):
            accumulator.add(grid.origins[1], np.zeros((4, 2, 2, 2)))

    def test_accumulator_needs_every_patch(self):
        grid = plan_patch_grid((2, 2, 4), (2, 2, 2), 0.0)
        accumulator = PatchAccumulator(grid)
        accumulator.add(grid.origins[0], np.zeros((1, 2, 2, 2)))
        with pytest.raises(ShapeMismatchError):
            accumulator.result()


class TestExtractPatch:
    def test_copies_the_window(self):
        v = Volume(data=np.arange(64, dtype=np.float32).reshape(4, 4, 4), spacing=(2.0, 1.0, 1.0))
        patch = extract_patch(v, (1, 2, 0), (2, 2, 3))
        np.testing.assert_array_equal(patch.data, v.data[1:3, 2:4, 0:3])
        assert patch.spacing == v.spacing

    def test_out_of_bounds(self):
        v = Volume(data=np.zeros((4, 4, 4), np.float32))
        with pytest.raises(PatchGridError):
            extract_patch(v, (3, 0, 0), (2, 2, 2))
