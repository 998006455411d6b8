import numpy as np
import pytest
import torch
from scipy import stats

from crfgan.errors import GeometryError
from crfgan.subvolume import (
    GridGeometry,
    SubVolumeSelector,
    extract_embedding_subset,
    extract_voxel_subvolume,
    sample_offset,
    tiling_selectors,
)
from crfgan.volume import Volume3D


def geom(d=16, c=4, s=4):
    return GridGeometry((d * s,) * 3, (d,) * 3, s, c)


def test_geometry_validation():
    with pytest.raises(GeometryError):
        GridGeometry((64, 64, 64), (16, 16, 16), 4, 17)
    with pytest.raises(GeometryError):
        GridGeometry((64, 64, 60), (16, 16, 16), 4, 4)
    with pytest.raises(GeometryError):
        GridGeometry((16, 16, 16), (16, 16, 16), 1, 4)
    assert GridGeometry.for_resolution(64).extent == 4


def test_full_extent_only_offset_zero():
    g = geom(c=16)
    r = np.random.default_rng(0)
    assert {sample_offset(g, r).offset for _ in range(100)} == {0}


def test_offsets_uniform():
    g = geom(c=4)
    r = np.random.default_rng(0)
    draws = np.array([sample_offset(g, r).offset for _ in range(100_000)])
    assert draws.min() == 0 and draws.max() == 12
    counts = np.bincount(draws, minlength=13)
    assert stats.chisquare(counts).pvalue > 0.01


def test_offsets_deterministic():
    g = geom()
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_offset(g, r1).offset for _ in range(50)] == [sample_offset(g, r2).offset for _ in range(50)]


def test_voxel_slab_indices(rng):
    g = geom()
    v = Volume3D(rng.normal(size=(64, 64, 64)))
    slab = extract_voxel_subvolume(v, SubVolumeSelector(3, g))
    assert slab.shape == (16, 64, 64)
    assert slab == Volume3D(v.voxels[12:28])


def test_full_extent_is_identity(rng):
    g = geom(c=16)
    v = Volume3D(rng.normal(size=(64, 64, 64)))
    assert extract_voxel_subvolume(v, SubVolumeSelector(0, g)) == v
    a = torch.randn(2, 8, 16, 16, 16)
    assert torch.equal(extract_embedding_subset(a, SubVolumeSelector(0, g)), a)


def test_copy_semantics(rng):
    g = geom()
    v = Volume3D(rng.normal(size=(64, 64, 64)))
    slab = extract_voxel_subvolume(v, SubVolumeSelector(0, g))
    slab.voxels[:] = 0
    assert v.voxels[:16].any()
    a = torch.randn(1, 2, 16, 16, 16)
    sub = extract_embedding_subset(a, SubVolumeSelector(0, g))
    sub.zero_()
    assert a[:, :, :4].abs().sum() > 0


def test_embedding_slab_indices():
    g = geom()
    a = torch.arange(16.0).reshape(1, 1, 16, 1, 1).expand(1, 1, 16, 16, 16)
    sub = extract_embedding_subset(a, SubVolumeSelector(5, g))
    assert sub[0, 0, :, 0, 0].tolist() == [5.0, 6.0, 7.0, 8.0]


def test_tiling_partition_reconstructs(rng):
    g = geom()
    v = Volume3D(rng.normal(size=(64, 64, 64)))
    slabs = [extract_voxel_subvolume(v, s).voxels for s in tiling_selectors(g)]
    assert Volume3D(np.concatenate(slabs, axis=0)) == v


def test_voxel_window_is_scaled_embedding_window():
    g = geom()
    depth_of_voxel = torch.arange(64).reshape(1, 1, 64, 1, 1).expand(1, 1, 64, 64, 64)
    embed_index = torch.arange(16).reshape(1, 1, 16, 1, 1).expand(1, 1, 16, 16, 16)
    for r in range(g.n_offsets):
        sel = SubVolumeSelector(r, g)
        vox = extract_voxel_subvolume(depth_of_voxel, sel)[0, 0, :, 0, 0]
        emb = extract_embedding_subset(embed_index, sel)[0, 0, :, 0, 0]
        assert torch.equal(vox // 4, emb.repeat_interleave(4))


def test_shape_mismatch():
    g = geom()
    with pytest.raises(GeometryError):
        extract_voxel_subvolume(Volume3D(np.zeros((32, 32, 32))), SubVolumeSelector(0, g))
    with pytest.raises(GeometryError):
        extract_embedding_subset(torch.zeros(1, 1, 8, 8, 8), SubVolumeSelector(0, g))
    with pytest.raises(GeometryError):
        tiling_selectors(geom(c=3))
