import json
import struct

import numpy as np
import pytest
from scipy import stats

from crfgan.errors import FormatError, IntegrityError, ParameterError
from crfgan.volume import (
    PhantomSpec,
    Volume3D,
    load_volume,
    make_phantom,
    meta_path_for,
    normalize_intensity,
    phantom_layout,
    save_volume,
)


def test_zero_volume_roundtrip(tmp_path):
    p = tmp_path / "z.raw"
    save_volume(Volume3D(np.zeros((64, 64, 64))), p)
    v = load_volume(p)
    assert v.shape == (64, 64, 64)
    assert not v.voxels.any()


def test_byte_length_mismatch_is_integrity_error(tmp_path):
    p = tmp_path / "v.raw"
    save_volume(Volume3D(np.zeros((64, 64, 64))), p)
    p.write_bytes(np.zeros(64 * 64 * 63, dtype="<f4").tobytes())
    with pytest.raises(IntegrityError):
        load_volume(p)


def test_missing_or_corrupt_sidecar(tmp_path):
    p = tmp_path / "v.raw"
    p.write_bytes(np.zeros(8, dtype="<f4").tobytes())
    with pytest.raises(FormatError):
        load_volume(p)
    meta_path_for(p).write_text("{not json")
    with pytest.raises(FormatError):
        load_volume(p)
    meta_path_for(p).write_text(json.dumps({"shape": [2, 2, 2]}))
    with pytest.raises(FormatError):
        load_volume(p)


def test_raw_size_and_layout(tmp_path):
    p = tmp_path / "s.raw"
    save_volume(Volume3D(np.zeros((8, 8, 8))), p)
    assert p.stat().st_size == 2048

    arr = np.zeros((4, 5, 6), dtype=np.float32)
    arr[1, 2, 3] = 1.0
    save_volume(Volume3D(arr), p)
    raw = p.read_bytes()
    off = ((1 * 5 + 2) * 6 + 3) * 4
    assert raw[off : off + 4] == struct.pack("<f", 1.0)
    assert raw.count(b"\x00\x00\x80\x3f") == 1


def test_sidecar_keys(tmp_path):
    p = tmp_path / "s.raw"
    save_volume(Volume3D(np.zeros((2, 3, 4))), p)
    meta = json.loads(meta_path_for(p).read_text())
    assert meta == {
        "shape": [2, 3, 4],
        "dtype": "float32",
        "byte_order": "little-endian",
        "layout": "row-major",
        "intensity_range": [-1.0, 1.0],
    }


def test_roundtrip_bit_identical_random(tmp_path, rng):
    for i in range(100):
        shape = tuple(rng.integers(1, 9, size=3))
        v = Volume3D(rng.uniform(-1, 1, size=shape).astype(np.float32))
        p = tmp_path / f"r{i}.raw"
        save_volume(v, p)
        assert load_volume(p).voxels.tobytes() == v.voxels.tobytes()


class TestNormalize:
    def test_endpoints_and_midpoint(self):
        v = normalize_intensity(np.array([[[10.0, 30.0, 20.0]]]), 10.0, 30.0)
        assert v.voxels.ravel().tolist() == [-1.0, 1.0, 0.0]

    def test_clamp(self):
        assert normalize_intensity(np.array([[[35.0, -100.0]]]), 10.0, 30.0).voxels.ravel().tolist() == [1.0, -1.0]

    def test_bad_range(self):
        with pytest.raises(ParameterError):
            normalize_intensity(np.zeros((1, 1, 1)), 1.0, 1.0)

    def test_idempotent_on_normalized(self, rng):
        x = rng.uniform(-1, 1, size=(4, 4, 4)).astype(np.float32)
        once = normalize_intensity(x, -1.0, 1.0)
        twice = normalize_intensity(once.voxels, -1.0, 1.0)
        assert once == twice
        np.testing.assert_allclose(once.voxels, x, atol=1e-7)


class TestPhantom:
    def test_zero_radius_is_background(self):
        v = make_phantom(PhantomSpec(shape=(16, 16, 16), radius_range=(0.0, 0.0), background=-1.0))
        assert np.all(v.voxels == -1.0)

    def test_deterministic(self):
        spec = PhantomSpec(shape=(16, 16, 16), seed=42)
        assert make_phantom(spec) == make_phantom(spec)
        assert make_phantom(spec) != make_phantom(PhantomSpec(shape=(16, 16, 16), seed=43))

    def test_range(self):
        v = make_phantom(PhantomSpec(shape=(24, 24, 24), seed=3))
        assert v.voxels.min() >= -1.0 and v.voxels.max() <= 1.0
        assert v.voxels.max() > -1.0  # something was drawn

    def test_radius_beyond_extent_rejected(self):
        with pytest.raises(ParameterError):
            make_phantom(PhantomSpec(radius_range=(0.5, 1.5)))

    def test_center_distribution_uniform(self):
        centers = np.concatenate(
            [phantom_layout(PhantomSpec(shape=(32, 32, 32), seed=s)).centers for s in range(1000)]
        )
        for axis in range(3):
            counts, _ = np.histogram(centers[:, axis], bins=8, range=(0, 32))
            assert stats.chisquare(counts).pvalue > 0.01
