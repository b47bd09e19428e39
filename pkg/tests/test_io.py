"""Tensor file format and measurement-set serialization."""

import numpy as np
import pytest

from sgdnet import tensorio
from sgdnet.operators import MeasurementSet


class TestTensorFiles:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for shape in [(5,), (3, 4), (2, 3, 4), ()]:
            a = rng.standard_normal(shape)
            p = tmp_path / "t.f64"
            tensorio.save_tensor(p, a)
            b = tensorio.load_tensor(p)
            assert b.shape == a.shape
            np.testing.assert_array_equal(a, b)

    def test_header_mismatch_rejected(self, tmp_path):
        p = tmp_path / "t.f64"
        tensorio.save_tensor(p, np.zeros(4))
        (tmp_path / "t.f64.json").write_text('{"shape": [5], "dtype": "f64"}')
        with pytest.raises(ValueError, match="header"):
            tensorio.load_tensor(p)

    def test_non_finite_rejected(self, tmp_path):
        p = tmp_path / "t.f64"
        a = np.array([1.0, np.inf])
        with open(p, "wb") as f:
            f.write(a.astype("<f8").tobytes())
        (tmp_path / "t.f64.json").write_text('{"shape": [2], "dtype": "f64"}')
        with pytest.raises(ValueError, match="non-finite"):
            tensorio.load_tensor(p)
        np.testing.assert_array_equal(
            tensorio.load_tensor(p, allow_non_finite=True), a)

    def test_checksum_stable(self, tmp_path):
        a = np.arange(6.0).reshape(2, 3)
        tensorio.save_tensor(tmp_path / "a.f64", a)
        tensorio.save_tensor(tmp_path / "b.f64", a)
        assert tensorio.file_sha256(tmp_path / "a.f64") == \
            tensorio.file_sha256(tmp_path / "b.f64")


class TestMeasurementSets:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        mset = MeasurementSet([rng.standard_normal(7),
                               rng.standard_normal((3, 3))],
                              snr_db=20.0, seed=5)
        tensorio.save_measurement_set(tmp_path / "m", mset)
        back = tensorio.load_measurement_set(tmp_path / "m")
        assert back.snr_db == 20.0
        assert back.seed == 5
        for a, b in zip(mset.blocks, back.blocks):
            np.testing.assert_array_equal(a, b)

    def test_infinite_snr_roundtrip(self, tmp_path):
        mset = MeasurementSet([np.ones(3)], snr_db=float("inf"))
        tensorio.save_measurement_set(tmp_path / "m", mset)
        back = tensorio.load_measurement_set(tmp_path / "m")
        assert back.snr_db == float("inf")

    def test_noiseless_none_roundtrip(self, tmp_path):
        mset = MeasurementSet([np.ones(3)])
        tensorio.save_measurement_set(tmp_path / "m", mset)
        assert tensorio.load_measurement_set(tmp_path / "m").snr_db is None

    def test_manifest_checksums_deterministic(self, tmp_path):
        mset = MeasurementSet([np.arange(4.0)], snr_db=15.0, seed=2)
        m1 = tensorio.save_measurement_set(tmp_path / "m1", mset)
        m2 = tensorio.save_measurement_set(tmp_path / "m2", mset)
        assert m1 == m2
