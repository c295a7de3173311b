"""Feature container, window accounting, PCA, and synthesis contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from captionforge.errors import BadMagicError, ChecksumError, TruncatedPayloadError, VersionMismatchError
from captionforge.features import (
    DimensionError,
    FeatureMatrix,
    InsufficientDataError,
    PcaModel,
    TooShortVideoError,
    expected_rows,
    pca_apply,
    pca_fit,
    pca_reconstruct,
    read_feature_file,
    read_pca_file,
    synth_features,
    write_feature_file,
    write_pca_file,
)


class TestExpectedRows:
    def test_c3d_budget(self):
        assert expected_rows(500, 500, 16) == 31

    def test_i3d_budget(self):
        assert expected_rows(400, 400, 8) == 50

    def test_single_window(self):
        assert expected_rows(16, 500, 16) == 1

    def test_too_short_video(self):
        with pytest.raises(TooShortVideoError):
            expected_rows(10, 500, 16)

    @given(st.integers(16, 2000), st.integers(16, 2000))
    @settings(max_examples=50, deadline=None)
    def test_monotone_and_saturating(self, a, b):
        cap, window = 500, 16
        lo, hi = sorted((a, b))
        assert expected_rows(lo, cap, window) <= expected_rows(hi, cap, window)
        if lo >= cap:
            assert expected_rows(lo, cap, window) == expected_rows(cap, cap, window)


class TestFeatureFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        m = FeatureMatrix("v1", rng.uniform(-5, 5, size=(7, 13)))
        path = tmp_path / "v1.vfm"
        write_feature_file(path, m)
        back = read_feature_file(path)
        assert back.values.shape == (7, 13)
        np.testing.assert_array_equal(
            back.values.astype(np.float32), m.values.astype(np.float32)
        )

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.vfm"
        p.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            read_feature_file(p)

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "x.vfm"
        write_feature_file(p, FeatureMatrix("v", np.zeros((1, 2))))
        blob = bytearray(p.read_bytes())
        blob[4] = 9
        p.write_bytes(bytes(blob))
        with pytest.raises(VersionMismatchError):
            read_feature_file(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "x.vfm"
        write_feature_file(p, FeatureMatrix("v", np.ones((3, 4))))
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(TruncatedPayloadError):
            read_feature_file(p)

    def test_checksum_mismatch(self, tmp_path):
        p = tmp_path / "x.vfm"
        write_feature_file(p, FeatureMatrix("v", np.ones((3, 4))))
        blob = bytearray(p.read_bytes())
        blob[21] ^= 0x55
        p.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            read_feature_file(p)

    def test_rejects_empty_matrix(self):
        with pytest.raises(DimensionError):
            FeatureMatrix("v", np.zeros((0, 4)))


class TestPcaFit:
    def test_subspace_data_reconstruct_exactly(self):
        rng = np.random.default_rng(1)
        basis = np.linalg.qr(rng.standard_normal((6, 3)))[0][:, :3].T  # 3 orthonormal rows in R^6
        coords = rng.uniform(-2, 2, size=(40, 3))
        data = coords @ basis + rng.uniform(-1, 1, size=6)
        m = FeatureMatrix("v", data)
        model = pca_fit([m], k=3)
        recon = pca_reconstruct(model, pca_apply(model, m).values)
        np.testing.assert_allclose(recon, data, atol=1e-8)

    def test_two_point_line_matches_bruteforce_eigensolve(self):
        """Points (+-1, 0) shifted: top axis e1, eigenvalue from the 2x2 covariance."""
        shift = np.array([0.3, -0.7])
        data = np.array([[1.0, 0.0], [-1.0, 0.0]]) + shift
        model = pca_fit([FeatureMatrix("v", data)], k=1)
        # independent solve of the 2x2 covariance
        xc = data - data.mean(axis=0)
        cov = xc.T @ xc / (len(data) - 1)
        w, v = np.linalg.eig(cov)
        top = np.argmax(w)
        np.testing.assert_allclose(model.components[0], [1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(model.eigenvalues[0], w[top], atol=1e-12)
        np.testing.assert_allclose(model.eigenvalues[0], 2.0, atol=1e-12)

    def test_eigenvalues_non_increasing(self):
        rng = np.random.default_rng(2)
        m = FeatureMatrix("v", rng.standard_normal((60, 8)))
        model = pca_fit([m], k=8)
        assert (np.diff(model.eigenvalues) <= 1e-12).all()
        assert (model.eigenvalues >= -1e-10).all()

    def test_components_orthonormal(self):
        rng = np.random.default_rng(3)
        mats = [FeatureMatrix(f"v{i}", rng.standard_normal((20, 10))) for i in range(3)]
        model = pca_fit(mats, k=6)
        gram = model.components @ model.components.T
        assert np.abs(gram - np.eye(6)).max() < 1e-8

    def test_insufficient_rows(self):
        with pytest.raises(InsufficientDataError):
            pca_fit([FeatureMatrix("v", np.ones((3, 5)) + np.eye(3, 5))], k=3)

    def test_k_beyond_dim(self):
        with pytest.raises(DimensionError):
            pca_fit([FeatureMatrix("v", np.random.default_rng(0).standard_normal((10, 4)))], k=5)

    def test_sign_convention_deterministic(self):
        rng = np.random.default_rng(4)
        m = FeatureMatrix("v", rng.standard_normal((30, 6)))
        a = pca_fit([m], k=4)
        b = pca_fit([m], k=4)
        np.testing.assert_array_equal(a.components, b.components)
        for row in a.components:
            assert row[np.argmax(np.abs(row))] > 0


class TestPcaApply:
    def test_mean_row_projects_to_zero(self):
        rng = np.random.default_rng(5)
        m = FeatureMatrix("v", rng.standard_normal((25, 6)))
        model = pca_fit([m], k=4)
        out = pca_apply(model, FeatureMatrix("mean", model.mean[None, :]))
        np.testing.assert_allclose(out.values, 0.0, atol=1e-12)

    def test_reconstruction_error_equals_discarded_eigenvalue_mass(self):
        rng = np.random.default_rng(6)
        data = rng.standard_normal((50, 8)) @ np.diag([4, 3, 2, 1.5, 1, 0.5, 0.2, 0.1])
        m = FeatureMatrix("v", data)
        full = pca_fit([m], k=8)
        k = 3
        model = pca_fit([m], k=k)
        recon = pca_reconstruct(model, pca_apply(model, m).values)
        sq_err = ((recon - data) ** 2).sum()
        expected = full.eigenvalues[k:].sum() * (len(data) - 1)
        np.testing.assert_allclose(sq_err, expected, rtol=1e-6)

    def test_full_basis_reconstruction_exact(self):
        rng = np.random.default_rng(7)
        m = FeatureMatrix("v", rng.standard_normal((30, 5)))
        model = pca_fit([m], k=5)
        recon = pca_reconstruct(model, pca_apply(model, m).values)
        np.testing.assert_allclose(recon, m.values, atol=1e-8)

    def test_projection_idempotent(self):
        rng = np.random.default_rng(8)
        m = FeatureMatrix("v", rng.standard_normal((40, 7)))
        model = pca_fit([m], k=3)
        once = pca_reconstruct(model, pca_apply(model, m).values)
        twice = pca_reconstruct(model, pca_apply(model, FeatureMatrix("w", once)).values)
        np.testing.assert_allclose(once, twice, atol=1e-8)

    def test_dim_mismatch(self):
        model = PcaModel(mean=np.zeros(4), components=np.eye(2, 4), eigenvalues=np.array([1.0, 0.5]))
        with pytest.raises(DimensionError):
            pca_apply(model, FeatureMatrix("v", np.zeros((2, 6))))

    def test_tag_suffix(self):
        model = PcaModel(mean=np.zeros(4), components=np.eye(2, 4), eigenvalues=np.array([1.0, 0.5]))
        out = pca_apply(model, FeatureMatrix("v", np.ones((2, 4)), extractor_tag="c3d-fc6"))
        assert out.extractor_tag == "c3d-fc6+pca2"


class TestPcaFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        m = FeatureMatrix("v", rng.standard_normal((30, 6)))
        model = pca_fit([m], k=4)
        path = tmp_path / "m.vpc"
        write_pca_file(path, model)
        back = read_pca_file(path)
        np.testing.assert_array_equal(back.mean.astype(np.float32), model.mean.astype(np.float32))
        np.testing.assert_array_equal(back.components.astype(np.float32), model.components.astype(np.float32))
        np.testing.assert_array_equal(back.eigenvalues.astype(np.float32), model.eigenvalues.astype(np.float32))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.vpc"
        p.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(BadMagicError):
            read_pca_file(p)


class TestSynthFeatures:
    def test_full_signal_repeats_class_mean(self):
        mats, labels = synth_features(seed=0, n_videos=4, rows_range=(3, 5), dim=8, n_classes=2, signal_strength=1.0)
        for m, lab in zip(mats, labels):
            np.testing.assert_array_equal(m.values, np.tile(m.values[0], (m.rows, 1)))

    def test_same_seed_bitwise_identical(self):
        a, la = synth_features(seed=5, n_videos=6, rows_range=(2, 4), dim=16, n_classes=3, signal_strength=0.8)
        b, lb = synth_features(seed=5, n_videos=6, rows_range=(2, 4), dim=16, n_classes=3, signal_strength=0.8)
        assert la == lb
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.values, y.values)

    def test_nearest_class_mean_classification(self):
        """Video means classify to their class prototype >= 95% of the time."""
        mats, labels = synth_features(seed=0, n_videos=200, rows_range=(4, 8), dim=64, n_classes=8, signal_strength=0.9)
        rng = np.random.default_rng(0)
        means = rng.standard_normal((8, 64))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        correct = 0
        for m, lab in zip(mats, labels):
            video_mean = m.values.mean(axis=0)
            pred = int(np.argmin(((means - video_mean) ** 2).sum(axis=1)))
            correct += pred == lab
        assert correct / len(mats) >= 0.95
