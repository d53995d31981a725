import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from far import subspace
from far.numlin import RankTruncationWarning, orthonormalize
from far.subspace import AppearanceBasis, BasisFormatError, basis_from_textures, from_bytes, to_bytes


def random_basis(seed, frame=(6, 5), k=3):
    r = np.random.default_rng(seed)
    f = frame[0] * frame[1]
    mask = r.random(f) < 0.8
    mask[:k] = True
    cols = orthonormalize(r.standard_normal((int(mask.sum()), k)))
    u = np.zeros((f, cols.shape[1]))
    u[mask] = cols
    mean = np.zeros(f)
    mean[mask] = r.random(int(mask.sum()))
    return AppearanceBasis(frame=frame, mean=mean, u=u, mask=mask).validate()


class TestBuild:
    def test_identical_textures_give_mean_direction(self):
        t = np.linspace(0.1, 0.9, 12)
        mask = np.ones(12, dtype=bool)
        with pytest.warns(RankTruncationWarning):
            b = basis_from_textures(np.stack([t, t]), mask, (3, 4), k=2)
        assert b.k == 1
        assert np.allclose(np.abs(b.u[:, 0]), t / np.linalg.norm(t))

    def test_recovers_generating_subspace(self, rng):
        f, dim = 80, 10
        # first generator is the constant image so the mean stays in [0, 1]
        gen = np.linalg.qr(np.column_stack([np.ones(f), rng.standard_normal((f, dim - 1))]))[0]
        w = rng.standard_normal((dim, 40)) * 0.05
        w[0] = 0.5 * np.sqrt(f) * np.sign(gen[0, 0]) + w[0]
        textures = (gen @ w).T
        assert textures.min() > 0 and textures.max() < 1
        b = basis_from_textures(textures, np.ones(f, dtype=bool), (8, 10), k=dim)
        assert b.k == dim
        assert np.max(scipy.linalg.subspace_angles(b.u, gen)) < 1e-6

    def test_mean_in_span_and_masked_rows_zero(self, rng):
        f = 30
        mask = np.ones(f, dtype=bool)
        mask[::4] = False
        textures = rng.random((12, f))
        b = basis_from_textures(textures, mask, (5, 6), k=5)
        assert b.k == 6
        assert np.all(b.u[~mask] == 0) and np.all(b.mean[~mask] == 0)
        assert np.linalg.norm(b.mean - b.u @ (b.u.T @ b.mean)) < 1e-10
        assert np.allclose(b.u.T @ b.u, np.eye(b.k), atol=1e-10)

    def test_reconstruction_non_increasing_in_k(self, rng):
        f = 40
        mask = np.ones(f, dtype=bool)
        textures = rng.random((15, f))
        errs = []
        for k in range(1, 10):
            b = basis_from_textures(textures, mask, (5, 8), k=k)
            errs.append([np.linalg.norm(t - b.u @ (b.u.T @ t)) for t in textures])
        errs = np.array(errs)
        assert np.all(np.diff(errs, axis=0) <= 1e-10)

    def test_build_from_images(self, synth_model):
        b = synth_model.basis
        assert b.frame == synth_model.model.frame
        assert b.k == 21
        b.validate()
        # every training texture lies almost entirely in the span
        from far.shapewarp import warp_texture

        x, _ = warp_texture(synth_model.train_images[0], synth_model.train_shapes[0], synth_model.model, synth_model.tri)
        x = np.where(b.mask, x, 0.0)
        assert np.linalg.norm(x - b.u @ (b.u.T @ x)) / np.linalg.norm(x) < 0.02

    def test_build_needs_pairs(self, synth_model):
        with pytest.raises(ValueError):
            subspace.build_basis(synth_model.train_images[:1], synth_model.train_shapes[:1], synth_model.model, synth_model.tri, 3)


class TestFormat:
    @given(st.integers(0, 2**32 - 1), st.integers(0, 4))
    def test_round_trip_bit_exact(self, seed, k):
        b = random_basis(seed, k=k)
        data = to_bytes(b)
        back = from_bytes(data)
        assert back.frame == b.frame
        assert np.array_equal(back.u, b.u) and np.array_equal(back.mean, b.mean) and np.array_equal(back.mask, b.mask)
        assert to_bytes(back) == data

    def test_layout(self):
        b = random_basis(0, frame=(2, 3), k=2)
        data = to_bytes(b)
        assert data[:4] == b"FARB"
        assert np.frombuffer(data[4:20], "<u4").tolist() == [1, 2, 3, 2]
        assert len(data) == 20 + 6 + 8 * 6 + 8 * 6 * 2
        # u is stored column-major
        first_col = np.frombuffer(data[20 + 6 + 48 : 20 + 6 + 96], "<f8")
        assert np.array_equal(first_col, b.u[:, 0])

    def test_file_round_trip(self, tmp_path):
        b = random_basis(1)
        path = tmp_path / "b.farb"
        subspace.save_basis(b, path)
        assert path.read_bytes() == to_bytes(b)
        assert to_bytes(subspace.load_basis(path)) == to_bytes(b)

    def test_bad_magic(self):
        data = bytearray(to_bytes(random_basis(2)))
        data[:4] = b"XXXX"
        with pytest.raises(BasisFormatError, match="magic b'XXXX'"):
            from_bytes(bytes(data))

    def test_bad_version(self):
        data = bytearray(to_bytes(random_basis(2)))
        data[4:8] = (7).to_bytes(4, "little")
        with pytest.raises(BasisFormatError, match="version 7"):
            from_bytes(bytes(data))

    def test_truncated_payload(self):
        data = to_bytes(random_basis(3))
        cut = data[: len(data) - 13]
        with pytest.raises(BasisFormatError, match=f"expected {len(data)} bytes, got {len(cut)}"):
            from_bytes(cut)

    def test_truncated_header(self):
        with pytest.raises(BasisFormatError, match="truncated header"):
            from_bytes(b"FARB\x01")

    def test_not_orthonormal(self):
        b = random_basis(4)
        u = b.u.copy()
        u[b.mask, 0] *= 1.01
        bad = AppearanceBasis(b.frame, b.mean, u, b.mask)
        with pytest.raises(BasisFormatError, match="orthonormal"):
            from_bytes(to_bytes(bad))

    def test_bad_mask_byte(self):
        b = random_basis(5)
        data = bytearray(to_bytes(b))
        data[20] = 2
        with pytest.raises(BasisFormatError, match="mask bytes"):
            from_bytes(bytes(data))

    def test_nonzero_masked_row(self):
        b = random_basis(6)
        mean = b.mean.copy()
        mean[np.flatnonzero(~b.mask)[0]] = 0.5
        with pytest.raises(BasisFormatError, match="masked pixels"):
            AppearanceBasis(b.frame, mean, b.u, b.mask).validate()
