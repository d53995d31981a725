import numpy as np
import pytest

from far import synth
from far.numlin import shrink, svt
from far.shapewarp import shape_from_params


def numerical_rank(a, rel=1e-8):
    s = np.linalg.svd(a, compute_uv=False)
    return int(np.count_nonzero(s > rel * s[0]))


class TestTextures:
    def test_rank_one_case(self):
        t = np.stack([x.ravel() for x in synth.gen_textures(0, (20, 20), 8, 1)])
        mean = synth.mean_pattern((20, 20)).ravel()
        assert numerical_rank(t - mean) == 1

    def test_rank_with_mean(self):
        t = np.stack([x.ravel() for x in synth.gen_textures(1, (40, 40), 50, 10)])
        assert numerical_rank(t) == 11

    def test_deterministic_and_in_range(self):
        a = synth.gen_textures(5, (30, 30), 12, 4)
        b = synth.gen_textures(5, (30, 30), 12, 4)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert all(x.min() >= 0 and x.max() <= 1 for x in a)

    def test_subspace_dim_bound(self):
        with pytest.raises(ValueError):
            synth.gen_textures(0, (10, 10), 3, 4)

    def test_mean_pattern_symmetric(self):
        p = synth.mean_pattern((40, 40))
        assert np.array_equal(p, p[:, ::-1])


class TestInstances:
    def test_unperturbed(self, synth_model):
        sm = synth_model
        inst = synth.gen_instance(sm.basis, sm.model, sm.tri, seed=3)
        assert np.array_equal(inst.image, inst.clean_image)
        assert np.all(inst.gt_params == 0)
        assert inst.gt_error_support.size == 0
        clean = (sm.basis.u @ inst.gt_coeffs).reshape(sm.model.frame)
        mask = sm.basis.mask.reshape(sm.model.frame)
        assert np.allclose(inst.image[mask], clean[mask], atol=1e-12)

    def test_spike_count_and_magnitude(self, synth_model):
        sm = synth_model
        inst = synth.gen_instance(sm.basis, sm.model, sm.tri, seed=4, sparsity=0.05, spike_mag=0.5)
        f = sm.model.frame[0] * sm.model.frame[1]
        assert inst.gt_error_support.size == int(np.floor(0.05 * f))
        assert len(np.unique(inst.gt_error_support)) == inst.gt_error_support.size
        diff = (inst.image - inst.clean_image).ravel()
        assert np.allclose(np.abs(diff[inst.gt_error_support]), 0.5, rtol=0, atol=1e-15)
        off = np.setdiff1d(np.arange(f), inst.gt_error_support)
        assert np.all(diff[off] == 0)
        assert inst.image.min() >= 0 and inst.image.max() <= 1

    def test_translation_matches_shape_model(self, synth_model):
        sm = synth_model
        inst = synth.gen_instance(sm.basis, sm.model, sm.tri, seed=5, translation_px=(3.0, 0.0))
        p = np.zeros(sm.model.n_params)
        p[2] = 3.0 * np.sqrt(sm.model.n_points)
        assert np.allclose(inst.gt_shape, shape_from_params(sm.model, p), atol=1e-12)
        assert np.allclose(inst.gt_shape - sm.model.mean_shape, [3.0, 0.0])
        assert np.allclose(inst.gt_params, p, atol=1e-12)

    def test_reproducible(self, synth_model):
        sm = synth_model
        kw = dict(translation_px=2.0, rotation_deg=3.0, scale_pct=-2.0, sparsity=0.03, margin=4)
        a = synth.gen_instance(sm.basis, sm.model, sm.tri, seed=9, **kw)
        b = synth.gen_instance(sm.basis, sm.model, sm.tri, seed=9, **kw)
        for name in ("image", "gt_shape", "init_shape", "gt_params", "gt_coeffs", "gt_error_support"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_bad_sparsity(self, synth_model):
        sm = synth_model
        with pytest.raises(ValueError):
            synth.gen_instance(sm.basis, sm.model, sm.tri, seed=0, sparsity=1.0)

    def test_model_is_reproducible(self, synth_model):
        again = synth.make_model(seed=0)
        assert np.array_equal(again.basis.u, synth_model.basis.u)
        assert np.array_equal(again.model.basis, synth_model.model.basis)


class TestOracles:
    def test_exact_shrinkage_passes(self, rng):
        q = rng.standard_normal(12)
        assert synth.prox_objective_oracle("l1", shrink(q, 0.4), q, 0.4, perturbations=2000)

    def test_unshrunk_fails(self, rng):
        q = rng.standard_normal(12)
        assert not synth.prox_objective_oracle("l1", q, q, 5.0, perturbations=200)

    def test_svt_6x6(self, rng):
        q = rng.standard_normal((6, 6))
        assert synth.prox_objective_oracle("nuclear", svt(q, 0.7), q, 0.7, perturbations=10_000, radius=1e-3)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            synth.prox_objective_oracle("l1", np.zeros(2), np.zeros(2), 1.0, radius=0.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            synth.prox_objective_oracle("l2", np.zeros(2), np.zeros(2), 1.0)
