import math
from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest
import torch
from hypothesis import given, settings, strategies as st

from qconsol import toydiff
from qconsol.errors import ConfigError, DomainError
from qconsol.qfield import LayerSpec
from qconsol.toydiff import (InjectionConfig, Stage, ddim_step, direct_replace, extract_queries,
                             generator_forward, guidance_gradient, guidance_loss, guidance_update,
                             inject_kv, make_generator, make_schedule)

LAYERS = (LayerSpec(0, 4, 4), LayerSpec(1, 8, 3), LayerSpec(2, 8, 2))


def _gen(n_layers=3, amplitude=0.8, T=10, seed=0, views=2, **kw):
    rng = np.random.default_rng(seed + 100)
    targets = 0.5 * rng.normal(size=(views, 4, 4, 2))
    return make_generator(LAYERS[:n_layers], latent_res=4, latent_channels=2, targets=targets,
                          T=T, amplitude=amplitude, seed=seed, width=8, **kw)


def _control(seed=0):
    return np.random.default_rng(seed).uniform(1.5, 4.0, (8, 8))


def _latent(seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=(4, 4, 2)))


def _identity_generator(alpha_bar_T=10):
    """Single stage whose queries equal the latent: Q = z."""
    layer = LayerSpec(0, 4, 2)
    eye = torch.eye(2, dtype=torch.float64)
    stage = Stage(embed=eye, control=torch.zeros(2, dtype=torch.float64),
                  time=torch.zeros(alpha_bar_T + 1, 2, dtype=torch.float64),
                  w_q=eye, w_k=eye, w_v=eye, w_out=eye)
    return toydiff.GeneratorWeights((layer,), 4, 2, (stage,), eye, torch.zeros(1, 4, 4, 2, dtype=torch.float64),
                                    0.0, make_schedule(alpha_bar_T), 0)


class TestSchedule:
    def test_boundaries(self):
        s = make_schedule(50)
        assert s.alpha_bar[0] == 1.0
        assert 0 <= s.alpha_bar[50] <= 1e-4
        assert s.alpha_bar[25] == pytest.approx(0.5, abs=1e-15)

    def test_strictly_decreasing(self):
        assert np.all(np.diff(make_schedule(50).alpha_bar) < 0)

    def test_too_short(self):
        with pytest.raises(DomainError):
            make_schedule(1)


class TestGenerator:
    def test_zero_amplitude_returns_target(self):
        w = _gen(amplitude=0.0)
        for seed in (0, 1):
            tr = generator_forward(w, _latent(seed), 5, _control(), 1)
            assert torch.equal(tr.z0_hat, w.targets[1])

    def test_feedback_weight(self):
        w = _gen(amplitude=0.6, feedback_power=2.0)
        ab = w.schedule.alpha_bar
        assert w.feedback(0) == pytest.approx(0.6)
        assert w.feedback(4) == pytest.approx(0.6 * ab[4] ** 2)

    def test_amplitude_range(self):
        with pytest.raises(ConfigError):
            _gen(amplitude=1.5)

    def test_bit_identical(self):
        w = _gen()
        a = generator_forward(w, _latent(), 3, _control(), 0)
        b = generator_forward(_gen(), _latent(), 3, _control(), 0)
        for x, y in zip(a.queries + a.keys + a.values + [a.z0_hat, a.eps_hat],
                        b.queries + b.keys + b.values + [b.z0_hat, b.eps_hat]):
            assert torch.equal(x, y)

    def test_softmax_rows(self):
        tr = generator_forward(_gen(), _latent(), 7, _control(), 0)
        for p in tr.attention:
            npt.assert_allclose(p.sum(-1).numpy(), 1.0, atol=1e-9)

    def test_trace_shapes(self):
        tr = generator_forward(_gen(), _latent(), 7, _control(), 0)
        for spec, q, k, v in zip(LAYERS, tr.queries, tr.keys, tr.values):
            for g in (q, k, v):
                assert tuple(g.shape) == (spec.resolution, spec.resolution, spec.channels)
        assert tuple(tr.z0_hat.shape) == (4, 4, 2)

    def test_bad_inputs(self):
        w = _gen()
        with pytest.raises(DomainError):
            generator_forward(w, torch.zeros(4, 4, 3, dtype=torch.float64), 1, _control(), 0)
        with pytest.raises(DomainError):
            generator_forward(w, _latent(), 11, _control(), 0)
        with pytest.raises(ConfigError):
            make_generator((LayerSpec(0, 6, 2),), latent_res=4, latent_channels=2,
                           targets=np.zeros((1, 4, 4, 2)), T=10, amplitude=0.5, seed=0, width=8)


class TestDDIM:
    def test_zero_noise_rescales(self):
        w = _gen()
        z = _latent()
        tr = generator_forward(w, z, 6, _control(), 0)
        ab = w.schedule.alpha_bar
        tr = replace(tr, z0_hat=z / math.sqrt(ab[6]), eps_hat=torch.zeros_like(z))
        npt.assert_allclose(ddim_step(z, tr, w.schedule, 6).numpy(),
                            math.sqrt(ab[5] / ab[6]) * z.numpy(), rtol=1e-14)

    def test_fixed_prediction_rollout(self):
        # A = 0 pins z0_hat to the target; the deterministic recursion then has the closed form
        # z_s - sqrt(ab_s) c = sqrt((1 - ab_s) / (1 - ab_t)) (z_t - sqrt(ab_t) c)
        T = 20
        w = _gen(amplitude=0.0, T=T)
        c = w.targets[0]
        z = zT = _latent(3)
        ab = w.schedule.alpha_bar
        for t in range(T, 1, -1):
            z = ddim_step(z, generator_forward(w, z, t, _control(), 0), w.schedule, t)
        expected = math.sqrt(ab[1]) * c + math.sqrt((1 - ab[1]) / (1 - ab[T])) * (zT - math.sqrt(ab[T]) * c)
        npt.assert_allclose(z.numpy(), expected.numpy(), atol=1e-12)
        z0 = ddim_step(z, generator_forward(w, z, 1, _control(), 0), w.schedule, 1)
        assert float(torch.linalg.norm(z0 - c)) < 1e-3 * float(torch.linalg.norm(c))

    def test_t_zero_rejected(self):
        w = _gen()
        tr = generator_forward(w, _latent(), 0, _control(), 0)
        with pytest.raises(DomainError):
            ddim_step(_latent(), tr, w.schedule, 0)

    def test_finite(self):
        w = _gen()
        z = _latent()
        assert torch.isfinite(ddim_step(z, generator_forward(w, z, 4, _control(), 0), w.schedule, 4)).all()


class TestInjection:
    def _pair(self):
        w = _gen()
        edit = generator_forward(w, _latent(0), 5, _control(0), 0)
        src = generator_forward(w.with_targets(np.zeros((2, 4, 4, 2))), _latent(1), 5, _control(1), 0)
        return w, edit, src

    def test_empty_layer_set(self):
        w, edit, src = self._pair()
        assert inject_kv(w, edit, src, InjectionConfig(1, ())) is edit

    def test_kv_replaced_queries_kept(self):
        w, edit, src = self._pair()
        out = inject_kv(w, edit, src, InjectionConfig(1, (1, 2)))
        for i in (1, 2):
            assert torch.equal(out.keys[i], src.keys[i]) and torch.equal(out.values[i], src.values[i])
        assert torch.equal(out.keys[0], edit.keys[0])
        for a, b in zip(extract_queries(out), extract_queries(edit)):
            npt.assert_array_equal(a, b)
        assert not torch.equal(out.z0_hat, edit.z0_hat)

    def test_start_step(self):
        w, edit, src = self._pair()
        # t = 5 of T = 10 is denoising step 6
        assert inject_kv(w, edit, src, InjectionConfig(7, (2,))) is edit
        assert inject_kv(w, edit, src, InjectionConfig(6, (2,))) is not edit

    def test_unknown_layer(self):
        w, edit, src = self._pair()
        with pytest.raises(ConfigError):
            inject_kv(w, edit, src, InjectionConfig(1, (5,)))


class TestExtraction:
    def test_repeatable(self):
        tr = generator_forward(_gen(), _latent(), 2, _control(), 0)
        for a, b in zip(extract_queries(tr), extract_queries(tr)):
            npt.assert_array_equal(a, b)

    def test_queries_respond_to_latent(self):
        w = _gen()
        z = _latent()
        dz = torch.zeros_like(z)
        dz[1, 2, 0] = 1e-6
        a = extract_queries(generator_forward(w, z, 2, _control(), 0))
        b = extract_queries(generator_forward(w, z + dz, 2, _control(), 0))
        assert all(np.abs(x - y).max() > 0 for x, y in zip(a, b))


class TestGuidance:
    @pytest.mark.parametrize("stages", [1, 2, 3])
    def test_gradient_matches_central_differences(self, stages):
        w = _gen(n_layers=stages)
        rng = np.random.default_rng(stages)
        rendered = [rng.normal(size=(s.resolution, s.resolution, s.channels)) for s in LAYERS[:stages]]
        z = _latent(5)
        ctrl = toydiff.control_pyramid(w, _control())
        analytic = guidance_gradient(w, z, 6, ctrl, rendered).numpy()
        numeric = np.zeros_like(analytic)
        h = 1e-6
        for idx in np.ndindex(z.shape):
            zp, zm = z.clone(), z.clone()
            zp[idx] += h
            zm[idx] -= h
            numeric[idx] = (float(guidance_loss(w, zp, 6, ctrl, rendered))
                            - float(guidance_loss(w, zm, 6, ctrl, rendered))) / (2 * h)
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4

    def test_zero_strength(self):
        w = _gen()
        z = _latent()
        rendered = [np.zeros((s.resolution, s.resolution, s.channels)) for s in LAYERS]
        assert torch.equal(guidance_update(w, z, 3, _control(), rendered, 0.0), z)

    def test_negative_strength(self):
        w = _gen()
        with pytest.raises(DomainError):
            guidance_update(w, _latent(), 3, _control(), [], -1.0)

    def test_identity_generator_closed_form(self):
        w = _identity_generator()
        z = _latent(1)
        r = np.random.default_rng(2).normal(size=(4, 4, 2))
        q = extract_queries(generator_forward(w, z, 3, np.zeros((4, 4)), 0))[0]
        npt.assert_array_equal(q, z.numpy())
        out = guidance_update(w, z, 3, np.zeros((4, 4)), [r], 0.1)
        npt.assert_allclose(out.numpy(), z.numpy() - 0.2 * (z.numpy() - r), atol=1e-14)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.01, 0.49), st.integers(0, 1000))
    def test_convex_case_converges_monotonically(self, alpha, seed):
        w = _identity_generator()
        rng = np.random.default_rng(seed)
        z = torch.as_tensor(rng.normal(size=(4, 4, 2)))
        r = rng.normal(size=(4, 4, 2))
        dist = [float(np.linalg.norm(z.numpy() - r))]
        for _ in range(10):
            z = guidance_update(w, z, 1, np.zeros((4, 4)), [r], alpha)
            dist.append(float(np.linalg.norm(z.numpy() - r)))
        assert all(b < a for a, b in zip(dist, dist[1:]))

    def test_shape_mismatch(self):
        w = _gen(n_layers=1)
        with pytest.raises(DomainError):
            guidance_update(w, _latent(), 3, _control(), [np.zeros((8, 8, 4))], 0.1)
        with pytest.raises(DomainError):
            guidance_update(w, _latent(), 3, _control(), [], 0.1)


class TestDirectReplace:
    def test_returns_rendered_exactly(self):
        w = _gen()
        tr = generator_forward(w, _latent(), 4, _control(), 0)
        rng = np.random.default_rng(0)
        rendered = [rng.normal(size=q.shape) for q in tr.queries]
        out = direct_replace(w, tr, rendered)
        for a, b in zip(extract_queries(out), rendered):
            npt.assert_array_equal(a, b)

    def test_fixed_point(self):
        w = _gen()
        tr = generator_forward(w, _latent(), 4, _control(), 0)
        out = direct_replace(w, tr, extract_queries(tr))
        assert torch.equal(out.z0_hat, tr.z0_hat)

    def test_differs_from_soft_guidance(self):
        w = _gen()
        z = _latent()
        tr = generator_forward(w, z, 1, _control(), 0)
        rng = np.random.default_rng(1)
        rendered = [q.numpy() + rng.normal(size=q.shape) for q in tr.queries]
        direct = direct_replace(w, tr, rendered).z0_hat
        soft = generator_forward(w, guidance_update(w, z, 1, _control(), rendered, 0.01), 1, _control(), 0).z0_hat
        assert not torch.allclose(direct, soft)

    def test_mismatch(self):
        w = _gen()
        tr = generator_forward(w, _latent(), 4, _control(), 0)
        with pytest.raises(DomainError):
            direct_replace(w, tr, [np.zeros((2, 2, 2))] * 3)
        with pytest.raises(DomainError):
            direct_replace(w, tr, extract_queries(tr)[:2])
