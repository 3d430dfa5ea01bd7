import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tgprompt import TemporalEncoder
from tgprompt import tensor as T
from tgprompt.backbone import Backbone
from tgprompt.layers import Linear
from tgprompt.prompts import (PromptParams, adjusted_intervals, combine, edge_weight_prompt,
                              edge_weights, feature_mask_prompt, prompt_values, prompted_embed,
                              prompted_embedding, temporal_bias_prompt)
from conftest import TINY_MODEL

D = TINY_MODEL.d
WIDTH = 3 * D


@pytest.fixture(scope="module")
def setup(small_synth):
    log, idx = small_synth
    enc = TemporalEncoder(TINY_MODEL, log.d_N, log.d_E, seed=1)
    enc.freeze()
    rng = np.random.default_rng(0)
    nodes = rng.integers(0, log.num_nodes, 12)
    times = rng.uniform(0, log.timestamps[-1] + 1, 12)
    with T.no_grad():
        z = enc.expression(enc.gather(idx, nodes, times))
    assert z.mask.any() and not z.mask.all()
    return log, idx, enc, z


def _random_linear(rng, d_in, d_out, scale=0.5):
    lin = Linear(d_in, d_out, zero=True)
    lin.W.data[...] = scale * rng.standard_normal((d_in, d_out))
    lin.b.data[...] = scale * rng.standard_normal(d_out)
    return lin


def _scalar_time_row(enc, dt):
    return np.array([math.cos(dt * enc.enc.omega[i]) for i in range(enc.enc.d_T)])


class TestTemporalBias:
    def test_zero_eta_reproduces_z_exactly(self, setup):
        _, _, enc, z = setup
        eta = Linear(D, 1, zero=True)
        assert np.array_equal(adjusted_intervals(z, eta).data, z.raw_dt)
        p = temporal_bias_prompt(z, eta, enc.enc, enc.proj)
        assert np.array_equal(p.data, z.values.data)

    def test_clamped_rows_encode_zero_interval(self, setup):
        _, _, enc, z = setup
        eta = Linear(D, 1, zero=True)
        eta.b.data[...] = -(z.raw_dt.max() + 5.0)
        assert not adjusted_intervals(z, eta).data.any()
        p = temporal_bias_prompt(z, eta, enc.enc, enc.proj).data
        ones_row = np.ones(TINY_MODEL.d_T) @ enc.proj.time.W.data + enc.proj.time.b.data
        valid = z.mask
        assert np.allclose(p[valid][:, 2 * D:], ones_row, rtol=0, atol=1e-14)
        assert not p[~valid].any()
        assert np.array_equal(p[..., :2 * D], z.values.data[..., :2 * D])

    def test_random_eta_matches_scalar_pipeline(self, setup):
        _, _, enc, z = setup
        rng = np.random.default_rng(1)
        for _ in range(5):
            eta = _random_linear(rng, D, 1)
            p = temporal_bias_prompt(z, eta, enc.enc, enc.proj).data
            for b, n in zip(*np.nonzero(z.mask)):
                delta = float(z.time.data[b, n] @ eta.W.data[:, 0] + eta.b.data[0])
                dt_bar = max(0.0, z.raw_dt[b, n] + delta)
                row = (_scalar_time_row(enc, dt_bar) @ enc.proj.time.W.data
                       + enc.proj.time.b.data)
                assert np.allclose(p[b, n, 2 * D:], row, rtol=0, atol=1e-12)

    def test_neighbor_block_source(self, setup):
        _, _, enc, z = setup
        eta = _random_linear(np.random.default_rng(2), D, 1)
        got = adjusted_intervals(z, eta, source="neighbor").data
        delta = z.neigh.data @ eta.W.data[:, 0] + eta.b.data[0]
        assert np.allclose(got, np.maximum(0.0, z.raw_dt + delta), rtol=0, atol=1e-13)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_adjusted_intervals_never_negative(setup, seed, scale):
    _, _, _, z = setup
    eta = _random_linear(np.random.default_rng(seed), D, 1, scale)
    assert np.all(adjusted_intervals(z, eta).data >= 0.0)


class TestEdgeWeight:
    def test_unit_weights_copy_z(self, setup):
        z = setup[3]
        zeta = Linear(2 * D, 1, zero=True)
        zeta.b.data[...] = 1.0
        assert np.array_equal(edge_weight_prompt(z, zeta).data, z.values.data)

    def test_zero_weights_annihilate(self, setup):
        z = setup[3]
        assert not edge_weight_prompt(z, Linear(2 * D, 1, zero=True)).data.any()

    def test_row_norms_scale_by_weight(self, setup):
        z = setup[3]
        zeta = _random_linear(np.random.default_rng(3), 2 * D, 1)
        w = edge_weights(z, zeta).data[..., 0]
        got = np.linalg.norm(edge_weight_prompt(z, zeta).data, axis=-1)
        assert np.allclose(got, np.abs(w) * np.linalg.norm(z.values.data, axis=-1),
                           rtol=1e-12, atol=1e-14)


class TestFeatureMask:
    def test_zero_network(self, setup):
        z = setup[3]
        out = feature_mask_prompt(z, Linear(WIDTH, 4, zero=True), Linear(4, WIDTH, zero=True))
        assert not out.data.any()

    def test_constant_output_on_valid_rows(self, setup):
        z = setup[3]
        w1 = _random_linear(np.random.default_rng(4), WIDTH, 4)
        w2 = Linear(4, WIDTH, zero=True)
        c = np.linspace(-1, 1, WIDTH)
        w2.b.data[...] = c
        out = feature_mask_prompt(z, w1, w2).data
        assert np.array_equal(out[z.mask], np.broadcast_to(c, out[z.mask].shape))
        assert not out[~z.mask].any()

    def test_rowwise_oracle(self, setup):
        z = setup[3]
        rng = np.random.default_rng(5)
        w1, w2 = _random_linear(rng, WIDTH, 4), _random_linear(rng, 4, WIDTH)
        out = feature_mask_prompt(z, w1, w2).data
        for b, n in np.ndindex(z.mask.shape):
            row = z.values.data[b, n]
            ref = np.maximum(0, row @ w1.W.data + w1.b.data) @ w2.W.data + w2.b.data
            ref = ref if z.mask[b, n] else np.zeros(WIDTH)
            assert np.allclose(out[b, n], ref, rtol=0, atol=1e-12)


class TestCombine:
    def test_all_zero_weights_is_identity(self, setup):
        z = setup[3]
        junk = T.Tensor(np.full(z.values.shape, 3.0))
        assert combine(z, junk, junk, junk, 0.0, 0.0, 0.0) is z.values

    def test_zero_eta_superposition_doubles(self, setup):
        _, _, enc, z = setup
        p = temporal_bias_prompt(z, Linear(D, 1, zero=True), enc.enc, enc.proj)
        assert np.array_equal(combine(z, p, alpha=1.0).data, 2.0 * z.values.data)

    def test_elementwise_oracle(self, setup):
        z = setup[3]
        rng = np.random.default_rng(6)
        ps = [rng.standard_normal(z.values.shape) for _ in range(3)]
        a, b, g = rng.random(3)
        out = combine(z, *map(T.Tensor, ps), a, b, g).data
        ref = z.values.data + a * ps[0] + b * ps[1] + g * ps[2]
        assert np.allclose(out, ref, rtol=0, atol=1e-14)

    def test_shape_mismatch(self, setup):
        z = setup[3]
        with pytest.raises(T.ShapeError, match="P_edge"):
            combine(z, p_edge=T.Tensor(np.zeros((1, 2))), beta=1.0)


class _MeanPoolDouble(Backbone):
    def __init__(self, out: Linear):
        self.width, self.d_h, self.out = WIDTH, out.d_out, out

    def forward(self, values, mask):
        values, mask = self._check(values, mask)
        return self.out(T.mean_pool(values, mask))


class TestPromptedEmbedding:
    def test_prompt_off_identity(self, setup):
        log, idx, enc, z = setup
        prompt = PromptParams(D, WIDTH, np.random.default_rng(0), alpha=0, beta=0, gamma=0)
        prompt.omega2.W.data[...] = 1.0
        h = prompted_embed(z, prompt, enc).data
        assert np.array_equal(h, enc.backbone(z.values, z.mask).data)
        for u, t in [(0, 50.0), (int(log.dst[3]), float(log.timestamps[300]))]:
            single = prompted_embedding(idx, enc, prompt, u, t).data
            assert np.array_equal(single, enc.embed(enc.gather(idx, [u], [t])).data[0])

    def test_linear_double_superposition(self, setup):
        _, _, enc, z = setup
        rng = np.random.default_rng(7)
        out = _random_linear(rng, WIDTH, 5)
        double = _MeanPoolDouble(out)
        alpha, beta, gamma, c = 0.3, 0.7, 0.2, 1.5
        prompt = PromptParams(D, WIDTH, rng, alpha=alpha, beta=beta, gamma=gamma)
        prompt.zeta.b.data[...] = c
        k = rng.standard_normal(WIDTH)
        prompt.omega2.b.data[...] = k

        class _Enc:
            pass
        fake = _Enc()
        fake.enc, fake.proj, fake.backbone = enc.enc, enc.proj, double
        got = prompted_embed(z, prompt, fake).data

        has = z.mask.any(axis=1)
        counts = np.maximum(z.mask.sum(axis=1, keepdims=True), 1)
        mean_z = (z.values.data * z.mask[..., None]).sum(axis=1) / counts
        pooled = (1 + alpha + beta * c) * mean_z + gamma * np.where(has[:, None], k, 0.0)
        ref = pooled @ out.W.data + out.b.data
        assert np.allclose(got, ref, rtol=0, atol=1e-12)

    def test_prompt_gradients_and_frozen_backbone(self, setup):
        _, _, enc, z = setup
        rng = np.random.default_rng(8)
        prompt = PromptParams(D, WIDTH, rng, alpha=0.4, beta=0.6, gamma=0.5)
        for lin in (prompt.eta, prompt.zeta, prompt.omega1, prompt.omega2):
            lin.W.data[...] = 0.1 * rng.standard_normal(lin.W.shape)
            lin.b.data[...] = 0.1 * rng.standard_normal(lin.b.shape)
        # keep intervals away from the ReLU kink so differences are smooth
        prompt.eta.b.data[...] = 0.5
        w = rng.standard_normal((z.values.shape[0], TINY_MODEL.d_h))

        def loss():
            return T.tsum(T.mul(prompted_embed(z, prompt, enc), w))

        assert T.gradcheck(loss, prompt.parameters()) < 1e-4
        with T.Tape():
            grads = T.backward(loss())
        phi = {id(p) for p in enc.parameters()}
        assert not any(id(p) in phi for p in grads)
        assert all(p.grad is None for p in enc.parameters())

    def test_disabled_kinds_not_evaluated(self, setup):
        _, _, enc, z = setup
        prompt = PromptParams(D, WIDTH, np.random.default_rng(9))
        full = prompt_values(z, prompt, enc, {"temporal", "edge", "feature"})
        assert full is z.values


class TestPromptParams:
    def test_initial_state(self):
        p = PromptParams(D, WIDTH, np.random.default_rng(0))
        assert p.bottleneck == D // 2
        assert not p.eta.W.data.any() and not p.zeta.W.data.any()
        assert not p.omega2.W.data.any()
        assert np.all(np.abs(p.omega1.W.data) <= 0.1) and p.omega1.W.data.any()

    def test_validation(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="bottleneck"):
            PromptParams(D, WIDTH, rng, bottleneck=WIDTH)
        with pytest.raises(ValueError, match="non-negative"):
            PromptParams(D, WIDTH, rng, beta=-0.1)
        with pytest.raises(ValueError, match="temporal_bias_input"):
            PromptParams(D, WIDTH, rng, temporal_bias_input="edge")
