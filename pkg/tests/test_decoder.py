import math

import numpy as np
import pytest

from scenefuse import numerics as nx
from scenefuse.attention import BlockConfig
from scenefuse.decoder import (
    DecoderConfig,
    MixtureTrajectory,
    TrajectoryDecoder,
    gaussian_log_prob,
    mixture_log_prob,
)
from scenefuse.numerics import DegenerateRowError, Tensor

D = 8


def make(rng, modes=3, horizon=4, depth=1, **kw):
    cfg = DecoderConfig(modes=modes, depth=depth, horizon=horizon,
                        block=BlockConfig(hidden=D, heads=2, intermediate=16))
    return TrajectoryDecoder(cfg, D, rng, **kw)


def encoding(rng, A=2, L=5):
    return Tensor(rng.normal(size=(A, L, D))), np.ones((A, L), bool)


def test_output_shapes(rng):
    dec = make(rng, modes=3, horizon=4)
    mix = dec(*encoding(rng))
    assert mix.logits.shape == (2, 3)
    assert mix.means.shape == (2, 3, 4, 2)
    assert mix.logstd.shape == (2, 3, 4, 2)
    np.testing.assert_allclose(mix.probabilities().sum(-1), 1.0, atol=1e-12)


def test_single_mode_has_probability_one(rng):
    mix = make(rng, modes=1)(*encoding(rng))
    np.testing.assert_array_equal(mix.probabilities(), np.ones((2, 1)))


def test_zero_heads_give_uniform_zero_mixture(rng):
    mix = make(rng, modes=6, zero_heads=True)(*encoding(rng))
    np.testing.assert_allclose(mix.probabilities(), 1 / 6, atol=1e-15)
    assert not mix.means.data.any()
    assert not mix.logstd.data.any()


def test_width_adapter(rng):
    cfg = DecoderConfig(modes=2, horizon=3, block=BlockConfig(hidden=4, heads=1, intermediate=8))
    dec = TrajectoryDecoder(cfg, D, rng)
    assert dec.adapter is not None
    assert dec(*encoding(rng)).means.shape == (2, 2, 3, 2)


def test_empty_encoding_rejected(rng):
    dec = make(rng)
    z, mask = encoding(rng)
    mask[1] = False
    with pytest.raises(DegenerateRowError):
        dec(z, mask)


def test_masked_tokens_do_not_matter(rng):
    dec = make(rng)
    z, mask = encoding(rng)
    mask[:, 3:] = False
    a = dec(z, mask)
    z2 = z.data.copy()
    z2[:, 3:] = 99.0
    b = dec(Tensor(z2), mask)
    np.testing.assert_allclose(a.means.data, b.means.data, atol=1e-12)


def test_decoder_attention_is_tagged(rng):
    dec = make(rng, modes=3)
    with nx.AttentionCounter() as c:
        dec(*encoding(rng, A=2, L=5))
    # self-attention k*k plus cross-attention k*L, per agent
    assert c.total("decoder") == 2 * (3 * 3 + 3 * 5)
    assert c.total("encoder") == 0


def test_encoding_permutation_invariance(rng):
    dec = make(rng)
    z, mask = encoding(rng, L=6)
    perm = rng.permutation(6)
    a = dec(z, mask)
    b = dec(Tensor(z.data[:, perm]), mask[:, perm])
    np.testing.assert_allclose(a.means.data, b.means.data, atol=1e-9)
    np.testing.assert_allclose(a.logits.data, b.logits.data, atol=1e-9)


def test_query_permutation_equivariance(rng):
    dec = make(rng, modes=4, depth=2)
    z, mask = encoding(rng)
    perm = np.array([2, 0, 3, 1])
    a = dec(z, mask)
    b = dec(z, mask, queries=Tensor(dec.bank.queries.data[perm]))
    np.testing.assert_allclose(b.logits.data, a.logits.data[:, perm], atol=1e-9)
    np.testing.assert_allclose(b.means.data, a.means.data[:, perm], atol=1e-9)


def _mix(means, logstd, logits=None):
    means = np.asarray(means, float)
    A, k = means.shape[:2]
    logits = np.zeros((A, k)) if logits is None else logits
    return MixtureTrajectory(Tensor(logits), Tensor(means), Tensor(np.asarray(logstd, float)))


def test_log_prob_zero_residual_unit_sigma():
    T = 5
    mu = np.random.default_rng(0).normal(size=(1, 1, T, 2))
    lp = mixture_log_prob(_mix(mu, np.zeros_like(mu)), mu[:, 0], mode=np.array([0]))
    assert lp.data[0] == pytest.approx(-T * math.log(2 * math.pi), abs=1e-12)


def test_log_prob_single_step_oracle():
    mu = np.zeros((1, 1, 1, 2))
    lp = mixture_log_prob(_mix(mu, np.zeros_like(mu)), np.array([[[1.0, 0.0]]]), mode=np.array([0]))
    assert lp.data[0] == pytest.approx(-math.log(2 * math.pi) - 0.5, abs=1e-12)


def test_doubling_sigma_costs_two_log_two_per_step():
    T = 4
    mu = np.ones((1, 1, T, 2))
    gt = mu[:, 0]
    base = mixture_log_prob(_mix(mu, np.zeros_like(mu)), gt).data[0, 0]
    wide = mixture_log_prob(_mix(mu, np.full_like(mu, math.log(2))), gt).data[0, 0]
    assert base - wide == pytest.approx(2 * T * math.log(2), abs=1e-12)


def test_log_prob_matches_explicit_density(rng):
    mu = rng.normal(size=(3, 2))
    ls = rng.normal(scale=0.3, size=(3, 2))
    g = rng.normal(size=(3, 2))
    s = np.exp(ls)
    expected = np.sum(-0.5 * ((g - mu) / s) ** 2 - np.log(s) - 0.5 * math.log(2 * math.pi))
    got = gaussian_log_prob(Tensor(mu), Tensor(ls), g).data
    assert float(got) == pytest.approx(expected, abs=1e-12)


def test_log_prob_shape_mismatch():
    mu = np.zeros((2, 3, 4, 2))
    with pytest.raises(nx.DimensionError):
        mixture_log_prob(_mix(mu, mu), np.zeros((2, 5, 2)))


def test_logstd_is_clipped(rng):
    dec = make(rng)
    dec.traj_head.bias.data[:] = 100.0
    mix = dec(*encoding(rng))
    assert mix.logstd.data.max() <= 5.0


def test_decoder_gradients_match_finite_differences(rng):
    dec = make(rng, modes=2, horizon=2)
    z, mask = encoding(rng, A=2, L=3)
    z.requires_grad = True
    gt = rng.normal(size=(2, 2, 2))

    def fn():
        mix = dec(z, mask)
        return nx.sum_(mixture_log_prob(mix, gt))

    params = [z, dec.bank.queries, dec.traj_head.weight, dec.blocks[0].cross_attn.q.weight]
    assert nx.gradient_check(fn, params) < 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(modes=0)
    with pytest.raises(ValueError):
        DecoderConfig(depth=0)
    with pytest.raises(ValueError):
        DecoderConfig(trajectory_scale=0)
