import itertools

import numpy as np
import pytest

from scenefuse import numerics as nx
from scenefuse.attention import BlockConfig
from scenefuse.fusion import (
    FUSIONS,
    REGIMES,
    EncoderConfig,
    SceneEncoder,
    attention_score_count,
    block_axes,
    encoder_parameter_count,
    encoding_length,
    finalize_factorized,
    fusion_parameter_gap,
    hierarchical_split,
)
from scenefuse.numerics import Tape, Tensor

BLOCK = BlockConfig(hidden=8, heads=2, intermediate=16)
SHAPES = {"history": (3, 1), "interactions": (3, 2), "roadgraph": (1, 4), "traffic_lights": (3, 1)}


def inputs(rng, shapes, A=2, requires_grad=False):
    grids = {m: Tensor(rng.normal(size=(A, T, S, BLOCK.hidden)), requires_grad=requires_grad)
             for m, (T, S) in shapes.items()}
    masks = {m: np.ones((A, T, S), bool) for m, (T, S) in shapes.items()}
    return grids, masks


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(regime="factorized_sequential", depth=3)
    with pytest.raises(ValueError):
        EncoderConfig(fusion="hierarchical", depth=1)
    with pytest.raises(ValueError):
        EncoderConfig(fusion="mid")
    with pytest.raises(ValueError):
        EncoderConfig(latent_ratio=1.5)


def test_block_axes_and_split():
    assert block_axes(4, "factorized_sequential") == ["temporal", "temporal", "spatial", "spatial"]
    assert block_axes(4, "factorized_interleaved") == ["temporal", "spatial", "temporal", "spatial"]
    assert hierarchical_split(2) == (1, 1)
    assert hierarchical_split(5) == (2, 3)


GRID = list(itertools.product(FUSIONS, REGIMES, [None, 0.5], [2, 4]))


@pytest.mark.parametrize("fusion,regime,ratio,depth", GRID)
def test_shape_law_counts_and_parameters(fusion, regime, ratio, depth, rng):
    cfg = EncoderConfig(fusion=fusion, regime=regime, depth=depth, block=BLOCK, latent_ratio=ratio)
    enc = SceneEncoder(cfg, SHAPES, rng)
    grids, masks = inputs(rng, SHAPES)
    with nx.AttentionCounter() as counter:
        out = enc(grids, masks)
    assert out.z.shape == (2, encoding_length(cfg, SHAPES), BLOCK.hidden)
    assert out.mask.shape == out.z.shape[:2]
    assert counter.total("encoder") == 2 * attention_score_count(cfg, SHAPES)
    assert enc.num_parameters() == encoder_parameter_count(cfg, SHAPES)


def test_documented_length_formulas():
    total = sum(T * S for T, S in SHAPES.values())
    assert encoding_length(EncoderConfig(fusion="early", block=BLOCK), SHAPES) == total
    assert encoding_length(EncoderConfig(fusion="early", block=BLOCK, latent_ratio=0.5), SHAPES) == round(0.5 * total)
    late = EncoderConfig(fusion="late", block=BLOCK, latent_ratio=0.5)
    assert encoding_length(late, SHAPES) == sum(max(1, int(0.5 * T * S + 0.5)) for T, S in SHAPES.values())
    fact = EncoderConfig(fusion="early", regime="factorized_sequential", block=BLOCK)
    assert encoding_length(fact, SHAPES) == sum(S for _, S in SHAPES.values())


def test_parameter_gap_closed_form(rng):
    late = SceneEncoder(EncoderConfig(fusion="late", block=BLOCK, depth=2), SHAPES, rng)
    early = SceneEncoder(EncoderConfig(fusion="early", block=BLOCK, depth=2), SHAPES, rng)
    gap = fusion_parameter_gap(EncoderConfig(block=BLOCK, depth=2), len(SHAPES))
    assert gap > 0
    assert late.num_parameters() - early.num_parameters() == gap


@pytest.mark.parametrize("regime", REGIMES)
def test_one_modality_late_equals_early(regime, rng):
    shapes = {"interactions": (3, 2)}
    cfg_l = EncoderConfig(fusion="late", regime=regime, block=BLOCK)
    cfg_e = EncoderConfig(fusion="early", regime=regime, block=BLOCK)
    late = SceneEncoder(cfg_l, shapes, np.random.default_rng(5))
    early = SceneEncoder(cfg_e, shapes, np.random.default_rng(5))
    grids, masks = inputs(rng, shapes)
    np.testing.assert_allclose(late(grids, masks).z.data, early(grids, masks).z.data, atol=1e-12)


def test_one_modality_hierarchical_equals_early(rng):
    shapes = {"interactions": (3, 2)}
    hier = SceneEncoder(EncoderConfig(fusion="hierarchical", block=BLOCK), shapes, np.random.default_rng(9))
    early = SceneEncoder(EncoderConfig(fusion="early", block=BLOCK), shapes, np.random.default_rng(9))
    grids, masks = inputs(rng, shapes)
    np.testing.assert_allclose(hier(grids, masks).z.data, early(grids, masks).z.data, atol=1e-12)


def test_depth_zero_early_returns_tokens(rng):
    enc = SceneEncoder(EncoderConfig(fusion="early", depth=0, block=BLOCK), SHAPES, rng)
    grids, masks = inputs(rng, SHAPES)
    z = enc(grids, masks).z.data
    flat = np.concatenate([grids[m].data.reshape(2, -1, BLOCK.hidden) for m in SHAPES], axis=1)
    np.testing.assert_array_equal(z, flat)


@pytest.mark.parametrize("regime", REGIMES)
def test_late_fusion_isolation(regime, rng):
    cfg = EncoderConfig(fusion="late", regime=regime, block=BLOCK)
    enc = SceneEncoder(cfg, SHAPES, rng)
    grids, masks = inputs(rng, SHAPES, requires_grad=True)
    base = enc(grids, masks).z.data
    # corrupting one modality leaves the other slices bit-identical
    corrupted = dict(grids)
    corrupted["roadgraph"] = Tensor(grids["roadgraph"].data + 5.0)
    z2 = enc(corrupted, masks).z.data
    changed = np.any(z2 != base, axis=(0, 2))
    assert changed.any() and not changed.all()
    # gradient of one modality's slice w.r.t. another modality's tokens is exactly zero
    lengths = {m: encoding_length(cfg, {m: SHAPES[m]}) for m in SHAPES}
    offsets = np.cumsum([0] + [lengths[m] for m in SHAPES])
    for i, m in enumerate(SHAPES):
        with Tape() as tape:
            z = enc(grids, masks).z
            part = nx.sum_(nx.square(z[:, offsets[i]:offsets[i + 1]]))
            grads = tape.gradient(part, [grids[o] for o in SHAPES])
        for o, g in zip(SHAPES, grads):
            if o == m:
                assert np.abs(g).sum() > 0
            else:
                assert np.all(g == 0.0)


def test_finalize_factorized():
    x = np.random.default_rng(0).normal(size=(2, 1, 3, 4))
    enc = finalize_factorized(Tensor(x), np.ones((2, 1, 3), bool))
    np.testing.assert_array_equal(enc.z.data, x[:, 0])
    const = np.broadcast_to(np.arange(4.0), (2, 5, 3, 4)).copy()
    mask = np.random.default_rng(1).random((2, 5, 3)) > 0.3
    mask[:, 0] = True
    np.testing.assert_allclose(finalize_factorized(Tensor(const), mask).z.data, const[:, 0], atol=1e-12)
    r = np.random.default_rng(2).normal(size=(2, 5, 3, 4))
    got = finalize_factorized(Tensor(r), mask).z.data
    for a in range(2):
        for s in range(3):
            sel = mask[a, :, s]
            np.testing.assert_allclose(got[a, s], r[a, sel, s].mean(0), atol=1e-12)
    bad = np.ones((2, 5, 3), bool)
    bad[1] = False
    with pytest.raises(nx.DegenerateRowError):
        finalize_factorized(Tensor(r), bad)


def test_hierarchical_latent_lengths_propagate(rng):
    cfg = EncoderConfig(fusion="hierarchical", block=BLOCK, latent_ratio=0.5, depth=2)
    enc = SceneEncoder(cfg, SHAPES, rng)
    stage1 = sum(enc.per_modality[m].out_length for m in SHAPES)
    assert stage1 == sum(max(1, int(0.5 * T * S + 0.5)) for T, S in SHAPES.values())
    assert encoding_length(cfg, SHAPES) == stage1
