import numpy as np
import pytest

from flowssc.dit import (
    ComposedLayout,
    DiT,
    DiTConfig,
    TimeStepEmbedding,
    masked_mean_square,
    param_count,
    patchify,
    unpatchify,
)
from flowssc.flow import flow_matching_loss
from flowssc.gradsuite import micro_dit_case
from flowssc.tensor import Tensor, check_gradients, no_grad
from flowssc.triplane import TriplaneLayout

MICRO = DiTConfig(TriplaneLayout(4, 4, 2, 2), patch=2, embed=8, depth=1, heads=2, mlp_ratio=2, time_bands=2)


def perturbed(config, seed=0, scale=0.1):
    net = DiT(config, np.random.default_rng(seed))
    r = np.random.default_rng(seed + 1)
    for p in net.parameters():
        p.data = (p.data + scale * r.standard_normal(p.shape)).astype(p.dtype)
    return net


def test_default_token_count():
    cfg = DiTConfig()
    assert cfg.plane_tokens == {"xy": 64, "xz": 16, "yz": 16}
    assert cfg.n_tokens == 96


def test_patchify_roundtrip(rng):
    for cfg in (DiTConfig(), MICRO):
        x = Tensor(rng.standard_normal((2, cfg.layout.n_tokens, cfg.layout.c)))
        tokens = patchify(x, cfg.layout, cfg.patch)
        assert tokens.shape == (2, cfg.n_tokens, cfg.patch ** 2 * cfg.layout.c)
        assert np.array_equal(unpatchify(tokens, cfg.layout, cfg.patch).data, x.data)


def test_patch_groups_neighbouring_cells():
    lay = TriplaneLayout(4, 4, 2, 1)
    x = np.arange(lay.n_tokens, dtype=float).reshape(1, -1, 1)
    tokens = patchify(Tensor(x), lay, 2).data[0]
    # first xy patch covers rows 0-1 and columns 0-1 of the 4 x 4 plane
    assert tokens[0].tolist() == [0, 1, 4, 5]
    # the xz plane starts after 16 xy cells; its first patch is x 0-1, z 0-1
    assert tokens[4].tolist() == [16, 17, 18, 19]


def test_indivisible_plane_rejected():
    with pytest.raises(ValueError):
        DiTConfig(TriplaneLayout(6, 6, 3, 4), patch=2)


def test_fresh_network_predicts_zero(rng):
    net = DiT(DiTConfig(), np.random.default_rng(0))
    p = net.config.layout.n_tokens
    with no_grad():
        out = net(rng.standard_normal((2, p, 16)), rng.standard_normal((2, p, 16)), [0.1, 0.7], [0.0, 0.25])
    assert out.shape == (2, p, 16)
    assert not np.any(out.data)


def test_first_loss_is_mean_square_of_target(rng):
    net = DiT(DiTConfig(), np.random.default_rng(0))
    p = net.config.layout.n_tokens
    noise, gt = rng.standard_normal((3, p, 16)), rng.standard_normal((3, p, 16))
    loss = flow_matching_loss(net, noise, gt, rng.random(3), rng.standard_normal((3, p, 16)))
    assert loss.item() == pytest.approx(np.mean((gt - noise) ** 2), rel=1e-5)


def test_shape_validation(rng):
    net = DiT(MICRO, np.random.default_rng(0))
    with pytest.raises(ValueError):
        net(rng.standard_normal((1, 5, 2)), rng.standard_normal((1, 5, 2)), 0.0, 0.0)


def test_evaluation_counter(rng):
    net = DiT(MICRO, np.random.default_rng(0))
    x = rng.standard_normal((3, MICRO.layout.n_tokens, 2))
    with no_grad():
        net(x, x, 0.5, 0.0)
        net(x[:1], x[:1], 0.5, 0.0)
    assert (net.calls, net.evaluations) == (2, 4)


# -- time / step embedding -------------------------------------------------

def embedding():
    return TimeStepEmbedding(DiTConfig(), np.random.default_rng(3))


def test_embedding_distinguishes_t_from_d():
    emb = embedding()
    a = emb([0.3], [0.1]).data
    b = emb([0.1], [0.3]).data
    assert not np.allclose(a, b)


def test_embedding_deterministic():
    a = embedding()([0.42], [0.125]).data
    b = embedding()([0.42], [0.125]).data
    assert np.array_equal(a, b)


def test_embedding_locally_lipschitz(f64):
    emb = embedding()
    t = np.array([0.0, 0.37, 0.9])
    base = emb(t, 0 * t).data
    slopes = []
    for h in (1e-4, 1e-5, 1e-6):
        slopes.append(np.linalg.norm(emb(t + h, 0 * t).data - base, axis=1) / h)
    # difference quotients settle, so the embedding is differentiable in t
    np.testing.assert_allclose(slopes[1], slopes[2], rtol=0.02)
    assert np.all(np.isfinite(slopes[2]))


def test_output_depends_on_step_size(rng):
    net = perturbed(MICRO)
    x = rng.standard_normal((1, MICRO.layout.n_tokens, 2))
    with no_grad():
        a = net(x, x, 0.25, 0.0).data
        b = net(x, x, 0.25, 0.5).data
    assert np.abs(a - b).max() > 1e-4


def test_micro_dit_gradients(f64):
    for seed in range(3):
        fn, inputs = micro_dit_case(np.random.default_rng(seed))
        assert check_gradients(fn, inputs) < 1e-6


# -- parameter count -------------------------------------------------------

def test_param_count_micro_by_hand():
    # patch_in 136, positions 64, time 224, one block 976, final 144 + head 72
    assert param_count(MICRO) == 1616
    assert DiT(MICRO, np.random.default_rng(0)).num_parameters() == 1616


def test_param_count_default_matches_module():
    net = DiT(DiTConfig(), np.random.default_rng(0))
    assert param_count(DiTConfig()) == net.num_parameters() == 337_408


def test_doubling_depth_adds_blocks_only():
    base, deep = DiTConfig(depth=4), DiTConfig(depth=8)
    # one block at width 64: adaLN 24,960 + attention 16,448 + MLP 33,088
    assert param_count(deep) - param_count(base) == 4 * 74_496


# -- composed layout and masking -------------------------------------------

def test_composed_layout_mask_and_roundtrip(rng):
    lay = TriplaneLayout()
    comp = ComposedLayout(lay)
    assert comp.shape == (20, 20)
    m = comp.mask()
    assert (~m).sum() == 16 and not m[16:, 16:].any()
    packed = rng.standard_normal((lay.n_tokens, 3))
    canvas = comp.compose(packed)
    assert not canvas[16:, 16:].any()
    assert np.array_equal(comp.decompose(canvas), packed)


def test_masked_loss_ignores_invalid_rows(rng):
    diff = rng.standard_normal((2, 6, 3))
    mask = np.array([True, True, False, True, False, True])
    a = masked_mean_square(Tensor(diff), mask).item()
    diff2 = diff.copy()
    diff2[:, ~mask] = 1e3
    assert masked_mean_square(Tensor(diff2), mask).item() == pytest.approx(a, rel=1e-6)
    assert a == pytest.approx(np.mean(diff[:, mask] ** 2), rel=1e-6)
    with pytest.raises(ValueError):
        masked_mean_square(Tensor(diff), np.zeros(6, dtype=bool))
