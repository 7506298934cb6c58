import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowssc.codec import (
    CodecConfig,
    LossWeights,
    TriplaneCodec,
    codec_loss,
    geo_scal_terms,
    grid_tokens,
    sem_scal_terms,
    voxel_centers,
    voxelize_tokens,
)
from flowssc.codec.train import CodecTrainConfig, TrainingDiverged, train_codec
from flowssc.gradsuite import micro_codec_case
from flowssc.synth import SceneSpec, generate_scene
from flowssc.tensor import Tensor, check_gradients, cross_entropy, no_grad, ops
from flowssc.triplane import Triplane, TriplaneLayout

SMALL = CodecConfig(dims=(8, 8, 4), layout=TriplaneLayout(4, 4, 2, 8), heads=2, width=16,
                    self_attn_layers=1, decoder_hidden=16, conv_hidden=8)


def small_grid(seed):
    r = np.random.default_rng(seed)
    g = np.zeros((8, 8, 4), dtype=np.uint8)
    g[:, :, 0] = 1
    for label in (2, 3, 4):
        x, y = r.integers(0, 6, size=2)
        g[x:x + 2, y:y + 2, 1:int(r.integers(2, 4))] = label
    return g


@pytest.fixture(scope="module")
def desk_codec():
    return TriplaneCodec(CodecConfig(), np.random.default_rng(0))


@pytest.fixture(scope="module")
def scenes():
    return [generate_scene(SceneSpec(), s) for s in range(3)]


# -- tokens ---------------------------------------------------------------

def test_single_corner_voxel_token(desk_codec):
    g = np.zeros((32, 32, 8), dtype=np.uint8)
    g[0, 0, 0] = 2
    tokens = voxelize_tokens(g, desk_codec)
    assert len(tokens) == 1
    np.testing.assert_allclose(tokens.positions[0], [0.5 / 32, 0.5 / 32, 0.5 / 8])


def test_full_grid_token_count(desk_codec):
    g = np.ones((32, 32, 8), dtype=np.uint8)
    assert len(voxelize_tokens(g, desk_codec)) == 8192


def test_distinct_classes_distinct_features(desk_codec):
    g = np.zeros((32, 32, 8), dtype=np.uint8)
    g[3, 3, 3], g[3, 3, 4] = 1, 4
    f = voxelize_tokens(g, desk_codec).features
    assert not np.allclose(f[0], f[1])
    g2 = g.copy()
    g2[3, 3, 4] = 1  # same position, other class
    assert not np.allclose(voxelize_tokens(g2, desk_codec).features[1], f[1])


def test_empty_grid_rejected(desk_codec):
    with pytest.raises(ValueError):
        voxelize_tokens(np.zeros((32, 32, 8), dtype=np.uint8), desk_codec)


# -- encoder --------------------------------------------------------------

def test_encoder_permutation_invariant_bit_exact(desk_codec, scenes):
    tokens = grid_tokens(scenes[0])
    perm = np.random.default_rng(1).permutation(len(tokens))
    shuffled = type(tokens)(tokens.positions[perm], tokens.labels[perm])
    with no_grad():
        a = desk_codec.encode_tokens([tokens]).data
        b = desk_codec.encode_tokens([shuffled]).data
    assert np.array_equal(a, b)


def test_encoder_plane_shapes(desk_codec, scenes):
    with no_grad():
        lat = desk_codec.encode(scenes[:2]).data
    lay = desk_codec.config.layout
    assert lat.shape == (2, lay.n_tokens, 16)
    planes = Triplane.unpack(lat[0], lay)
    assert planes.xy.shape == (16, 16, 16)
    assert planes.xz.shape == (16, 4, 16)
    assert planes.yz.shape == (16, 4, 16)


def test_query_count_formula():
    for h, d in [(16, 4), (8, 2), (6, 3)]:
        lay = TriplaneLayout(h, h, d, 4)
        assert lay.n_tokens == h * h + 2 * h * d
    assert TriplaneLayout(6, 4, 2, 3).n_tokens == 6 * 4 + 6 * 2 + 4 * 2


def test_different_scenes_give_different_latents(desk_codec):
    with no_grad():
        for s in range(5):
            a = desk_codec.encode([generate_scene(SceneSpec(), 100 + s)]).data
            b = desk_codec.encode([generate_scene(SceneSpec(), 200 + s)]).data
            assert np.linalg.norm(a - b) > 0


def test_batch_padding_does_not_leak(desk_codec, scenes):
    with no_grad():
        batched = desk_codec.encode(scenes).data
        single = [desk_codec.encode([s]).data[0] for s in scenes]
    for a, b in zip(batched, single):
        np.testing.assert_allclose(a, b, atol=1e-5)


def test_head_count_must_divide_channels():
    with pytest.raises(ValueError):
        CodecConfig(heads=3)


# -- decoder --------------------------------------------------------------

def test_zero_triplane_gives_constant_logits():
    codec = TriplaneCodec(SMALL, np.random.default_rng(2))
    zero = np.zeros((SMALL.layout.n_tokens, SMALL.layout.c))
    with no_grad():
        bias_path = codec.decoder.mlp(Tensor(np.zeros((1, SMALL.layout.c)))).data[0]
    for x in np.random.default_rng(3).random((10, 3)):
        np.testing.assert_allclose(codec.decode_point(zero, x), bias_path, atol=1e-6)


def test_identical_footprints_identical_logits():
    codec = TriplaneCodec(SMALL, np.random.default_rng(4))
    lat = np.random.default_rng(5).standard_normal((SMALL.layout.n_tokens, SMALL.layout.c))
    # both x values fall below the first cell centre, so all projections coincide
    a = codec.decode_point(lat, [0.01, 0.4, 0.6])
    b = codec.decode_point(lat, [0.05, 0.4, 0.6])
    assert np.array_equal(a, b)


def test_decode_grid_shape(desk_codec, scenes):
    with no_grad():
        logits = desk_codec.decode_grid(desk_codec.encode(scenes[:1]), (32, 32, 8))
    assert logits.shape == (1, 32, 32, 8, 5)


def test_identity_conv_matches_point_decoding():
    codec = TriplaneCodec(SMALL, np.random.default_rng(6))
    lat = np.random.default_rng(7).standard_normal((1, SMALL.layout.n_tokens, SMALL.layout.c))
    with no_grad():
        dense = codec.decode_grid(lat).data.reshape(-1, SMALL.num_classes)
        pointwise = codec.decoder.decode_points(lat, voxel_centers(SMALL.dims)).data[0]
    np.testing.assert_allclose(dense, pointwise, atol=1e-5)
    assert np.allclose(codec.decode_point(lat[0], voxel_centers(SMALL.dims)[17]), dense[17], atol=1e-5)


def test_decode_grid_dims_mismatch(desk_codec):
    lat = np.zeros((1, desk_codec.config.layout.n_tokens, 16))
    with pytest.raises(ValueError):
        desk_codec.decode_grid(lat, (16, 16, 8))


def test_full_pipeline_gradient_micro_grid(f64):
    for seed in range(3):
        fn, inputs = micro_codec_case(np.random.default_rng(seed))
        assert check_gradients(fn, inputs) < 1e-6


# -- loss -----------------------------------------------------------------

HAND_PROBS = np.array([
    [0.5, 0.25, 0.25],  # gt 0
    [0.2, 0.6, 0.2],  # gt 1
    [0.1, 0.1, 0.8],  # gt 2
    [0.4, 0.4, 0.2],  # gt 1
])
HAND_GT = np.array([0, 1, 2, 1])


def test_geo_scal_terms_hand_computed(f64):
    terms = geo_scal_terms(Tensor(HAND_PROBS), HAND_GT)
    assert terms["precision"].item() == pytest.approx(2.3 / 2.8, abs=1e-6)
    assert terms["recall"].item() == pytest.approx(2.3 / 3.0, abs=1e-6)
    assert terms["specificity"].item() == pytest.approx(0.5, abs=1e-6)


def test_sem_scal_terms_hand_computed(f64):
    terms = sem_scal_terms(Tensor(HAND_PROBS), HAND_GT)
    expected = {
        0: (0.5 / 1.2, 0.5, 2.3 / 3),
        1: (1.0 / 1.35, 0.5, 0.825),
        2: (0.8 / 1.45, 0.8, 2.35 / 3),
    }
    for k, (prec, rec, spec) in expected.items():
        assert terms[k]["precision"].item() == pytest.approx(prec, abs=1e-6)
        assert terms[k]["recall"].item() == pytest.approx(rec, abs=1e-6)
        assert terms[k]["specificity"].item() == pytest.approx(spec, abs=1e-6)


def test_hand_grid_through_codec_loss(f64):
    logits = Tensor(np.log(HAND_PROBS).reshape(2, 2, 1, 3))
    gt = HAND_GT.reshape(2, 2, 1)
    total, parts = codec_loss(logits, gt)
    ce = -np.mean(np.log(HAND_PROBS[np.arange(4), HAND_GT]))
    geo = -np.log(2.3 / 2.8) - np.log(2.3 / 3) - np.log(0.5)
    sem = np.mean([
        -np.log(0.5 / 1.2) - np.log(0.5) - np.log(2.3 / 3),
        -np.log(1 / 1.35) - np.log(0.5) - np.log(0.825),
        -np.log(0.8 / 1.45) - np.log(0.8) - np.log(2.35 / 3),
    ])
    assert parts["ce"] == pytest.approx(ce, abs=1e-9)
    assert parts["geo_scal"] == pytest.approx(geo, abs=1e-9)
    assert parts["sem_scal"] == pytest.approx(sem, abs=1e-9)
    assert total.item() == pytest.approx(ce + 0.5 * geo + 0.5 * sem, abs=1e-9)


def test_perfect_logits_give_zero_loss(f64):
    gt = np.random.default_rng(0).integers(0, 5, size=(4, 4, 2))
    logits = Tensor(60.0 * np.eye(5)[gt])
    total, _ = codec_loss(logits, gt)
    assert abs(total.item()) < 1e-9


def test_zero_scal_weights_reduce_to_cross_entropy(f64, rng):
    gt = rng.integers(0, 5, size=(4, 4, 2))
    logits = Tensor(rng.standard_normal((4, 4, 2, 5)))
    total, _ = codec_loss(logits, gt, LossWeights(1.0, 0.0, 0.0))
    ce = cross_entropy(ops.reshape(logits, (-1, 5)), gt.reshape(-1))
    assert total.item() == ce.item()


def test_loss_shape_mismatch(rng):
    with pytest.raises(ValueError):
        codec_loss(Tensor(rng.standard_normal((2, 2, 1, 3))), np.zeros((2, 2, 2), dtype=int))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_non_negative(seed):
    r = np.random.default_rng(seed)
    gt = r.integers(0, 4, size=(3, 3, 2))
    total, _ = codec_loss(Tensor(3 * r.standard_normal((3, 3, 2, 4))), gt)
    assert total.item() >= 0.0


# -- convolutional baseline -----------------------------------------------

def test_conv_baseline_same_latent_shape(desk_codec, scenes):
    conv = TriplaneCodec(CodecConfig(kind="conv"), np.random.default_rng(0))
    with no_grad():
        assert conv.encode(scenes[:2]).shape == desk_codec.encode(scenes[:2]).shape


def test_conv_baseline_is_not_a_set_encoder(scenes):
    conv = TriplaneCodec(CodecConfig(kind="conv"), np.random.default_rng(0))
    with pytest.raises(TypeError):
        conv.encode_tokens([grid_tokens(scenes[0])])
    # the same multiset of labelled voxels placed differently encodes differently
    shuffled = scenes[0].reshape(-1)[np.random.default_rng(1).permutation(8192)].reshape(32, 32, 8)
    with no_grad():
        assert not np.allclose(conv.encode([scenes[0]]).data, conv.encode([shuffled]).data)


# -- training -------------------------------------------------------------

def _tiny_run(seed=0, iterations=2, codec_seed=0):
    codec = TriplaneCodec(SMALL, np.random.default_rng(codec_seed))
    grids = [small_grid(s) for s in range(6)]
    cfg = CodecTrainConfig(iterations=iterations, batch_size=2, eval_every=0, warmup=1, seed=seed)
    res = train_codec(codec, grids, grids[:2], cfg)
    return codec, res


def test_one_iteration_changes_parameters():
    before = TriplaneCodec(SMALL, np.random.default_rng(0)).state_dict()
    codec, _ = _tiny_run(iterations=1)
    after = codec.state_dict()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_training_bit_exact_per_seed():
    a, ra = _tiny_run(seed=3)
    b, rb = _tiny_run(seed=3)
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k])
    assert [r["loss"] for r in ra.history] == [r["loss"] for r in rb.history]


def test_short_training_reduces_loss():
    _, res = _tiny_run(iterations=40)
    losses = [r["loss"] for r in res.history]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_divergence_aborts_with_iteration():
    codec = TriplaneCodec(SMALL, np.random.default_rng(0))
    codec.decoder.mlp.layers[0].weight.data[:] = np.nan
    grids = [small_grid(s) for s in range(3)]
    with pytest.raises(TrainingDiverged) as err:
        train_codec(codec, grids, [], CodecTrainConfig(iterations=3, batch_size=2))
    assert err.value.iteration == 0


def test_training_csv_columns(tmp_path):
    codec = TriplaneCodec(SMALL, np.random.default_rng(0))
    grids = [small_grid(s) for s in range(4)]
    train_codec(codec, grids, grids[:2], CodecTrainConfig(iterations=3, batch_size=2, eval_every=2),
                csv_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,iou,miou"
    assert len(lines) == 4
    assert lines[2].split(",")[2] != ""  # eval row after iteration 1
