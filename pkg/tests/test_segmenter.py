import numpy as np
import pytest

from propvis import nnblocks as nb
from propvis import numcore as nc
from propvis import posembed
from propvis import segmenter as sg
from propvis.config import ConfigError
from propvis.numcore import Tensor


@pytest.fixture
def seg(small_cfg):
    return sg.init_segmenter(np.random.default_rng(0), small_cfg)


def test_token_layout(small_cfg, seg, rng):
    feats = sg.encode_frame(rng.uniform(size=(3, 32, 32)), seg, small_cfg)
    assert feats.tokens.shape == (80, 32)
    assert feats.num_fine == 64
    assert feats.pixel_embed.shape == (32, 8, 8)
    assert feats.token_positions.shape == (80, 32)


def test_indivisible_frame_rejected(small_cfg, seg):
    with pytest.raises(ConfigError):
        sg.encode_frame(np.zeros((3, 30, 32)), seg, small_cfg)
    with pytest.raises(ConfigError):
        sg.patchify(np.zeros((3, 30, 30)), 4)


def test_constant_frame_gives_identical_stem_tokens(seg):
    fine, coarse = sg.stem_tokens(np.full((3, 32, 32), 0.3), seg, 4)
    assert np.ptp(fine.data, axis=0).max() == 0.0
    assert np.ptp(coarse.data, axis=0).max() == 0.0


def test_patchify_row_major():
    frame = np.arange(3 * 8 * 8, dtype=float).reshape(3, 8, 8)
    patches = sg.patchify(frame, 4)
    assert patches.shape == (4, 48)
    np.testing.assert_array_equal(patches[1].reshape(3, 4, 4), frame[:, 0:4, 4:8])


def test_top_k_examples():
    assert sg.top_k(np.array([0.1, 0.9, 0.4, 0.7]), 2).tolist() == [1, 3]
    assert sg.top_k(np.array([0.5, 0.2, 0.5, 0.5]), 3).tolist() == [0, 2, 3]
    assert sg.top_k(np.array([0.3, 0.1, 0.2]), 3).tolist() == [0, 2, 1]
    with pytest.raises(ConfigError):
        sg.top_k(np.zeros(3), 4)


def test_select_local_queries(small_cfg, seg, rng):
    feats = sg.encode_frame(rng.uniform(size=(3, 32, 32)), seg, small_cfg)
    q, idx = sg.select_local_queries(feats, seg["class_head"], 16)
    scores = sg.token_scores(feats.tokens, seg["class_head"])
    assert q.shape == (16, 32)
    assert np.all(np.diff(scores[idx]) <= 0)
    assert scores[idx].min() >= np.delete(scores, idx).max()
    with pytest.raises(ConfigError):
        sg.select_local_queries(feats, seg["class_head"], 81)


def test_decode_shapes_and_equivariance(small_cfg, seg, rng):
    feats = sg.encode_frame(rng.uniform(size=(3, 32, 32)), seg, small_cfg)
    q = Tensor(rng.normal(size=(8, 32)))
    g = Tensor(rng.normal(size=(8, 32)))
    out = sg.segmentation_decode(q, g, feats, seg, small_cfg)
    assert out.queries.shape == (8, 32) and len(out.per_layer_masks) == 3
    perm = rng.permutation(8)
    pout = sg.segmentation_decode(Tensor(q.data[perm]), Tensor(g.data[perm]), feats, seg, small_cfg)
    assert np.abs(out.queries.data[perm] - pout.queries.data).max() < 1e-9
    for a, b in zip(out.per_layer_masks, pout.per_layer_masks):
        assert np.abs(a.data[perm] - b.data).max() < 1e-9


def test_single_layer_decode_is_one_decoder_layer(small_cfg, rng):
    cfg = small_cfg.replace(decoder_layers=1)
    seg = sg.init_segmenter(np.random.default_rng(1), cfg)
    feats = sg.encode_frame(rng.uniform(size=(3, 32, 32)), seg, cfg)
    q, g = Tensor(rng.normal(size=(8, 32))), Tensor(rng.normal(size=(8, 32)))
    out = sg.segmentation_decode(q, g, feats, seg, cfg)
    ref = nb.decoder_layer(q, g, feats.tokens, feats.token_positions, None, seg["decoder"][0], cfg.heads)
    np.testing.assert_array_equal(out.queries.data, ref.data)


def test_iterative_refinement_uses_masks(small_cfg, seg, rng):
    feats = sg.encode_frame(rng.uniform(size=(3, 32, 32)), seg, small_cfg)
    q, g = Tensor(rng.normal(size=(8, 32))), Tensor(rng.normal(size=(8, 32)))
    out = sg.segmentation_decode(q, g, feats, seg, small_cfg)
    expected = posembed.dynamic_pe(out.binary_masks, seg["box_mlp"]).data
    np.testing.assert_array_equal(out.g_pos.data, expected)


def test_token_mask_full_foreground_equals_full_attention():
    full = sg.token_mask(np.ones((2, 8, 8), bool))
    assert full.shape == (2, 80) and full.all()
    m = np.zeros((1, 8, 8), bool)
    m[0, 0, 0] = True
    tm = sg.token_mask(m)[0]
    assert tm[0] and tm[64] and tm.sum() == 2


def test_predict_heads_examples(rng):
    c = 2
    class_head = {"w": nc.parameter(rng.normal(size=(c, 4))), "b": nc.parameter(np.zeros(4))}
    mask_head = nb.init_mlp(rng, [c, c, c])
    for layer in mask_head["layers"]:
        layer["b"].data[:] = 0.0
    pix = Tensor(rng.normal(size=(c, 2, 2)))
    pred = sg.predict_heads(Tensor(np.zeros((1, c))), pix, class_head, mask_head)
    np.testing.assert_array_equal(pred.class_logits.data, 0.0)
    np.testing.assert_array_equal(pred.mask_logits.data, 0.0)
    # hand-checked map with a linear mask head
    lin = {"layers": [{"w": nc.parameter(np.eye(c)), "b": nc.parameter(np.zeros(c))}]}
    q = Tensor([[1.0, -2.0]])
    pixel = np.array([[[1.0, 2.0], [3.0, 4.0]], [[0.5, 0.0], [1.0, -1.0]]])
    out = sg.predict_heads(q, Tensor(pixel), class_head, lin).mask_logits.data
    np.testing.assert_allclose(out[0], [[0.0, 2.0], [1.0, 6.0]])
    doubled = {"layers": [{"w": nc.parameter(2 * np.eye(c)), "b": nc.parameter(np.zeros(c))}]}
    np.testing.assert_allclose(sg.predict_heads(q, Tensor(pixel), class_head, doubled).mask_logits.data, 2 * out)
    assert pred.boxes.shape == (1, 4)


def test_encode_frame_grad_check(small_cfg, rng):
    cfg = small_cfg.replace(stem_hidden=16, encoder_hidden=32, encoder_layers=1)
    seg = sg.init_segmenter(np.random.default_rng(2), cfg)
    frame = rng.uniform(size=(3, 32, 32))
    r = Tensor(rng.normal(size=(80, 32)))
    params = {k: v for k, v in nb.flatten(seg).items() if k.startswith(("stem", "encoder"))}
    rep = nc.grad_check(lambda: nc.sum(nc.mul(sg.encode_frame(frame, seg, cfg).tokens, r)), params, max_coords=4)
    assert rep.passed, rep.errors


def test_prediction_deterministic_and_boxes_consistent(small_cfg, seg, rng):
    frame = rng.uniform(size=(3, 32, 32))
    runs = []
    for _ in range(2):
        feats = sg.encode_frame(frame, seg, small_cfg)
        q = Tensor(np.ones((8, 32)))
        out = sg.segmentation_decode(q, Tensor(np.zeros((8, 32))), feats, seg, small_cfg)
        runs.append(sg.predict_heads(out.queries, feats.pixel_embed, seg["class_head"], seg["mask_head"]))
    assert runs[0].mask_logits.data.tobytes() == runs[1].mask_logits.data.tobytes()
    np.testing.assert_array_equal(runs[0].boxes, posembed.mask2box_batch(runs[0].masks))
