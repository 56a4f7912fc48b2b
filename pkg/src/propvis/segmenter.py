"""Desk-scale query-based frame segmenter.

Layout of one ``S x S`` frame with patch size ``p``:

* fine tokens: one per ``p x p`` patch, ``(S/p)^2`` of them, row-major;
* coarse tokens: one per ``2p x 2p`` patch, ``(S/2p)^2`` of them;
* masks live on the fine grid, so the mask resolution is ``S/p``.

Each scale has its own per-patch MLP stem standing in for a CNN backbone
stage; a joint self-attention encoder then mixes both scales.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nnblocks as nb
from . import numcore as nc
from . import posembed
from .config import ConfigError, RunConfig
from .numcore import DecisionTrace, Tensor


@dataclass
class FrameFeatures:
    tokens: Tensor  # [M, c], fine tokens first
    token_positions: Tensor  # [M, c], fixed
    pixel_embed: Tensor  # [c, H', W']
    num_fine: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.pixel_embed.shape[1], self.pixel_embed.shape[2]


@dataclass
class FramePrediction:
    class_logits: Tensor  # [N, num_classes + 1], last column = no-object
    mask_logits: Tensor  # [N, H', W']
    boxes: np.ndarray  # [N, 4] cx, cy, w, h of the binarised masks

    @property
    def masks(self) -> np.ndarray:
        return self.mask_logits.data > 0.0

    @property
    def class_probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.class_logits.data))


class DecodeOutput(NamedTuple):
    queries: Tensor
    per_layer_masks: list[Tensor]
    binary_masks: np.ndarray  # final layer, [N, H', W']
    g_pos: Tensor  # positional term after the last refinement


def init_segmenter(rng: np.random.Generator, cfg: RunConfig) -> nb.Params:
    c, p = cfg.width, cfg.patch
    params: nb.Params = {
        "stem_fine": nb.init_mlp(rng, [3 * p * p, cfg.stem_hidden, c]),
        "stem_coarse": nb.init_mlp(rng, [12 * p * p, cfg.coarse_hidden, c]),
        "encoder": [nb.init_encoder_layer(rng, c, cfg.encoder_hidden, cfg.heads) for _ in range(cfg.encoder_layers)],
        "pixel": nb.init_linear(rng, c, c),
        "decoder": [nb.init_decoder_layer(rng, c, cfg.decoder_hidden, cfg.heads) for _ in range(cfg.decoder_layers)],
        "class_head": nb.init_linear(rng, c, cfg.num_classes + 1),
        "mask_head": nb.init_mlp(rng, [c, c, c]),
        "box_mlp": posembed.init_box_mlp(rng, c),
    }
    if not cfg.use_trajectory:
        params["query_pos"] = posembed.init_static_table(rng, cfg.num_queries, c)
    return params


# ---------------------------------------------------------------- encoder


def patchify(frame: np.ndarray, patch: int) -> np.ndarray:
    """``[3, H, W]`` -> ``[(H/patch)*(W/patch), 3*patch*patch]`` in row-major cell order."""
    ch, h, w = frame.shape
    if h % patch or w % patch:
        raise ConfigError(f"frame {h}x{w} is not divisible by patch size {patch}")
    x = frame.reshape(ch, h // patch, patch, w // patch, patch)
    return x.transpose(1, 3, 0, 2, 4).reshape((h // patch) * (w // patch), ch * patch * patch)


def grid_positions(rows: int, cols: int, c: int) -> np.ndarray:
    """Fixed sinusoidal code of each cell centre; width ``c``."""
    yy, xx = np.meshgrid((np.arange(rows) + 0.5) / rows, (np.arange(cols) + 0.5) / cols, indexing="ij")
    centres = np.stack([xx.ravel(), yy.ravel()], axis=1)
    # a zero-size box at each centre; only the cx, cy blocks are kept
    boxes = np.concatenate([centres, np.zeros_like(centres)], axis=1)
    code = posembed.sinusoidal_box_encode_batch(boxes, c // 2)
    return code[:, :c]


def stem_tokens(frame: np.ndarray, params: nb.Params, patch: int) -> tuple[Tensor, Tensor]:
    fine = nb.mlp(Tensor(patchify(frame, patch)), params["stem_fine"])
    coarse = nb.mlp(Tensor(patchify(frame, 2 * patch)), params["stem_coarse"])
    return fine, coarse


def encode_frame(frame: np.ndarray, params: nb.Params, cfg: RunConfig) -> FrameFeatures:
    frame = np.asarray(frame, dtype=float)
    _, h, w = frame.shape
    if h % (2 * cfg.patch) or w % (2 * cfg.patch):
        raise ConfigError(f"frame {h}x{w} is not divisible by the coarse patch size {2 * cfg.patch}")
    fine, coarse = stem_tokens(frame, params, cfg.patch)
    hf, wf = h // cfg.patch, w // cfg.patch
    pos = Tensor(
        np.concatenate(
            [grid_positions(hf, wf, cfg.width), grid_positions(hf // 2, wf // 2, cfg.width)],
            axis=0,
        )
    )
    x = nc.concat([fine, coarse], axis=0)
    for layer in params["encoder"]:
        x = nb.encoder_layer(x, pos, layer, cfg.heads)
    num_fine = hf * wf
    pix = nb.apply_linear(nc.take_rows(x, np.arange(num_fine)), params["pixel"])
    pixel_embed = nc.reshape(nc.transpose(pix), (cfg.width, hf, wf))
    return FrameFeatures(x, pos, pixel_embed, num_fine)


# ------------------------------------------------------- local selection


def token_scores(tokens: Tensor, class_head: nb.Params) -> np.ndarray:
    logits = tokens.data @ class_head["w"].data + class_head["b"].data
    return 1.0 / (1.0 + np.exp(-logits[:, :-1].max(axis=1)))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    if k > len(scores):
        raise ConfigError(f"cannot select {k} local queries from {len(scores)} tokens")
    return np.argsort(-np.asarray(scores), kind="stable")[:k]


def select_local_queries(
    features: FrameFeatures, class_head: nb.Params, k: int, trace: DecisionTrace | None = None
) -> tuple[Tensor, np.ndarray]:
    """The k tokens the shared class head is most confident are foreground."""
    if k > features.tokens.shape[0]:
        raise ConfigError(f"cannot select {k} local queries from {features.tokens.shape[0]} tokens")
    idx = nc.decide(trace, lambda: top_k(token_scores(features.tokens, class_head), k))
    return nc.take_rows(features.tokens, idx), idx


# ---------------------------------------------------------------- decoder


def mask_logits(queries: Tensor, pixel_embed: Tensor, mask_head: nb.Params) -> Tensor:
    """``[N, H', W']`` logits: each query's mask embedding dotted with every pixel embedding."""
    c, h, w = pixel_embed.shape
    emb = nb.mlp(queries, mask_head)
    return nc.reshape(nc.matmul(emb, nc.reshape(pixel_embed, (c, h * w))), (queries.shape[0], h, w))


def token_mask(binary: np.ndarray) -> np.ndarray:
    """Attention mask ``[N, M]`` over fine+coarse tokens from fine-grid masks."""
    n, h, w = binary.shape
    coarse = binary.reshape(n, h // 2, 2, w // 2, 2).any(axis=(2, 4))
    return np.concatenate([binary.reshape(n, -1), coarse.reshape(n, -1)], axis=1)


def binarize(logits: Tensor, trace: DecisionTrace | None = None) -> np.ndarray:
    return nc.decide(trace, lambda: logits.data > 0.0)


def segmentation_decode(
    q_global: Tensor,
    g_pos: Tensor,
    features: FrameFeatures,
    params: nb.Params,
    cfg: RunConfig,
    trace: DecisionTrace | None = None,
) -> DecodeOutput:
    """Decoder stack with mask-restricted cross-attention and box refinement between layers."""
    q = q_global
    attn = None
    per_layer: list[Tensor] = []
    binary = None
    for layer in params["decoder"]:
        q = nb.decoder_layer(q, g_pos, features.tokens, features.token_positions, attn, layer, cfg.heads)
        logits = mask_logits(q, features.pixel_embed, params["mask_head"])
        per_layer.append(logits)
        binary = binarize(logits, trace)
        attn = token_mask(binary)
        if cfg.use_trajectory:
            g_pos = posembed.dynamic_pe(binary, params["box_mlp"])
    return DecodeOutput(q, per_layer, binary, g_pos)


def predict_heads(queries: Tensor, pixel_embed: Tensor, class_head: nb.Params, mask_head: nb.Params) -> FramePrediction:
    logits = mask_logits(queries, pixel_embed, mask_head)
    return FramePrediction(
        class_logits=nb.apply_linear(queries, class_head),
        mask_logits=logits,
        boxes=posembed.mask2box_batch(logits.data > 0.0),
    )
