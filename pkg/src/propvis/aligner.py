"""Early alignment of propagated queries with the current frame.

The propagated (global) queries act as attention queries; the top-k
confident encoder tokens of the current frame (local queries) act as keys
and values. Rows keep their order, so query ``i`` still tracks whatever it
tracked before alignment.
"""

from __future__ import annotations

import numpy as np

from . import nnblocks as nb
from . import posembed
from .config import RunConfig
from .numcore import DimensionError, Tensor


def init_aligner(rng: np.random.Generator, cfg: RunConfig) -> nb.Params:
    params: nb.Params = {"bootstrap_queries": posembed.init_static_table(rng, cfg.num_queries, cfg.width)}
    if cfg.use_aligner:
        params["layers"] = [
            nb.init_decoder_layer(rng, cfg.width, cfg.aligner_hidden, cfg.heads) for _ in range(cfg.aligner_layers)
        ]
        if cfg.local_pe == "static":
            params["local_pos"] = posembed.init_static_table(rng, cfg.num_local, cfg.width)
    return params


def align(q_global: Tensor, q_local: Tensor, g_pos: Tensor, l_pos: Tensor, params: nb.Params, heads: int) -> Tensor:
    """Cross-attend global queries (with g_pos) over local queries (with l_pos)."""
    if q_global.shape[0] < 1 or q_local.shape[0] < 1:
        raise DimensionError("align needs at least one global and one local query")
    if q_global.shape[1] != q_local.shape[1]:
        raise DimensionError(f"align: global width {q_global.shape[1]} != local width {q_local.shape[1]}")
    q = q_global
    for layer in params["layers"]:
        q = nb.decoder_layer(q, g_pos, q_local, l_pos, None, layer, heads)
    return q


def bootstrap(params: nb.Params) -> Tensor:
    """Learnable stand-in for the global queries before any frame has been seen."""
    return params["bootstrap_queries"]
