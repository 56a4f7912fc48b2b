"""Transformer building blocks on top of :mod:`propvis.numcore`.

Parameters are plain nested dicts of :class:`~propvis.numcore.Tensor`; the
dotted path of a leaf is its checkpoint name. Layers are post-norm and
positional embeddings are added to queries and keys only, never to values.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from . import numcore as nc
from .numcore import DimensionError, Tensor

Params = dict[str, Any]


# ------------------------------------------------------------------ init


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> Params:
    bound = 1.0 / np.sqrt(fan_in)
    return {
        "w": nc.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out))),
        "b": nc.parameter(np.zeros(fan_out)),
    }


def init_layernorm(width: int) -> Params:
    return {"gain": nc.parameter(np.ones(width)), "bias": nc.parameter(np.zeros(width))}


def init_attention(rng: np.random.Generator, c: int, heads: int) -> Params:
    if c % heads:
        raise ValueError(f"width {c} is not divisible by {heads} heads")
    return {name: init_linear(rng, c, c) for name in ("q", "k", "v", "out")}


def init_mlp(rng: np.random.Generator, widths: list[int]) -> Params:
    return {"layers": [init_linear(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]}


def init_decoder_layer(rng: np.random.Generator, c: int, hidden: int, heads: int) -> Params:
    if hidden < c:
        raise ValueError(f"feed-forward width {hidden} is narrower than the model width {c}")
    return {
        "self_attn": init_attention(rng, c, heads),
        "cross_attn": init_attention(rng, c, heads),
        "ffn": init_mlp(rng, [c, hidden, c]),
        "norm1": init_layernorm(c),
        "norm2": init_layernorm(c),
        "norm3": init_layernorm(c),
    }


def init_encoder_layer(rng: np.random.Generator, c: int, hidden: int, heads: int) -> Params:
    return {
        "self_attn": init_attention(rng, c, heads),
        "ffn": init_mlp(rng, [c, hidden, c]),
        "norm1": init_layernorm(c),
        "norm2": init_layernorm(c),
    }


def init_params(spec: dict[str, Any], seed: int) -> Params:
    """Initialise a decoder stack described by ``spec`` (keys: c, hidden, heads, layers)."""
    rng = np.random.default_rng(seed)
    return {
        "layers": [
            init_decoder_layer(rng, spec["c"], spec["hidden"], spec["heads"])
            for _ in range(spec.get("layers", 1))
        ]
    }


# ------------------------------------------------------- parameter trees


def flatten(params: Params, prefix: str = "") -> dict[str, Tensor]:
    """Dotted-name view of every leaf tensor, in a stable insertion order."""
    out: dict[str, Tensor] = {}
    items = params.items() if isinstance(params, dict) else enumerate(params)
    for key, value in items:
        name = f"{prefix}{key}"
        if isinstance(value, Tensor):
            out[name] = value
        else:
            out.update(flatten(value, name + "."))
    return out


def load_into(params: Params, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    for name, tensor in flatten(params, prefix).items():
        if name not in arrays:
            raise KeyError(f"checkpoint has no entry {name!r}")
        if arrays[name].shape != tensor.shape:
            raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} != {tensor.shape}")
        tensor.data = arrays[name].copy()


def count(params: Params) -> int:
    return int(np.sum([t.size for t in flatten(params).values()]))


# ---------------------------------------------------------------- layers


def apply_linear(x: Tensor, p: Params) -> Tensor:
    return nc.linear(x, p["w"], p["b"])


def mlp(x: Tensor, p: Params) -> Tensor:
    layers = p["layers"]
    for i, layer in enumerate(layers):
        x = apply_linear(x, layer)
        if i < len(layers) - 1:
            x = nc.gelu(x)
    return x


def _with_pos(x: Tensor, pos: Tensor | None) -> Tensor:
    return x if pos is None else nc.add(x, pos)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Fused multi-head softmax(QK^T / sqrt(d)) V on already-projected inputs.

    ``mask[i, j]`` False blocks query i from key j. Rows with no allowed key
    fall back to attending everywhere.
    """
    nq, c = q.shape
    nk = k.shape[0]
    if k.shape[1] != c or v.shape != k.shape:
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    d = c // heads
    qh = q.data.reshape(nq, heads, d).transpose(1, 0, 2)
    kh = k.data.reshape(nk, heads, d).transpose(1, 0, 2)
    vh = v.data.reshape(nk, heads, d).transpose(1, 0, 2)
    scale = 1.0 / np.sqrt(d)
    logits = (qh @ kh.transpose(0, 2, 1)) * scale
    if mask is not None:
        if mask.shape != (nq, nk):
            raise DimensionError(f"attention mask {mask.shape} vs ({nq}, {nk})")
        allowed = mask | ~mask.any(axis=1, keepdims=True)
        logits = np.where(allowed[None], logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    out = (w @ vh).transpose(1, 0, 2).reshape(nq, c)

    def rule(g):
        gh = g.reshape(nq, heads, d).transpose(1, 0, 2)
        gv = w.transpose(0, 2, 1) @ gh
        gw = gh @ vh.transpose(0, 2, 1)
        gl = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * scale
        gq = gl @ kh
        gk = gl.transpose(0, 2, 1) @ qh
        merge = lambda t, n: t.transpose(1, 0, 2).reshape(n, c)  # noqa: E731
        return merge(gq, nq), merge(gk, nk), merge(gv, nk)

    return nc.make_op(out, (q, k, v), rule)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    q_pos: Tensor | None,
    k_pos: Tensor | None,
    mask: np.ndarray | None,
    params: Params,
    heads: int,
) -> Tensor:
    c = params["q"]["w"].shape[0]
    for name, t in (("q", q), ("k", k), ("v", v), ("q_pos", q_pos), ("k_pos", k_pos)):
        if t is not None and (t.data.ndim != 2 or t.shape[1] != c):
            raise DimensionError(f"attention: {name} has shape {t.shape}, expected [*, {c}]")
    if q_pos is not None and q_pos.shape != q.shape:
        raise DimensionError(f"attention: q_pos {q_pos.shape} vs q {q.shape}")
    if k_pos is not None and k_pos.shape != k.shape:
        raise DimensionError(f"attention: k_pos {k_pos.shape} vs k {k.shape}")
    qp = apply_linear(_with_pos(q, q_pos), params["q"])
    kp = apply_linear(_with_pos(k, k_pos), params["k"])
    vp = apply_linear(v, params["v"])
    return apply_linear(scaled_dot_attention(qp, kp, vp, heads, mask), params["out"])


def decoder_layer(
    queries: Tensor,
    q_pos: Tensor | None,
    memory: Tensor,
    m_pos: Tensor | None,
    attn_mask: np.ndarray | None,
    params: Params,
    heads: int,
) -> Tensor:
    """Self-attention, then cross-attention over memory, then feed-forward; each with residual + norm."""
    x = queries
    h = attention(x, x, x, q_pos, q_pos, None, params["self_attn"], heads)
    x = _norm(nc.add(x, h), params["norm1"])
    h = attention(x, memory, memory, q_pos, m_pos, attn_mask, params["cross_attn"], heads)
    x = _norm(nc.add(x, h), params["norm2"])
    x = _norm(nc.add(x, mlp(x, params["ffn"])), params["norm3"])
    return x


def encoder_layer(tokens: Tensor, pos: Tensor | None, params: Params, heads: int) -> Tensor:
    x = tokens
    h = attention(x, x, x, pos, pos, None, params["self_attn"], heads)
    x = _norm(nc.add(x, h), params["norm1"])
    return _norm(nc.add(x, mlp(x, params["ffn"])), params["norm2"])


def _norm(x: Tensor, p: Params) -> Tensor:
    return nc.layernorm(x, p["gain"], p["bias"])
