"""Box-derived and static positional embeddings.

Boxes are normalised ``(cx, cy, w, h)`` rows. A box is turned into a
sinusoidal code and then projected by a small MLP; the result is the
per-query positional term that follows an instance from frame to frame.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import nnblocks as nb
from . import numcore as nc
from .numcore import DimensionError, Tensor

EMPTY_BOX = (0.5, 0.5, 0.0, 0.0)
FULL_BOX = (0.5, 0.5, 1.0, 1.0)
TEMPERATURE = 10000.0


class BoxCxCyWH(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


def mask2box(mask: np.ndarray) -> BoxCxCyWH:
    """Tight box around the foreground pixels of a binary ``H x W`` mask.

    Pixels are unit cells, so a full mask gives ``(0.5, 0.5, 1, 1)``. An
    empty mask maps to the centred zero-size box.
    """
    return BoxCxCyWH(*mask2box_batch(np.asarray(mask)[None])[0])


def mask2box_batch(masks: np.ndarray) -> np.ndarray:
    """Vectorised :func:`mask2box` over a stack ``[N, H, W]``; returns ``[N, 4]``."""
    masks = np.asarray(masks, dtype=bool)
    n, h, w = masks.shape
    rows = masks.any(axis=2)
    cols = masks.any(axis=1)
    nonempty = rows.any(axis=1)
    rmin = np.argmax(rows, axis=1)
    rmax = h - 1 - np.argmax(rows[:, ::-1], axis=1)
    cmin = np.argmax(cols, axis=1)
    cmax = w - 1 - np.argmax(cols[:, ::-1], axis=1)
    boxes = np.stack(
        [
            (cmin + cmax + 1) / (2.0 * w),
            (rmin + rmax + 1) / (2.0 * h),
            (cmax - cmin + 1) / float(w),
            (rmax - rmin + 1) / float(h),
        ],
        axis=1,
    )
    boxes[~nonempty] = EMPTY_BOX
    return boxes


def sinusoidal_box_encode(box, d_per_coord: int) -> np.ndarray:
    """Interleaved sin/cos code of width ``4 * d_per_coord`` for one box."""
    return sinusoidal_box_encode_batch(np.asarray(box, dtype=float)[None], d_per_coord)[0]


def sinusoidal_box_encode_batch(boxes: np.ndarray, d_per_coord: int) -> np.ndarray:
    if d_per_coord % 2:
        raise ValueError(f"d_per_coord must be even, got {d_per_coord}")
    boxes = np.asarray(boxes, dtype=float)
    freq = TEMPERATURE ** (-2.0 * np.arange(d_per_coord // 2) / d_per_coord)
    phase = 2.0 * np.pi * boxes[:, :, None] * freq  # [N, 4, d/2]
    code = np.empty(boxes.shape + (d_per_coord,))
    code[..., 0::2] = np.sin(phase)
    code[..., 1::2] = np.cos(phase)
    return code.reshape(len(boxes), 4 * d_per_coord)


def init_box_mlp(rng: np.random.Generator, c: int) -> nb.Params:
    return nb.init_mlp(rng, [2 * c, 2 * c, c])


def box_pe_project(encoding, mlp_params: nb.Params) -> Tensor:
    """Project sinusoidal box codes ``[N, 2c]`` (or one ``[2c]`` row) to ``[N, c]``."""
    enc = np.asarray(encoding.data if isinstance(encoding, Tensor) else encoding)
    width = mlp_params["layers"][0]["w"].shape[0]
    single = enc.ndim == 1
    enc = enc.reshape(-1, enc.shape[-1])
    if enc.shape[1] != width:
        raise DimensionError(f"box encoding width {enc.shape[1]} != MLP input width {width}")
    out = nb.mlp(Tensor(enc), mlp_params)
    return nc.reshape(out, (out.shape[1],)) if single else out


def dynamic_pe(masks: np.ndarray, mlp_params: nb.Params) -> Tensor:
    """g_pos rows from a stack of binary masks: MLP(PE(Mask2Box(mask)))."""
    return boxes_to_pe(mask2box_batch(masks), mlp_params)


def boxes_to_pe(boxes: np.ndarray, mlp_params: nb.Params) -> Tensor:
    c = mlp_params["layers"][-1]["w"].shape[1]
    return box_pe_project(sinusoidal_box_encode_batch(boxes, c // 2), mlp_params)


def init_static_table(rng: np.random.Generator, rows: int, c: int) -> Tensor:
    """Learnable frame-independent embeddings, one row per slot."""
    return nc.parameter(rng.normal(0.0, 1.0, size=(rows, c)))
