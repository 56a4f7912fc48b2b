"""Online query propagation, one frame at a time.

Per frame: encode -> pick local queries -> align -> decode -> heads. The
decoder's output queries become the next frame's global queries and the
binarised masks become the next frame's boxes, so query ``i`` keeps
following the same instance for as long as the video runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import aligner as al
from . import nnblocks as nb
from . import numcore as nc
from . import posembed
from . import segmenter as sg
from .config import RunConfig
from .numcore import ContractError, DecisionTrace, Tensor


class Model:
    """Configuration plus the parameter tree ``{"segmenter": ..., "aligner": ...}``."""

    def __init__(self, cfg: RunConfig, params: nb.Params):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: RunConfig, seed: int | None = None) -> Model:
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        params = {"segmenter": sg.init_segmenter(rng, cfg), "aligner": al.init_aligner(rng, cfg)}
        return cls(cfg, params)

    @property
    def seg(self) -> nb.Params:
        return self.params["segmenter"]

    @property
    def ali(self) -> nb.Params:
        return self.params["aligner"]

    def named_parameters(self) -> dict[str, Tensor]:
        return nb.flatten(self.params)

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(t.size for k, t in self.named_parameters().items() if k.startswith(prefix)))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        nb.load_into(self.params, arrays)

    def whole_frame_pe(self) -> Tensor:
        boxes = np.tile(posembed.FULL_BOX, (self.cfg.num_queries, 1))
        return posembed.boxes_to_pe(boxes, self.seg["box_mlp"])


@dataclass
class TrackState:
    q_global: Tensor
    prev_masks: np.ndarray  # [N, H', W'] bool
    g_pos: Tensor
    track_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    frame_index: int = 0

    def check(self) -> None:
        ids = self.track_ids[self.track_ids >= 0]
        if len(np.unique(ids)) != len(ids):
            raise ContractError(f"duplicate track ids in {self.track_ids.tolist()}")


def init_state(model: Model) -> TrackState:
    cfg = model.cfg
    g_pos = model.whole_frame_pe() if cfg.use_trajectory else model.seg["query_pos"]
    return TrackState(
        q_global=al.bootstrap(model.ali),
        prev_masks=np.zeros((cfg.num_queries, cfg.mask_size, cfg.mask_size), dtype=bool),
        g_pos=g_pos,
        track_ids=np.full(cfg.num_queries, -1, dtype=np.int64),
        frame_index=0,
    )


def local_positions(model: Model, features: sg.FrameFeatures, q_local: Tensor, trace: DecisionTrace | None) -> Tensor:
    """Static per-slot table, or (ablation) box embeddings of each local token's own mask."""
    if model.cfg.local_pe == "static":
        return model.ali["local_pos"]
    logits = sg.mask_logits(q_local, features.pixel_embed, model.seg["mask_head"])
    return posembed.dynamic_pe(sg.binarize(logits, trace), model.seg["box_mlp"])


def step(
    state: TrackState, frame: np.ndarray, model: Model, trace: DecisionTrace | None = None
) -> tuple[sg.FramePrediction, TrackState]:
    cfg = model.cfg
    seg = model.seg
    feats = sg.encode_frame(frame, seg, cfg)
    q = state.q_global
    if cfg.use_aligner:
        q_local, _ = sg.select_local_queries(feats, seg["class_head"], cfg.num_local, trace)
        l_pos = local_positions(model, feats, q_local, trace)
        q = al.align(q, q_local, state.g_pos, l_pos, model.ali, cfg.heads)
    out = sg.segmentation_decode(q, state.g_pos, feats, seg, cfg, trace)
    pred = sg.FramePrediction(
        class_logits=nb.apply_linear(out.queries, seg["class_head"]),
        mask_logits=out.per_layer_masks[-1],
        boxes=posembed.mask2box_batch(out.binary_masks),
    )
    new_state = TrackState(
        q_global=out.queries,
        prev_masks=out.binary_masks,
        g_pos=out.g_pos,
        track_ids=state.track_ids.copy(),
        frame_index=state.frame_index + 1,
    )
    return pred, new_state


def birth_tracks(state: TrackState, pred: sg.FramePrediction, threshold: float = 0.5) -> None:
    """Give a fresh id to each unassigned query whose best foreground probability exceeds threshold."""
    fg = pred.class_probs[:, :-1].max(axis=1)
    next_id = int(state.track_ids.max(initial=-1)) + 1
    for i in np.flatnonzero((state.track_ids < 0) & (fg > threshold)):
        state.track_ids[i] = next_id
        next_id += 1


def run_video(
    frames: Iterable[np.ndarray], model: Model, birth_threshold: float | None = 0.5
) -> tuple[list[sg.FramePrediction], TrackState]:
    """Fold :func:`step` over a frame stream without buffering frames.

    Inference only: no differentiation record is built, so memory stays
    bounded by one state plus the current frame.
    """
    preds: list[sg.FramePrediction] = []
    with nc.no_grad():
        state = init_state(model)
        for frame in frames:
            pred, state = step(state, frame, model)
            del frame  # hold no frame while the source produces the next one
            if birth_threshold is not None:
                birth_tracks(state, pred, birth_threshold)
            preds.append(pred)
    if not preds:
        raise ContractError("run_video needs at least one frame")
    return preds, state
