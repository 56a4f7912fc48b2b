"""Clip-level evaluation: mask IoU, track IoU, query consistency, AP@0.5.

Predictions are per-query: query ``i`` in every frame is one predicted
track. Ground truth comes as a list of :class:`~propvis.synthvid.FrameGT`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .numcore import DimensionError
from .synthvid import FrameGT


def mask_iou(a, b) -> float:
    """Intersection over union of two binary masks; two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def st_track_iou(pred_track, gt_track) -> float:
    """Summed intersections over summed unions across frames.

    ``None`` entries stand for frames where the track is absent. A pair of
    tracks that are empty everywhere scores 1, matching :func:`mask_iou`.
    """
    if len(pred_track) != len(gt_track):
        raise DimensionError(f"track lengths differ: {len(pred_track)} vs {len(gt_track)}")
    inter = union = 0
    shape = None
    for p, g in zip(pred_track, gt_track):
        if p is None and g is None:
            continue
        if p is None:
            p = np.zeros_like(g, dtype=bool)
        if g is None:
            g = np.zeros_like(p, dtype=bool)
        p = np.asarray(p, dtype=bool)
        g = np.asarray(g, dtype=bool)
        if p.shape != g.shape or (shape is not None and p.shape != shape):
            raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
        shape = p.shape
        inter += np.count_nonzero(p & g)
        union += np.count_nonzero(p | g)
    return 1.0 if union == 0 else inter / union


def iou_matrix(masks: np.ndarray, gt_mask: np.ndarray) -> np.ndarray:
    """IoU of every query mask ``[N, H, W]`` against one ground-truth mask."""
    masks = np.asarray(masks, dtype=bool)
    g = np.asarray(gt_mask, dtype=bool)
    if masks.shape[1:] != g.shape:
        raise DimensionError(f"mask shapes differ: {masks.shape[1:]} vs {g.shape}")
    flat = masks.reshape(masks.shape[0], -1)
    gf = g.reshape(-1)
    inter = np.count_nonzero(flat & gf, axis=1)
    union = np.count_nonzero(flat | gf, axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


# ------------------------------------------------------------ consistency


@dataclass
class InstanceReport:
    instance: int
    anchor_query: int | None
    mean_iou: float
    consistency: float | None
    switches: int
    frames: int


@dataclass
class TrackEvalReport:
    instances: list[InstanceReport] = field(default_factory=list)
    mean_iou: float = 0.0
    mean_consistency: float = 0.0
    total_switches: int = 0
    unmatched: list[int] = field(default_factory=list)
    ap50: float = 0.0

    def check(self) -> None:
        for r in self.instances:
            if r.consistency is not None and not 0.0 <= r.consistency <= 1.0:
                raise ValueError(f"consistency {r.consistency} out of range")
            if r.switches < 0:
                raise ValueError("negative switch count")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _presence(gt: Sequence[FrameGT]) -> dict[int, list[tuple[int, int, np.ndarray]]]:
    out: dict[int, list] = {}
    for t, frame in enumerate(gt):
        for iid, cls, mask in frame.instances:
            if np.any(mask):
                out.setdefault(iid, []).append((t, cls, mask))
    return dict(sorted(out.items()))


def track_consistency(predictions: Sequence[np.ndarray], gt: Sequence[FrameGT], anchor_iou: float = 0.5) -> TrackEvalReport:
    """Per-instance anchoring, consistency and switch counts.

    ``predictions[t]`` is the ``[N, H, W]`` boolean mask stack of frame t.
    A frame counts toward consistency only when the anchor query has the
    largest IoU and that IoU is positive; ties go to the lower query index.
    """
    if len(predictions) != len(gt):
        raise DimensionError(f"{len(predictions)} prediction frames vs {len(gt)} ground-truth frames")
    report = TrackEvalReport()
    for iid, frames in _presence(gt).items():
        ious = [iou_matrix(predictions[t], mask) for t, _, mask in frames]
        best = [int(np.argmax(row)) if row.max() > 0 else None for row in ious]
        switches = 0
        last = None
        for b in best:
            if b is None:
                continue
            if last is not None and b != last:
                switches += 1
            last = b
        first = ious[0]
        if first.max() <= anchor_iou:
            report.unmatched.append(iid)
            report.instances.append(InstanceReport(iid, None, 0.0, None, switches, len(frames)))
            continue
        anchor = int(np.argmax(first))
        later = best[1:]
        consistency = float(np.mean([b == anchor for b in later])) if later else 1.0
        mean_iou = float(np.mean([row[anchor] for row in ious]))
        report.instances.append(InstanceReport(iid, anchor, mean_iou, consistency, switches, len(frames)))
    matched = [r for r in report.instances if r.anchor_query is not None]
    report.mean_iou = float(np.mean([r.mean_iou for r in matched])) if matched else 0.0
    report.mean_consistency = float(np.mean([r.consistency for r in matched])) if matched else 0.0
    report.total_switches = int(sum(r.switches for r in report.instances))
    report.check()
    return report


# --------------------------------------------------------------------- AP


@dataclass
class PredTrack:
    masks: list  # per frame, bool mask or None
    label: int
    score: float


def tracks_from_queries(
    masks: Sequence[np.ndarray], class_probs: Sequence[np.ndarray], keep_empty: bool = False
) -> list[PredTrack]:
    """One track per query; score is the mean foreground probability of its best class."""
    probs = np.mean([p[:, :-1] for p in class_probs], axis=0)
    tracks = []
    for q in range(probs.shape[0]):
        seq = [np.asarray(m[q], dtype=bool) for m in masks]
        if not keep_empty and not any(s.any() for s in seq):
            continue
        label = int(np.argmax(probs[q]))
        tracks.append(PredTrack(seq, label, float(probs[q, label])))
    return tracks


def gt_tracks(gt: Sequence[FrameGT]) -> list[tuple[int, int, list]]:
    """``(id, class, per-frame masks)`` with ``None`` where the instance is absent."""
    out = []
    for iid, frames in _presence(gt).items():
        seq: list = [None] * len(gt)
        for t, _, mask in frames:
            seq[t] = mask
        out.append((iid, frames[0][1], seq))
    return out


def _interpolated_ap(tp: Sequence[bool], num_gt: int, interpolation: str) -> float:
    if num_gt == 0 or not len(tp):
        return 0.0
    hits = np.cumsum(tp)
    recall = hits / num_gt
    precision = hits / np.arange(1, len(tp) + 1)
    if interpolation == "11point":
        return float(
            np.mean([precision[recall >= r].max() if np.any(recall >= r) else 0.0 for r in np.linspace(0, 1, 11)])
        )
    if interpolation == "all":
        # area under the monotone envelope, stepping at each recall change
        envelope = np.maximum.accumulate(precision[::-1])[::-1]
        steps = np.diff(np.concatenate([[0.0], recall]))
        return float(np.sum(steps * envelope))
    raise ValueError(f"unknown interpolation {interpolation!r}")


def average_precision(
    predictions: Sequence[PredTrack], gt: Sequence[FrameGT], iou_threshold: float = 0.5, interpolation: str = "11point"
) -> float:
    """Track-level AP: greedy matching by descending score to same-class unclaimed tracks."""
    targets = gt_tracks(gt)
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    claimed: set[int] = set()
    tp = []
    for i in order:
        pred = predictions[i]
        best, best_iou = None, iou_threshold
        for j, (_, cls, seq) in enumerate(targets):
            if j in claimed or cls != pred.label:
                continue
            iou = st_track_iou(pred.masks, seq)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best is not None:
            claimed.add(best)
        tp.append(best is not None)
    return _interpolated_ap(tp, len(targets), interpolation)


def evaluate_clip(masks: Sequence[np.ndarray], class_probs: Sequence[np.ndarray], gt: Sequence[FrameGT]) -> TrackEvalReport:
    report = track_consistency(masks, gt)
    report.ap50 = average_precision(tracks_from_queries(masks, class_probs), gt)
    return report


def summarize(reports: Sequence[TrackEvalReport]) -> dict:
    """Dataset-level figures; consistency and IoU pool every anchored instance."""
    matched = [i for r in reports for i in r.instances if i.anchor_query is not None]
    return {
        "clips": len(reports),
        "anchored_instances": len(matched),
        "mean_consistency": float(np.mean([i.consistency for i in matched])) if matched else 0.0,
        "mean_iou": float(np.mean([i.mean_iou for i in matched])) if matched else 0.0,
        "total_switches": int(sum(r.total_switches for r in reports)),
        "unmatched_instances": int(sum(len(r.unmatched) for r in reports)),
        "ap50": float(np.mean([r.ap50 for r in reports])) if reports else 0.0,
    }
