"""Matching, clip loss and the training step.

Ground-truth instances are matched to queries once, at the first frame they
appear in, and the match is then frozen for the rest of the clip. The loss
sums focal classification, per-pixel sigmoid cross-entropy and dice over the
frames the supervision schedule keeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numcore as nc
from . import tracker as tk
from .config import RunConfig
from .numcore import ContractError, DecisionTrace, Tensor
from .segmenter import FramePrediction
from .synthvid import FrameGT

# ------------------------------------------------------------------ Hungarian


def _solve_square_rows(cost: np.ndarray) -> tuple[float, np.ndarray]:
    """Min-cost assignment of every row for R <= C (shortest augmenting paths with potentials)."""
    r, c = cost.shape
    inf = np.inf
    u = np.zeros(r + 1)
    v = np.zeros(c + 1)
    p = np.zeros(c + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(c + 1, dtype=np.int64)
    for i in range(1, r + 1):
        p[0] = i
        j0 = 0
        minv = np.full(c + 1, inf)
        used = np.zeros(c + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.empty(r, dtype=np.int64)
    for j in range(1, c + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return float(cost[np.arange(r), cols].sum()), cols


def optimal_cost(cost: np.ndarray) -> float:
    """Minimum total over injective pairings of min(R, C) pairs."""
    if cost.size == 0:
        return 0.0
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    return _solve_square_rows(cost)[0]


def hungarian(cost) -> list[tuple[int, int]]:
    """Optimal pairing as ``(row, col)`` pairs sorted by row.

    Among equally cheap pairings the lexicographically smallest pair list is
    returned, so results do not depend on solver internals.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    nr, ncol = cost.shape
    if nr == 0 or ncol == 0:
        return []
    target = optimal_cost(cost)
    tol = 1e-9 * (1.0 + np.abs(cost).sum())
    rows_left = list(range(nr))
    cols_left = list(range(ncol))
    need = min(nr, ncol)
    spent = 0.0
    pairs: list[tuple[int, int]] = []
    while need:
        r = rows_left.pop(0)
        chosen = None
        for col in cols_left:
            rest = [x for x in cols_left if x != col]
            if min(len(rows_left), len(rest)) != need - 1:
                continue
            total = spent + cost[r, col] + optimal_cost(cost[np.ix_(rows_left, rest)])
            if total <= target + tol:
                chosen = col
                break
        if chosen is not None:
            pairs.append((r, chosen))
            cols_left.remove(chosen)
            spent += cost[r, chosen]
            need -= 1
    return pairs


# ----------------------------------------------------------------- matching


@dataclass
class LossWeights:
    cls: float = 2.0
    ce: float = 5.0
    dice: float = 5.0

    @classmethod
    def from_config(cls, cfg: RunConfig) -> LossWeights:
        return cls(cfg.lambda_cls, cfg.lambda_ce, cfg.lambda_dice)


@dataclass
class Assignment:
    """Ground-truth instance id -> query index, fixed at each instance's first frame."""

    query_of: dict[int, int] = field(default_factory=dict)
    birth_frame: dict[int, int] = field(default_factory=dict)

    def copy(self) -> Assignment:
        return Assignment(dict(self.query_of), dict(self.birth_frame))

    def check(self) -> None:
        queries = list(self.query_of.values())
        if len(set(queries)) != len(queries):
            raise ContractError(f"assignment is not injective: {self.query_of}")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def matching_cost(pred: FramePrediction, gt: FrameGT, instance_ids, query_ids, weights: LossWeights) -> np.ndarray:
    """``[instances, queries]`` cost: class miss probability + mask CE + mask dice."""
    probs = _sigmoid(pred.class_logits.data)
    logits = pred.mask_logits.data.reshape(pred.mask_logits.shape[0], -1)
    cost = np.zeros((len(instance_ids), len(query_ids)))
    for a, iid in enumerate(instance_ids):
        cls, mask = gt.instance(iid)
        g = mask.reshape(-1).astype(float)
        for b, q in enumerate(query_ids):
            x = logits[q]
            p = _sigmoid(x)
            ce = np.mean(_softplus(x) - g * x)
            dice = 1.0 - (2.0 * np.sum(p * g) + 1.0) / (np.sum(p) + np.sum(g) + 1.0)
            cost[a, b] = weights.cls * (1.0 - probs[q, cls]) + weights.ce * ce + weights.dice * dice
    return cost


def match_new_instances(
    assignment: Assignment,
    pred: FramePrediction,
    gt: FrameGT,
    weights: LossWeights,
    frame_index: int = 0,
    trace: DecisionTrace | None = None,
) -> Assignment:
    """Match instances appearing for the first time to still-free queries; older pairs are untouched."""
    new = [iid for iid in gt.ids if iid not in assignment.query_of]
    if not new:
        return assignment
    used = set(assignment.query_of.values())
    free = [q for q in range(pred.class_logits.shape[0]) if q not in used]
    if len(new) > len(free):
        raise ContractError(
            f"{len(new)} new instances at frame {frame_index} but only {len(free)} free queries "
            f"(overflow of {len(new) - len(free)})"
        )

    def solve():
        return hungarian(matching_cost(pred, gt, new, free, weights))

    out = assignment.copy()
    for a, b in nc.decide(trace, solve):
        out.query_of[new[a]] = free[b]
        out.birth_frame[new[a]] = frame_index
    out.check()
    return out


# ------------------------------------------------------------------- losses


def focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise sigmoid focal loss; a negative alpha disables class balancing."""
    x = nc.as_tensor(logits)
    t = np.asarray(targets, dtype=float)
    sign = 2.0 * t - 1.0
    log_pt = nc.log_sigmoid(nc.mul(x, sign))
    loss = nc.mul(log_pt, -1.0)
    if gamma:
        modulator = nc.exp(nc.mul(nc.log_sigmoid(nc.mul(x, -sign)), gamma))
        loss = nc.mul(loss, modulator)
    if alpha >= 0:
        loss = nc.mul(loss, alpha * t + (1.0 - alpha) * (1.0 - t))
    return loss


def dice_loss(mask_logits, gt_mask) -> Tensor:
    x = nc.as_tensor(mask_logits)
    g = np.asarray(gt_mask, dtype=float)
    if x.shape != g.shape:
        raise nc.DimensionError(f"dice: logits {x.shape} vs mask {g.shape}")
    p = nc.sigmoid(x)
    num = nc.add(nc.mul(nc.sum(nc.mul(p, g)), 2.0), 1.0)
    den = nc.add(nc.sum(p), g.sum() + 1.0)
    return nc.sub(1.0, nc.div(num, den))


def mask_ce_loss(mask_logits, gt_mask) -> Tensor:
    x = nc.as_tensor(mask_logits)
    g = np.asarray(gt_mask, dtype=float)
    if x.shape != g.shape:
        raise nc.DimensionError(f"mask CE: logits {x.shape} vs mask {g.shape}")
    per_pixel = nc.add(nc.mul(nc.log_sigmoid(x), -g), nc.mul(nc.log_sigmoid(nc.mul(x, -1.0)), g - 1.0))
    return nc.mean(per_pixel)


def frame_loss_terms(
    pred: FramePrediction, gt: FrameGT, assignment: Assignment, cfg: RunConfig
) -> dict[str, Tensor]:
    """Unweighted per-term losses for one frame, each normalised by the instance count."""
    n, width = pred.class_logits.shape
    present = [iid for iid in gt.ids if iid in assignment.query_of]
    norm = 1.0 / max(1, len(present))
    targets = np.zeros((n, width))
    targets[:, -1] = 1.0
    for iid in present:
        q = assignment.query_of[iid]
        targets[q, -1] = 0.0
        targets[q, gt.instance(iid)[0]] = 1.0
    focal = focal_loss(pred.class_logits, targets, cfg.focal_alpha, cfg.focal_gamma)
    terms = {"cls": nc.mul(nc.sum(focal), norm / width)}
    if present:
        qs = [assignment.query_of[iid] for iid in present]
        logits = nc.take_rows(nc.reshape(pred.mask_logits, (n, -1)), qs)
        gts = np.stack([gt.instance(iid)[1].reshape(-1) for iid in present]).astype(float)
        terms["ce"] = nc.mul(nc.sum(nc.mean(_bce(logits, gts), axis=1)), norm)
        terms["dice"] = nc.mul(nc.sum(_dice_rows(logits, gts)), norm)
    else:
        zero = nc.mul(nc.sum(pred.mask_logits), 0.0)
        terms["ce"] = zero
        terms["dice"] = zero
    return terms


def _bce(x: Tensor, g: np.ndarray) -> Tensor:
    return nc.add(nc.mul(nc.log_sigmoid(x), -g), nc.mul(nc.log_sigmoid(nc.mul(x, -1.0)), g - 1.0))


def _dice_rows(x: Tensor, g: np.ndarray) -> Tensor:
    p = nc.sigmoid(x)
    num = nc.add(nc.mul(nc.sum(nc.mul(p, g), axis=1), 2.0), 1.0)
    den = nc.add(nc.sum(p, axis=1), g.sum(axis=1) + 1.0)
    return nc.sub(1.0, nc.div(num, den))


def combine_terms(terms: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    return nc.add(
        nc.add(nc.mul(terms["cls"], weights.cls), nc.mul(terms["ce"], weights.ce)),
        nc.mul(terms["dice"], weights.dice),
    )


def clip_loss(
    predictions: Sequence[FramePrediction],
    clip_gt: Sequence[FrameGT],
    assignment: Assignment,
    weights: LossWeights,
    sup_mask: np.ndarray,
    cfg: RunConfig,
) -> Tensor:
    """Sum of weighted frame losses over the supervised frames."""
    check_supervision(sup_mask, len(predictions))
    total = None
    for pred, gt, keep in zip(predictions, clip_gt, sup_mask):
        if not keep:
            continue
        frame = combine_terms(frame_loss_terms(pred, gt, assignment, cfg), weights)
        total = frame if total is None else nc.add(total, frame)
    return total


# --------------------------------------------------------------- schedule


def supervision_schedule(T: int, rng: np.random.Generator, p_keep: float = 0.5) -> np.ndarray:
    """Random subset of frames to supervise: always the last, and at least two when T >= 2."""
    if T < 1:
        raise ContractError(f"clip length must be positive, got {T}")
    keep = np.zeros(T, dtype=bool)
    keep[-1] = True
    if T == 1:
        return keep
    keep[:-1] = rng.random(T - 1) < p_keep
    if not keep[:-1].any():
        keep[rng.integers(T - 1)] = True
    return keep


def check_supervision(mask: np.ndarray, T: int) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (T,) or not mask[-1] or (T >= 2 and mask.sum() < 2):
        raise ContractError(f"invalid supervision mask {mask.astype(int).tolist()} for {T} frames")


# -------------------------------------------------------------- optimiser


@dataclass
class AdamW:
    """Adam with decoupled weight decay over one flat view of all parameters."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 0.0
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    names: list[str] = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> AdamW:
        return cls(cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.grad_clip)

    def update(self, params: Mapping[str, Tensor]) -> float:
        """One optimiser step; returns the gradient norm before clipping."""
        names = list(params)
        if self.m is None:
            self.names = names
            size = int(np.sum([p.size for p in params.values()]))
            self.m = np.zeros(size)
            self.v = np.zeros(size)
        elif names != self.names:
            raise ContractError("optimizer was created for a different parameter set")
        tensors = list(params.values())
        flat = np.concatenate([p.data.reshape(-1) for p in tensors])
        g = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1) for p in tensors])
        norm = float(np.sqrt(g @ g))
        if self.grad_clip > 0 and norm > self.grad_clip:
            g *= self.grad_clip / norm
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        self.m = b1 * self.m + (1.0 - b1) * g
        self.v = b2 * self.v + (1.0 - b2) * (g * g)
        mhat = self.m / (1.0 - b1**self.step_count)
        vhat = self.v / (1.0 - b2**self.step_count)
        flat = flat - self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * flat)
        offset = 0
        for p in tensors:
            p.data = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim.step": np.array([float(self.step_count)])}
        if self.m is not None:
            out["optim.m"] = self.m.copy()
            out["optim.v"] = self.v.copy()
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray], names: Sequence[str]) -> None:
        self.step_count = int(arrays["optim.step"][0]) if "optim.step" in arrays else 0
        if "optim.m" in arrays:
            self.m = arrays["optim.m"].copy()
            self.v = arrays["optim.v"].copy()
            self.names = list(names)


# ------------------------------------------------------------ train step


@dataclass
class ClipForward:
    predictions: list[FramePrediction]
    assignments: list[Assignment]
    states: list[tk.TrackState]

    @property
    def assignment(self) -> Assignment:
        return self.assignments[-1]


def forward_clip(
    model: tk.Model,
    frames: Sequence[np.ndarray],
    gt: Sequence[FrameGT],
    weights: LossWeights,
    trace: DecisionTrace | None = None,
) -> ClipForward:
    """Run the tracker over a clip, matching each instance once at its first frame."""
    state = tk.init_state(model)
    assignment = Assignment()
    preds, assigns, states = [], [], []
    for t, (frame, frame_gt) in enumerate(zip(frames, gt)):
        pred, state = tk.step(state, frame, model, trace)
        assignment = match_new_instances(assignment, pred, frame_gt, weights, t, trace)
        preds.append(pred)
        assigns.append(assignment)
        states.append(state)
    return ClipForward(preds, assigns, states)


def clip_objective(
    model: tk.Model,
    frames,
    gt,
    sup_mask: np.ndarray,
    trace: DecisionTrace | None = None,
) -> tuple[Tensor, dict[str, float], ClipForward]:
    cfg = model.cfg
    weights = LossWeights.from_config(cfg)
    fwd = forward_clip(model, frames, gt, weights, trace)
    check_supervision(sup_mask, len(frames))
    total = None
    logged = {"cls": 0.0, "ce": 0.0, "dice": 0.0}
    for pred, frame_gt, keep in zip(fwd.predictions, gt, sup_mask):
        if not keep:
            continue
        terms = frame_loss_terms(pred, frame_gt, fwd.assignment, cfg)
        for k in logged:
            logged[k] += terms[k].item()
        frame = combine_terms(terms, weights)
        total = frame if total is None else nc.add(total, frame)
    return total, logged, fwd


@dataclass
class StepResult:
    loss: float
    terms: dict[str, float]
    supervised: np.ndarray
    grad_norm: float
    assignment: Assignment


def train_step(
    model: tk.Model,
    frames: Sequence[np.ndarray],
    gt: Sequence[FrameGT],
    optimizer: AdamW,
    rng: np.random.Generator,
) -> StepResult:
    """Forward over the clip, clip loss on the scheduled frames, backward, one optimiser update."""
    cfg = model.cfg
    T = len(frames)
    if cfg.reduced_supervision:
        sup = supervision_schedule(T, rng, cfg.p_keep)
    else:
        sup = np.ones(T, dtype=bool)
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    loss, terms, fwd = clip_objective(model, frames, gt, sup)
    nc.backward(loss)
    norm = optimizer.update(params)
    for p in params.values():
        p.grad = None
    return StepResult(loss.item(), terms, sup, norm, fwd.assignment)
