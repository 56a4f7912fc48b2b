import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_assignment, repaired_schedule_distribution
from propvis import assignloss as al
from propvis import numcore as nc
from propvis.numcore import ContractError, Tensor
from propvis.segmenter import FramePrediction
from propvis.synthvid import FrameGT
from propvis.tracker import Model


def test_hungarian_examples():
    cost = np.ones((3, 3)) - np.eye(3)
    assert al.hungarian(cost) == [(0, 0), (1, 1), (2, 2)]
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = rng.uniform(size=(4, 4))
        pairs, best = brute_force_assignment(c)
        assert al.hungarian(c) == pairs
    c = rng.uniform(size=(2, 3))
    assert al.hungarian(c) == brute_force_assignment(c)[0]
    assert al.hungarian(np.zeros((0, 3))) == []


def test_hungarian_tie_break_is_lexicographic():
    assert al.hungarian(np.zeros((2, 2))) == [(0, 0), (1, 1)]
    assert al.hungarian(np.zeros((3, 2))) == [(0, 0), (1, 1)]
    assert al.hungarian([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]]) == [(0, 0), (1, 2)]


def test_hungarian_rejects_non_finite():
    with pytest.raises(ContractError):
        al.hungarian([[0.0, np.nan], [1.0, 2.0]])
    with pytest.raises(ContractError):
        al.hungarian([[0.0, np.inf]])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1), st.booleans())
def test_hungarian_matches_enumeration(r, c, seed, integer):
    rng = np.random.default_rng(seed)
    cost = rng.integers(0, 3, size=(r, c)).astype(float) if integer else rng.normal(size=(r, c))
    assert al.hungarian(cost) == brute_force_assignment(cost)[0]


def _pred(class_logits, mask_logits):
    return FramePrediction(Tensor(class_logits), Tensor(mask_logits), np.zeros((len(class_logits), 4)))


def _gt_pair():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    b = np.zeros((4, 4), bool)
    b[2:, 2:] = True
    return a, b


def test_match_new_instances_one_shot():
    a, b = _gt_pair()
    logits = np.full((3, 4, 4), -4.0)
    logits[1][a] = 4.0
    logits[2][b] = 4.0
    pred = _pred(np.zeros((3, 4)), logits)
    w = al.LossWeights()
    first = al.match_new_instances(al.Assignment(), pred, FrameGT([(10, 0, a), (11, 1, b)]), w, 0)
    assert first.query_of == {10: 1, 11: 2} and first.birth_frame == {10: 0, 11: 0}
    cost = al.matching_cost(pred, FrameGT([(10, 0, a), (11, 1, b)]), [10, 11], [0, 1, 2], w)
    assert [(10, 11)[i] for i, _ in brute_force_assignment(cost)[0]] == [10, 11]
    # same instances later, masks swapped: nothing is re-matched
    swapped = _pred(np.zeros((3, 4)), logits[[0, 2, 1]])
    again = al.match_new_instances(first, swapped, FrameGT([(10, 0, a), (11, 1, b)]), w, 1)
    assert again.query_of == first.query_of and again.birth_frame == first.birth_frame
    # absence then reappearance: still not re-matched
    gone = al.match_new_instances(first, pred, FrameGT([(11, 1, b)]), w, 2)
    back = al.match_new_instances(gone, swapped, FrameGT([(10, 0, a), (11, 1, b)]), w, 3)
    assert back.query_of == first.query_of
    # a newcomer only sees free queries
    c = np.zeros((4, 4), bool)
    c[0, 3] = True
    more = al.match_new_instances(first, pred, FrameGT([(10, 0, a), (12, 2, c)]), w, 4)
    assert more.query_of[12] == 0 and more.birth_frame[12] == 4


def test_match_overflow_names_count():
    a, b = _gt_pair()
    pred = _pred(np.zeros((1, 4)), np.zeros((1, 4, 4)))
    with pytest.raises(ContractError, match="overflow of 1"):
        al.match_new_instances(al.Assignment(), pred, FrameGT([(1, 0, a), (2, 0, b)]), al.LossWeights())


def test_focal_loss_examples():
    assert al.focal_loss(np.array([0.0]), np.array([1.0])).data[0] == pytest.approx(0.25 * 0.25 * math.log(2))
    assert al.focal_loss(np.array([50.0]), np.array([1.0])).data[0] < 1e-20
    x = np.array([-2.0, 0.3, 1.7])
    t = np.array([0.0, 1.0, 1.0])
    plain = np.logaddexp(0, x) - t * x
    np.testing.assert_allclose(al.focal_loss(x, t, alpha=-1.0, gamma=0.0).data, plain, rtol=1e-12)
    assert np.all(al.focal_loss(np.linspace(-5, 5, 11), np.ones(11)).data >= 0)


def test_dice_examples():
    k = np.zeros((4, 4), bool)
    k[:2, :2] = True
    m = np.zeros((4, 4), bool)
    m[3, :3] = True
    hard = lambda mask: np.where(mask, 60.0, -60.0)
    assert al.dice_loss(hard(k), k).item() == pytest.approx(0.0, abs=1e-12)
    assert al.dice_loss(hard(m), k).item() == pytest.approx(1 - 1 / (4 + 3 + 1), abs=1e-12)
    assert al.dice_loss(hard(np.zeros((4, 4), bool)), np.zeros((4, 4), bool)).item() == pytest.approx(0.0, abs=1e-12)


def test_mask_ce_examples():
    k = np.zeros((3, 3), bool)
    k[1] = True
    assert al.mask_ce_loss(np.where(k, 60.0, -60.0), k).item() < 1e-20
    assert al.mask_ce_loss(np.zeros((3, 3)), k).item() == pytest.approx(math.log(2))
    big = np.tile(np.where(k, 1.0, -0.5), (2, 1))
    assert al.mask_ce_loss(big, np.tile(k, (2, 1))).item() == pytest.approx(
        al.mask_ce_loss(np.where(k, 1.0, -0.5), k).item()
    )


def _toy_clip(small_cfg):
    from propvis import synthvid as sv
    from propvis.training import clip_config

    frames, gt = sv.scenario("crossing", 4, clip_config(small_cfg))
    return frames, gt


def test_clip_loss_additivity(small_cfg):
    model = Model.create(small_cfg, 0)
    frames, gt = _toy_clip(small_cfg)
    full, _, fwd = al.clip_objective(model, frames, gt, np.ones(4, bool))
    w = al.LossWeights.from_config(small_cfg)
    per = [
        al.combine_terms(al.frame_loss_terms(p, g, fwd.assignment, small_cfg), w).item()
        for p, g in zip(fwd.predictions, gt)
    ]
    assert full.item() == pytest.approx(sum(per), rel=1e-12)
    assert min(per) >= 0
    masked = al.clip_loss(fwd.predictions, gt, fwd.assignment, w, np.array([1, 0, 1, 1], bool), small_cfg)
    assert masked.item() == pytest.approx(sum(per) - per[1], rel=1e-12)


def test_clip_gradient_on_two_frame_toy(small_cfg):
    cfg = small_cfg.replace(clip_length=2, stem_hidden=16, coarse_hidden=16, decoder_layers=2, aligner_layers=1)
    model = Model.create(cfg, 1)
    frames, gt = _toy_clip(cfg)
    trace = nc.DecisionTrace()
    sup = np.ones(2, bool)
    al.clip_objective(model, frames, gt, sup, trace)
    trace.replay()

    def f():
        trace.rewind()
        return al.clip_objective(model, frames, gt, sup, trace)[0]

    rep = nc.grad_check(f, model.named_parameters(), max_coords=2)
    assert rep.passed, {k: v for k, v in rep.errors.items() if v >= 1e-4}


def test_unmatched_queries_target_no_object(small_cfg):
    a, _ = _gt_pair()
    pred = _pred(np.zeros((3, 4)), np.zeros((3, 4, 4)))
    asg = al.Assignment({7: 1}, {7: 0})
    terms = al.frame_loss_terms(pred, FrameGT([(7, 2, a)]), asg, small_cfg)
    # with zero logits every focal entry equals its closed form
    pos = 0.25 * 0.25 * math.log(2)
    neg = 0.75 * 0.25 * math.log(2)
    expected = (3 * pos + 9 * neg) / 4  # positives: (1, class 2) plus no-object for queries 0 and 2
    assert terms["cls"].item() == pytest.approx(expected)


def test_schedule_rules():
    rng = np.random.default_rng(0)
    assert al.supervision_schedule(1, rng).tolist() == [True]
    for _ in range(200):
        assert al.supervision_schedule(2, rng).all()
        m = al.supervision_schedule(5, rng)
        assert m[-1] and m.sum() >= 2
        al.check_supervision(m, 5)
    with pytest.raises(ContractError):
        al.check_supervision(np.array([True, True, False]), 3)
    with pytest.raises(ContractError):
        al.check_supervision(np.array([False, True]), 2)


def test_schedule_mean_count_matches_enumeration():
    law = repaired_schedule_distribution(5, 0.5)
    mean = sum(p * (sum(b) + 1) for b, p in law.items())
    var = sum(p * (sum(b) + 1) ** 2 for b, p in law.items()) - mean**2
    rng = np.random.default_rng(9)
    counts = [al.supervision_schedule(5, rng).sum() for _ in range(10_000)]
    assert abs(np.mean(counts) - mean) < 3 * math.sqrt(var / len(counts))


def test_train_step_zero_lr_and_determinism(small_cfg):
    frames, gt = _toy_clip(small_cfg)
    model = Model.create(small_cfg, 0)
    before = model.state_arrays()
    opt = al.AdamW.from_config(small_cfg.replace(lr=0.0, weight_decay=0.0))
    al.train_step(model, frames, gt, opt, np.random.default_rng(0))
    after = model.state_arrays()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def trajectory():
        m = Model.create(small_cfg, 0)
        o = al.AdamW.from_config(small_cfg)
        r = np.random.default_rng(1)
        return [al.train_step(m, frames, gt, o, r).loss for _ in range(3)]

    assert trajectory() == trajectory()


def test_assignment_injective_check():
    with pytest.raises(ContractError):
        al.Assignment({1: 0, 2: 0}).check()
