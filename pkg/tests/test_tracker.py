import numpy as np
import pytest

from propvis import numcore as nc
from propvis import posembed
from propvis import synthvid as sv
from propvis import tracker as tk
from propvis.numcore import ContractError


@pytest.fixture
def model(small_cfg):
    return tk.Model.create(small_cfg, seed=3)


def test_init_state(model):
    s = tk.init_state(model)
    assert s.track_ids.tolist() == [-1] * 8
    assert s.frame_index == 0 and not s.prev_masks.any()
    assert np.ptp(s.g_pos.data, axis=0).max() == 0.0
    t = tk.init_state(model)
    assert s.g_pos.data.tobytes() == t.g_pos.data.tobytes()
    assert s.q_global.data.tobytes() == t.q_global.data.tobytes()


def test_step_contract(model):
    frames, _ = sv.scenario("crossing", 0)
    with nc.no_grad():
        s = tk.init_state(model)
        s.track_ids[2] = 5
        for t, frame in enumerate(frames, start=1):
            pred, s = tk.step(s, frame, model)
            assert s.frame_index == t
            assert s.track_ids.tolist() == [-1, -1, 5, -1, -1, -1, -1, -1]
            np.testing.assert_array_equal(s.prev_masks, pred.masks)
            expected = posembed.dynamic_pe(s.prev_masks, model.seg["box_mlp"]).data
            np.testing.assert_array_equal(s.g_pos.data, expected)
            np.testing.assert_array_equal(pred.boxes, posembed.mask2box_batch(pred.masks))


def test_run_video_equals_manual_fold(model):
    frames, _ = sv.scenario("easy", 1)
    preds, final = tk.run_video(frames, model, birth_threshold=None)
    with nc.no_grad():
        s = tk.init_state(model)
        for frame, p in zip(frames, preds):
            q, s = tk.step(s, frame, model)
            assert q.mask_logits.data.tobytes() == p.mask_logits.data.tobytes()
    assert final.frame_index == len(frames)


def test_single_frame_and_empty_video(model):
    frames, _ = sv.scenario("easy", 0)
    preds, state = tk.run_video(frames[:1], model)
    assert len(preds) == 1 and state.frame_index == 1
    with pytest.raises(ContractError):
        tk.run_video([], model)


def test_blank_video_reaches_fixed_point(model):
    blank = [np.zeros((3, 32, 32))] * 8
    _, _ = tk.run_video(blank, model)
    with nc.no_grad():
        s = tk.init_state(model)
        qs = []
        for f in blank:
            _, s = tk.step(s, f, model)
            qs.append(s.q_global.data.copy())
    gaps = [np.abs(b - a).max() for a, b in zip(qs, qs[1:])]
    assert gaps[-1] <= gaps[0] + 1e-12


def test_streaming_order(model):
    events = []

    def source():
        for t in range(3):
            events.append(("read", t))
            yield np.zeros((3, 32, 32))

    class Spy(list):
        def append(self, item):
            events.append(("pred", len(self)))
            super().append(item)

    orig = tk.step
    try:
        calls = []

        def spying(state, frame, m, trace=None):
            out = orig(state, frame, m, trace)
            events.append(("pred", state.frame_index))
            return out

        tk.step = spying
        tk.run_video(source(), model)
    finally:
        tk.step = orig
    assert events == [("read", 0), ("pred", 0), ("read", 1), ("pred", 1), ("read", 2), ("pred", 2)]


def test_birth_and_identity_persistence(model):
    frames, _ = sv.scenario("crossing", 2)
    preds, state = tk.run_video(frames, model, birth_threshold=0.0)
    ids = state.track_ids
    assert sorted(ids.tolist()) == list(range(8))
    state.check()


def test_duplicate_ids_rejected(model):
    s = tk.init_state(model)
    s.track_ids[:2] = 4
    with pytest.raises(ContractError):
        s.check()


def test_parameter_budget_of_aligner():
    from propvis.config import RunConfig

    m = tk.Model.create(RunConfig())
    share = (m.num_parameters("aligner.layers") + m.num_parameters("aligner.local_pos")) / m.num_parameters()
    assert share <= 0.10
