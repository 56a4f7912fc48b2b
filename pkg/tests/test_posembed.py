import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import scan_box
from propvis import nnblocks as nb
from propvis import numcore as nc
from propvis import posembed as pe
from propvis.numcore import DimensionError


def test_mask2box_examples():
    assert pe.mask2box(np.ones((8, 8), bool)) == (0.5, 0.5, 1.0, 1.0)
    assert pe.mask2box(np.zeros((8, 8), bool)) == (0.5, 0.5, 0.0, 0.0)
    m = np.zeros((8, 8), bool)
    m[2:5, 1:7] = True
    assert pe.mask2box(m) == (0.5, 0.4375, 0.75, 0.375)


@settings(max_examples=200)
@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_mask2box_matches_scan(mask):
    assert tuple(pe.mask2box(mask)) == scan_box(mask)


@given(arrays(bool, (6, 8)))
def test_mirror_maps_cx(mask):
    a, b = pe.mask2box(mask), pe.mask2box(mask[:, ::-1])
    if mask.any():
        assert b.cx == pytest.approx(1 - a.cx, abs=1e-15)
    assert (a.w, a.h) == (b.w, b.h)


@given(arrays(bool, (5, 7)))
def test_box_within_unit_square(mask):
    cx, cy, w, h = pe.mask2box(mask)
    assert 0 <= cx - w / 2 and cx + w / 2 <= 1 and 0 <= cy - h / 2 and cy + h / 2 <= 1


def test_sinusoidal_encoding():
    code = pe.sinusoidal_box_encode((0.5, 0.3, 0.2, 0.1), 8)
    assert code.shape == (32,)
    assert code[0] == pytest.approx(0.0, abs=1e-15)  # sin(2*pi*0.5)
    assert code[1] == pytest.approx(-1.0)
    assert np.all(np.abs(code) <= 1.0)
    freq = 10000.0 ** (-2 * 1 / 8)
    assert code[8 + 2] == pytest.approx(np.sin(2 * np.pi * 0.3 * freq))
    assert code[8 + 3] == pytest.approx(np.cos(2 * np.pi * 0.3 * freq))
    np.testing.assert_array_equal(code, pe.sinusoidal_box_encode((0.5, 0.3, 0.2, 0.1), 8))
    with pytest.raises(ValueError):
        pe.sinusoidal_box_encode((0.5, 0.5, 0.1, 0.1), 7)


def test_box_pe_project_shapes_and_errors(rng):
    mlp = pe.init_box_mlp(rng, 16)
    assert [l["w"].shape for l in mlp["layers"]] == [(32, 32), (32, 16)]
    enc = pe.sinusoidal_box_encode((0.4, 0.6, 0.2, 0.3), 8)
    row = pe.box_pe_project(enc, mlp)
    assert row.shape == (16,)
    np.testing.assert_array_equal(row.data, pe.box_pe_project(enc, mlp).data)
    with pytest.raises(DimensionError):
        pe.box_pe_project(np.zeros(30), mlp)


def test_box_pe_project_grad_check(rng):
    mlp = pe.init_box_mlp(rng, 8)
    enc = pe.sinusoidal_box_encode_batch(rng.uniform(size=(3, 4)), 4)
    r = nc.Tensor(rng.normal(size=(3, 8)))
    rep = nc.grad_check(lambda: nc.sum(nc.mul(pe.box_pe_project(enc, mlp), r)), nb.flatten(mlp))
    assert rep.passed, rep.errors


def test_dynamic_pe_rows_are_independent(rng):
    mlp = pe.init_box_mlp(rng, 8)
    masks = rng.random((4, 6, 6)) > 0.6
    base = pe.dynamic_pe(masks, mlp).data
    masks[2] = ~masks[2]
    changed = pe.dynamic_pe(masks, mlp).data
    for i in (0, 1, 3):
        assert base[i].tobytes() == changed[i].tobytes()
    same = np.stack([masks[0], masks[0]])
    out = pe.dynamic_pe(same, mlp).data
    assert out[0].tobytes() == out[1].tobytes()
