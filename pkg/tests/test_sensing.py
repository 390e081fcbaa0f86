import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfmrestore.sensing import (
    InterpNet,
    InterpNetPair,
    clamp_indices,
    clip_dfm,
    compute_dfm,
    dfm_to_gray,
    estimate_reference,
)


def naive_dfm(z, x):
    logged = np.log(np.abs(z - x) + 1.0)
    s = logged.max()
    return np.zeros_like(logged) if s == 0 else logged / s


def test_identical_frames_give_zero_map():
    x = torch.rand(3, 9, 7)
    d = compute_dfm(x.clone(), x)
    assert torch.all(d.e == 0) and d.scale == 0
    assert torch.isfinite(d.e).all()


def test_two_pixel_hand_example():
    z = torch.zeros(3, 1, 2, dtype=torch.float64)
    x = torch.zeros_like(z)
    x[0, 0, 0], x[0, 0, 1] = 3.0, 7.0
    e = compute_dfm(z, x).e
    assert e[0, 0, 0].item() == pytest.approx(math.log(4) / math.log(8), abs=1e-12)
    assert e[0, 0, 1].item() == pytest.approx(1.0, abs=1e-12)
    assert math.log(4) / math.log(8) == pytest.approx(2 / 3)


def test_matches_naive_oracle():
    rng = np.random.default_rng(0)
    z, x = rng.random((2, 3, 10, 12))
    e = compute_dfm(torch.from_numpy(z), torch.from_numpy(x)).e.numpy()
    assert np.allclose(e, naive_dfm(z, x), atol=1e-12)


def test_batched_normaliser_is_per_frame():
    rng = np.random.default_rng(1)
    z, x = rng.random((2, 4, 3, 6, 6))
    x[2] = z[2]
    out = compute_dfm(torch.from_numpy(z), torch.from_numpy(x))
    for b in range(4):
        assert np.allclose(out.e[b].numpy(), naive_dfm(z[b], x[b]), atol=1e-12)
    assert out.scale[2] == 0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        compute_dfm(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


def test_extreme_inputs_stay_finite():
    x = torch.zeros(3, 4, 4)
    z = torch.full_like(x, float("inf"))
    z[0, 0, 0] = float("nan")
    e = compute_dfm(z, x).e
    assert torch.isfinite(e).all() and e.min() >= 0 and e.max() <= 1


frames = arrays(np.float64, (3, 5, 6), elements=st.floats(0, 1))


@settings(max_examples=100, deadline=None)
@given(z=frames, x=frames)
def test_range_and_peak(z, x):
    d = compute_dfm(torch.from_numpy(z), torch.from_numpy(x))
    e = d.e.numpy()
    assert e.min() >= 0 and e.max() <= 1
    if np.abs(z - x).max() > 0:
        assert e.max() == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(z=frames, x=frames)
def test_monotone_in_residual_and_argmax_preserved(z, x):
    r = np.abs(z - x)
    e = compute_dfm(torch.from_numpy(z), torch.from_numpy(x)).e.numpy()
    flat_r, flat_e = r.ravel(), e.ravel()
    order = np.argsort(flat_r, kind="stable")
    assert np.all(np.diff(flat_e[order]) >= -1e-12)
    if r.max() > 0:
        assert flat_e[np.argmax(flat_r)] == pytest.approx(1.0)


def test_untrained_net_is_constant():
    net = InterpNet(base=8)
    a, b = torch.rand(2, 3, 12, 10)
    out = net(a, b)
    assert out.shape == (3, 12, 10)
    assert torch.allclose(out, torch.zeros_like(out))


@pytest.mark.parametrize("h,w", [(16, 16), (13, 22), (5, 7)])
def test_interp_preserves_resolution(h, w):
    net = InterpNet(base=4, zero_output=False)
    out = net(torch.rand(2, 3, h, w), torch.rand(2, 3, h, w))
    assert out.shape == (2, 3, h, w)


def test_interp_rejects_mismatched_inputs():
    with pytest.raises(ValueError, match="mismatch"):
        InterpNet(base=4)(torch.rand(3, 8, 8), torch.rand(3, 8, 6))


def test_outer_estimates_share_one_network():
    nets = InterpNetPair(base=4)
    calls = []
    nets.fb1.register_forward_hook(lambda m, inp, out: calls.append(("fb1", inp)))
    nets.fb2.register_forward_hook(lambda m, inp, out: calls.append(("fb2", inp)))
    x = [torch.rand(1, 3, 8, 8) for _ in range(3)]
    z_prev, _, z_next = estimate_reference(nets, *x)
    assert [c[0] for c in calls] == ["fb1", "fb1", "fb2"]
    assert calls[0][1][0] is x[0] and calls[0][1][1] is x[1]
    assert calls[1][1][0] is x[2] and calls[1][1][1] is x[1]
    assert calls[2][1][0] is z_prev and calls[2][1][1] is z_next


def test_clamped_neighbours():
    assert clamp_indices(0, 10, (-2, 0, 2)) == (0, 0, 2)
    assert clamp_indices(9, 10, (-2, 0, 2)) == (7, 9, 9)


def test_clip_dfm_matches_per_frame():
    nets = InterpNetPair(base=4)
    for p in nets.parameters():
        torch.nn.init.normal_(p, std=0.1)
    frames = torch.rand(6, 3, 8, 8)
    maps = clip_dfm(nets, frames, batch=4)
    assert maps.shape == frames.shape
    for t in (0, 3, 5):
        i = clamp_indices(t, 6, (-2, 0, 2))
        with torch.no_grad():
            _, z, _ = estimate_reference(nets, frames[i[0]], frames[i[1]], frames[i[2]])
        assert torch.allclose(maps[t], compute_dfm(z, frames[t]).e, atol=1e-6)


def test_gray_export():
    e = torch.zeros(3, 2, 2)
    e[1, 0, 1] = 1.0
    e[2, 1, 1] = 0.5
    g = dfm_to_gray(e)
    assert g.dtype == np.uint8
    assert g.tolist() == [[0, 255], [0, 128]]
