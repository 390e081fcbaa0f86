import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dfmrestore import core_nn as nn_ops
from dfmrestore.core_nn import (
    Adam,
    Conv,
    ResidualBlock,
    charbonnier_loss,
    conv2d,
    gradient_check,
    l1_loss,
    leaky_relu,
    load_checkpoint,
    pixel_shuffle,
    pixel_unshuffle,
    save_checkpoint,
)


def naive_xcorr(x, w, b, pad):
    """Nested-loop cross-correlation oracle for a (C, H, W) input."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    oh, ow = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            acc += w[o, c, u, v] * xp[c, i + u, j + v]
                out[o, i, j] = acc
    return out


class TestConv:
    def test_identity_kernel(self):
        x = torch.randn(4, 6, 7)
        w = torch.eye(4).reshape(4, 4, 1, 1)
        assert torch.equal(conv2d(x, w, torch.zeros(4)), x)

    def test_bias_only(self):
        b = torch.tensor([0.5, -2.0, 3.0])
        out = conv2d(torch.zeros(2, 5, 5), torch.randn(3, 2, 3, 3), b)
        for c in range(3):
            assert torch.all(out[c] == b[c])

    def test_matches_nested_loop(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 5, 5))
        w = rng.standard_normal((2, 1, 3, 3))
        b = rng.standard_normal(2)
        out = conv2d(torch.tensor(x), torch.tensor(w), torch.tensor(b)).numpy()
        np.testing.assert_allclose(out, naive_xcorr(x[0:1], w, b, 1), atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            conv2d(torch.zeros(3, 4, 4), torch.zeros(2, 4, 3, 3))

    def test_non_square_kernel(self):
        with pytest.raises(ValueError, match="square"):
            conv2d(torch.zeros(1, 4, 4), torch.zeros(1, 1, 3, 1))

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_same_padding_preserves_size(self, k):
        x = torch.randn(2, 3, 9, 11)
        assert conv2d(x, torch.randn(4, 3, k, k)).shape == (2, 4, 9, 11)


class TestLeakyRelu:
    def test_definition(self):
        out = leaky_relu(torch.tensor([-1.0, 0.0, 2.0]), 0.1)
        torch.testing.assert_close(out, torch.tensor([-0.1, 0.0, 2.0]))

    def test_nonnegative_unchanged(self):
        x = torch.rand(50)
        assert torch.equal(leaky_relu(x), x)

    def test_gradient_negative_side_by_finite_differences(self):
        h = 1e-3
        f = lambda v: leaky_relu(torch.tensor(v, dtype=torch.float64), 0.1).item()
        fd = (f(-3.0 + h) - f(-3.0 - h)) / (2 * h)
        assert fd == pytest.approx(0.1, abs=1e-10)
        v = torch.tensor(-3.0, dtype=torch.float64, requires_grad=True)
        leaky_relu(v).backward()
        assert v.grad.item() == pytest.approx(0.1)

    def test_subgradient_at_zero_is_one(self):
        v = torch.tensor(0.0, requires_grad=True)
        leaky_relu(v).backward()
        assert v.grad.item() == 1.0

    def test_slope_range(self):
        with pytest.raises(ValueError):
            leaky_relu(torch.zeros(1), 1.5)


class TestResidualBlock:
    def test_zero_branch_is_identity(self):
        x = torch.randn(2, 8, 6, 6)
        assert torch.equal(ResidualBlock(8)(x), x)

    def test_stack_of_identities(self):
        x = torch.randn(1, 8, 5, 5)
        net = torch.nn.Sequential(*[ResidualBlock(8) for _ in range(4)])
        assert torch.equal(net(x), x)

    def test_matches_manual_composition(self):
        torch.manual_seed(0)
        blk = ResidualBlock(4, zero_init=False)
        x = torch.randn(1, 4, 7, 7)
        c1, c2 = blk.conv1.conv, blk.conv2.conv
        ref = x + torch.nn.functional.conv2d(
            torch.nn.functional.leaky_relu(torch.nn.functional.conv2d(x, c1.weight, c1.bias, padding=1), 0.1),
            c2.weight, c2.bias, padding=1,
        )  # fmt: skip
        torch.testing.assert_close(blk(x), ref, atol=1e-6, rtol=0)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ResidualBlock(8)(torch.zeros(1, 4, 3, 3))


class TestPixelShuffle:
    def test_shape_law(self):
        assert pixel_shuffle(torch.zeros(12, 4, 4), 2).shape == (3, 8, 8)

    def test_unit_factor(self):
        x = torch.randn(3, 4, 4)
        assert torch.equal(pixel_shuffle(x, 1), x)

    def test_round_trip(self):
        x = torch.randn(2, 16, 5, 3)
        assert torch.equal(pixel_unshuffle(pixel_shuffle(x, 2), 2), x)

    def test_indivisible_channels(self):
        with pytest.raises(ValueError, match="divisible"):
            pixel_shuffle(torch.zeros(6, 2, 2), 2)

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**16))
    @settings(max_examples=25, deadline=None)
    def test_is_a_permutation(self, c, r, hw, seed):
        x = torch.from_numpy(np.random.default_rng(seed).standard_normal((c * r * r, hw, hw)))
        y = pixel_shuffle(x, r)
        assert torch.equal(torch.sort(x.flatten()).values, torch.sort(y.flatten()).values)


class TestLosses:
    def test_charbonnier_floor(self):
        x = torch.rand(3, 4, 4)
        assert charbonnier_loss(x, x).item() == pytest.approx(1e-3, rel=1e-6)

    def test_charbonnier_uniform_residual(self):
        t = torch.zeros(2, 3, 3, dtype=torch.float64)
        loss = charbonnier_loss(t + 3e-3, t, 1e-3).item()
        assert loss == pytest.approx(math.sqrt(1e-5), rel=1e-12)
        assert loss == pytest.approx(3.16228e-3, rel=1e-5)

    def test_charbonnier_gradient(self):
        gen = torch.Generator().manual_seed(0)
        p = torch.rand(2, 3, 4, 4, dtype=torch.float64, generator=gen).requires_grad_()
        t = torch.rand(2, 3, 4, 4, dtype=torch.float64, generator=gen)
        err = gradient_check(lambda: charbonnier_loss(p, t), [p], probes=40, h=1e-6)
        assert err < 1e-6

    @given(st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_charbonnier_bounded_below(self, seed):
        rng = np.random.default_rng(seed)
        p, t = torch.tensor(rng.standard_normal((2, 5))), torch.tensor(rng.standard_normal((2, 5)))
        assert charbonnier_loss(p, t).item() > 1e-3
        assert charbonnier_loss(p, p).item() == pytest.approx(1e-3)

    def test_l1(self):
        x = torch.randn(3, 5, 5)
        assert l1_loss(x, x).item() == 0.0
        assert l1_loss(x + 0.25, x).item() == pytest.approx(0.25, abs=1e-6)
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 6)), rng.standard_normal((4, 6))
        oracle = sum(abs(a[i, j] - b[i, j]) for i in range(4) for j in range(6)) / 24
        assert l1_loss(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(oracle, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            charbonnier_loss(torch.zeros(2, 2), torch.zeros(2, 3))
        with pytest.raises(ValueError):
            l1_loss(torch.zeros(2, 2), torch.zeros(2, 3))


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = torch.nn.Parameter(torch.randn(5))
        before = p.detach().clone()
        opt = Adam({"p": p})
        p.grad = torch.zeros_like(p)
        opt.step()
        assert torch.equal(p.detach(), before)

    def test_first_step_moves_by_lr(self):
        p = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        opt = Adam({"p": p}, lr=2e-4)
        p.grad = torch.ones_like(p)
        opt.step()
        # bias-corrected first step: m_hat = 1, v_hat = 1 -> lr / (1 + eps)
        assert 1.0 - p.item() == pytest.approx(2e-4 / (1 + 1e-8), rel=1e-9)

    def test_missing_gradient(self):
        p = torch.nn.Parameter(torch.randn(2))
        with pytest.raises(RuntimeError, match="no gradient"):
            Adam({"p": p}).step()

    def test_deterministic_trajectory(self):
        def run():
            torch.manual_seed(7)
            net = torch.nn.Sequential(Conv(3, 4), Conv(4, 3))
            opt = Adam(net.named_parameters(), lr=1e-3)
            x = torch.randn(2, 3, 6, 6)
            out = []
            for _ in range(5):
                opt.zero_grad()
                loss = charbonnier_loss(net(x), x)
                loss.backward()
                opt.step()
                out.append(torch.cat([p.detach().flatten() for p in net.parameters()]))
            return out

        for a, b in zip(run(), run()):
            assert torch.equal(a, b)


class TestGradientCheck:
    def test_linear_model_exact(self):
        torch.manual_seed(0)
        conv = Conv(3, 2, kernel=1).double()
        x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        w = torch.randn(1, 2, 4, 4, dtype=torch.float64)
        err = gradient_check(lambda: (conv(x) * w).sum(), list(conv.parameters()), probes=8)
        assert err < 1e-8

    def test_corrupted_backward_detected(self):
        class BadSquare(torch.autograd.Function):
            @staticmethod
            def forward(ctx, v):
                ctx.save_for_backward(v)
                return v * v

            @staticmethod
            def backward(ctx, g):
                (v,) = ctx.saved_tensors
                return g * 3.0 * v  # true derivative is 2v

        p = torch.randn(6, dtype=torch.float64).requires_grad_()
        assert gradient_check(lambda: BadSquare.apply(p).sum(), [p], probes=6) > 1e-2

    def test_rejects_non_finite(self):
        p = torch.ones(2, dtype=torch.float64, requires_grad=True)
        with pytest.raises(ValueError, match="finite"):
            gradient_check(lambda: (p / 0).sum(), [p])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        torch.manual_seed(0)
        net = torch.nn.Sequential(Conv(3, 4), Conv(4, 3))
        opt = Adam(net.named_parameters())
        x = torch.randn(1, 3, 5, 5)
        charbonnier_loss(net(x), x).backward()
        opt.step()
        params = dict(net.state_dict())
        path = save_checkpoint(tmp_path / "a.ckpt", params, step=3, meta={"k": 1}, optimizer=opt)
        ck = load_checkpoint(path)
        assert ck.step == 3 and ck.meta == {"k": 1}
        for k, v in params.items():
            assert torch.equal(ck.params[k], v)
        assert ck.optimizer.step == 1
        for k in opt.params:
            assert torch.equal(ck.optimizer.exp_avg[k], opt.state.exp_avg[k])

    def test_optimizer_names_must_match_params(self, tmp_path):
        w = torch.zeros(2, requires_grad=True)
        opt = Adam({"other": w})
        with pytest.raises(ValueError, match="unknown parameters"):
            save_checkpoint(tmp_path / "a.ckpt", {"w": w}, optimizer=opt)

    def test_bytes_are_deterministic(self, tmp_path):
        params = {"w": torch.arange(6.0).reshape(2, 3)}
        a = save_checkpoint(tmp_path / "a.ckpt", params).read_bytes()
        b = save_checkpoint(tmp_path / "b.ckpt", params).read_bytes()
        assert a == b

    def test_header_and_little_endian_buffers(self, tmp_path):
        import json
        import zipfile

        params = {"w": torch.tensor([1.5, -2.0])}
        path = save_checkpoint(tmp_path / "a.ckpt", params)
        with zipfile.ZipFile(path) as zf:
            assert json.loads(zf.read("header.json"))["format"] == "ckpt_v1"
            assert zf.read("params/w") == np.array([1.5, -2.0], dtype="<f4").tobytes()

    def test_rejects_other_versions(self, tmp_path):
        import zipfile

        path = tmp_path / "old.ckpt"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("header.json", '{"format": "ckpt_v0", "params": [], "step": 0, "meta": {}}')
        with pytest.raises(ValueError, match="ckpt_v0"):
            load_checkpoint(path)


def test_cosine_schedule_endpoints():
    assert nn_ops.cosine_lr(1e-3, 0, 100) == pytest.approx(1e-3)
    assert nn_ops.cosine_lr(1e-3, 100, 100) == pytest.approx(1e-7)
