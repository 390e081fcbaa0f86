"""Differentiable operator layer shared by every network in the package.

Thin, validated wrappers around torch primitives plus the pieces torch does not
ship in the form we need: a leaky ReLU with a fixed subgradient at zero, the
Charbonnier penalty, a small Adam with inspectable state, a finite-difference
gradient checker and the ``ckpt_v1`` checkpoint archive.
"""
from __future__ import annotations

import json
import math
import zipfile
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CKPT_VERSION = "ckpt_v1"
LRELU_SLOPE = 0.1


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected a (C,H,W) or (B,C,H,W) tensor, got shape {tuple(x.shape)}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int | None = None):
    """Cross-correlation (no kernel flip). ``padding=None`` means same-size padding."""
    if weight.dim() != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"kernel must be square, got shape {tuple(weight.shape)}")
    xb, squeezed = _as_batched(x)
    if xb.shape[1] != weight.shape[1]:
        raise ValueError(
            f"input has {xb.shape[1]} channels but kernel expects {weight.shape[1]}"
        )
    if padding is None:
        padding = (weight.shape[2] - 1) // 2
    out = F.conv2d(xb, weight, bias, stride=stride, padding=padding)
    return out[0] if squeezed else out


def leaky_relu(x: torch.Tensor, slope: float = LRELU_SLOPE) -> torch.Tensor:
    # torch.where routes the gradient at exactly 0 through the positive branch
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    return torch.where(x >= 0, x, x * slope)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """(C*r^2, H, W) -> (C, r*H, r*W)."""
    xb, squeezed = _as_batched(x)
    if r < 1 or xb.shape[1] % (r * r):
        raise ValueError(f"channel count {xb.shape[1]} is not divisible by r^2={r * r}")
    out = F.pixel_shuffle(xb, r)
    return out[0] if squeezed else out


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    xb, squeezed = _as_batched(x)
    if r < 1 or xb.shape[2] % r or xb.shape[3] % r:
        raise ValueError(f"spatial size {tuple(xb.shape[2:])} is not divisible by {r}")
    out = F.pixel_unshuffle(xb, r)
    return out[0] if squeezed else out


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def charbonnier_loss(pred, target, epsilon: float = 1e-3):
    _check_pair(pred, target)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return torch.sqrt((pred - target) ** 2 + epsilon**2).mean()


def l1_loss(pred, target):
    _check_pair(pred, target)
    return (pred - target).abs().mean()


def init_conv_(conv: nn.Conv2d, zero: bool = False) -> nn.Conv2d:
    """Fan-in scaled uniform weights, zero bias; ``zero=True`` zeroes the weights too."""
    if zero:
        nn.init.zeros_(conv.weight)
    else:
        nn.init.kaiming_uniform_(conv.weight, a=LRELU_SLOPE, nonlinearity="leaky_relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


def make_conv(c_in: int, c_out: int, kernel: int = 3, zero: bool = False) -> nn.Conv2d:
    return init_conv_(nn.Conv2d(c_in, c_out, kernel, 1, (kernel - 1) // 2), zero=zero)


class Conv(nn.Module):
    """3x3 (by default) same-size convolution routed through :func:`conv2d`."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, zero: bool = False):
        super().__init__()
        self.conv = make_conv(c_in, c_out, kernel, zero)

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x):
        return conv2d(x, self.conv.weight, self.conv.bias)


class ResidualBlock(nn.Module):
    """x + conv(lrelu(conv(x))); the second conv starts at zero so the block is an identity."""

    def __init__(self, channels: int, zero_init: bool = True):
        super().__init__()
        self.channels = channels
        self.conv1 = Conv(channels, channels)
        self.conv2 = Conv(channels, channels, zero=zero_init)

    def forward(self, x):
        c = x.shape[-3]
        if c != self.channels:
            raise ValueError(f"residual block expects {self.channels} channels, got {c}")
        return x + self.conv2(leaky_relu(self.conv1(x)))


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float]
    eps: float
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


class Adam:
    """Adaptive-moment optimizer with bias correction over named parameters."""

    def __init__(
        self,
        params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps)
        for name, p in self.params.items():
            self.state.exp_avg[name] = torch.zeros_like(p, memory_format=torch.preserve_format)
            self.state.exp_avg_sq[name] = torch.zeros_like(p, memory_format=torch.preserve_format)

    def zero_grad(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.grad.zero_()

    @torch.no_grad()
    def step(self) -> None:
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"no gradient populated for: {', '.join(missing[:5])}")
        st = self.state
        st.step += 1
        b1, b2 = st.betas
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for name, p in self.params.items():
            g = p.grad
            m = st.exp_avg[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v = st.exp_avg_sq[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(st.eps)
            p.addcdiv_(m, denom, value=-st.lr / c1)

    def set_lr(self, lr: float) -> None:
        self.state.lr = lr


def cosine_lr(base_lr: float, step: int, total: int, floor: float = 1e-7) -> float:
    if total <= 0:
        return base_lr
    frac = min(step, total) / total
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * frac))


# --------------------------------------------------------------------------- gradient check


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    probes: int = 32,
    h: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences over random coordinates.

    ``loss_fn`` must recompute the scalar loss from the current parameter values.
    Run it with float64 tensors; float32 central differences are too noisy.
    The error is |an - fd| / max(|an|, |fd|, floor), so coordinates whose true
    gradient is ~0 do not turn difference noise into a huge ratio.
    """
    params = [p for p in params if p.requires_grad]
    if not params:
        raise ValueError("no trainable parameters to probe")
    loss = loss_fn()
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise ValueError(f"loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params], dtype=np.float64)
    worst = 0.0
    for _ in range(probes):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        i = int(rng.integers(params[k].numel()))
        flat = params[k].data.view(-1)
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + h
            lp = loss_fn().item()
            flat[i] = orig - h
            lm = loss_fn().item()
            flat[i] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[k].reshape(-1)[i].item()
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), floor))
    return worst


# --------------------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    step: int = 0
    meta: dict = field(default_factory=dict)
    optimizer: OptimizerState | None = None


_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, data)


def _f32_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().numpy().astype("<f4").tobytes()


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, torch.Tensor],
    step: int = 0,
    meta: Mapping | None = None,
    optimizer: Adam | OptimizerState | None = None,
) -> Path:
    """Write a ``ckpt_v1`` zip archive: JSON header plus raw little-endian float32 buffers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opt_state = optimizer.state if isinstance(optimizer, Adam) else optimizer
    header = {
        "format": CKPT_VERSION,
        "step": int(step),
        "meta": dict(meta or {}),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
        "optimizer": None,
    }
    if opt_state is not None:
        stray = set(opt_state.exp_avg) - set(params)
        if stray:
            raise ValueError(f"optimizer state names unknown parameters: {sorted(stray)[:5]}")
        header["optimizer"] = {
            "lr": opt_state.lr,
            "betas": list(opt_state.betas),
            "eps": opt_state.eps,
            "step": opt_state.step,
            "names": list(opt_state.exp_avg),
        }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_entry(zf, "header.json", json.dumps(header, indent=1, sort_keys=True).encode())
        for n, t in params.items():
            _write_entry(zf, f"params/{n}", _f32_bytes(t))
        if opt_state is not None:
            for n in opt_state.exp_avg:
                _write_entry(zf, f"optim/exp_avg/{n}", _f32_bytes(opt_state.exp_avg[n]))
                _write_entry(zf, f"optim/exp_avg_sq/{n}", _f32_bytes(opt_state.exp_avg_sq[n]))
    tmp.replace(path)
    return path


def _read_f32(zf: zipfile.ZipFile, name: str, shape) -> torch.Tensor:
    arr = np.frombuffer(zf.read(name), dtype="<f4").astype(np.float32)
    return torch.from_numpy(arr.reshape(shape).copy())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CKPT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {header.get('format')!r}, expected {CKPT_VERSION!r}"
            )
        shapes = {e["name"]: e["shape"] for e in header["params"]}
        params = {n: _read_f32(zf, f"params/{n}", s) for n, s in shapes.items()}
        opt = None
        if header.get("optimizer"):
            o = header["optimizer"]
            opt = OptimizerState(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"], step=o["step"])
            for n in o["names"]:
                opt.exp_avg[n] = _read_f32(zf, f"optim/exp_avg/{n}", shapes[n])
                opt.exp_avg_sq[n] = _read_f32(zf, f"optim/exp_avg_sq/{n}", shapes[n])
    return Checkpoint(params=params, step=header["step"], meta=header["meta"], optimizer=opt)


def load_optimizer_state(opt: Adam, state: OptimizerState) -> None:
    missing = set(opt.params) - set(state.exp_avg)
    if missing:
        raise ValueError(f"optimizer state lacks entries for {sorted(missing)[:5]}")
    opt.state.lr, opt.state.betas, opt.state.eps = state.lr, state.betas, state.eps
    opt.state.step = state.step
    for n, p in opt.params.items():
        opt.state.exp_avg[n] = state.exp_avg[n].to(p.dtype).clone()
        opt.state.exp_avg_sq[n] = state.exp_avg_sq[n].to(p.dtype).clone()
