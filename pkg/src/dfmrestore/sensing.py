"""Degradation sensing: estimate a clean reference frame from degraded neighbours and
turn its residual against the degraded frame into a log-normalised degradation map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core_nn import Conv, leaky_relu


class InterpNet(nn.Module):
    """Two-frame to middle-frame interpolator: 3-level encoder-decoder with skips.

    Channel plan 6 -> 32 -> 64 -> 32 -> 3. Inputs and output live in [0, 1]
    (the output is not clamped). The output conv starts at zero so an untrained
    net predicts its bias everywhere.
    """

    levels = 3

    def __init__(self, base: int = 32, zero_output: bool = True):
        super().__init__()
        wide = 2 * base
        self.enc1 = nn.ModuleList([Conv(6, base), Conv(base, base)])
        self.enc2 = nn.ModuleList([Conv(base, wide), Conv(wide, wide)])
        self.enc3 = nn.ModuleList([Conv(wide, wide), Conv(wide, wide)])
        self.dec2 = nn.ModuleList([Conv(2 * wide, wide), Conv(wide, base)])
        self.dec1 = nn.ModuleList([Conv(2 * base, base), Conv(base, base)])
        self.out = Conv(base, 3, zero=zero_output)

    @staticmethod
    def _stage(convs, x):
        for conv in convs:
            x = leaky_relu(conv(x))
        return x

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(f"frame resolution mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        squeeze = a.dim() == 3
        if squeeze:
            a, b = a.unsqueeze(0), b.unsqueeze(0)
        h, w = a.shape[-2:]
        mult = 2 ** (self.levels - 1)
        ph, pw = (-h) % mult, (-w) % mult
        x = torch.cat([a, b], dim=1)
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")

        s1 = self._stage(self.enc1, x)
        s2 = self._stage(self.enc2, F.avg_pool2d(s1, 2))
        s3 = self._stage(self.enc3, F.avg_pool2d(s2, 2))
        d2 = self._stage(self.dec2, torch.cat([F.interpolate(s3, scale_factor=2.0), s2], 1))
        d1 = self._stage(self.dec1, torch.cat([F.interpolate(d2, scale_factor=2.0), s1], 1))
        out = self.out(d1)[..., :h, :w]
        return out[0] if squeeze else out


class InterpNetPair(nn.Module):
    """Holds the outer-frame interpolator (``fb1``) and the centre-frame one (``fb2``)."""

    def __init__(self, base: int = 32):
        super().__init__()
        self.fb1 = InterpNet(base)
        self.fb2 = InterpNet(base)


def estimate_reference(nets: InterpNetPair, x_prev2, x_cur, x_next2):
    """Return (z_prev, z_cur, z_next) estimated from frames t-2, t and t+2.

    The same ``fb1`` produces both outer estimates, fed in the order
    (x_{t-2}, x_t) and (x_{t+2}, x_t); ``fb2`` then interpolates between them.
    """
    z_prev = nets.fb1(x_prev2, x_cur)
    z_next = nets.fb1(x_next2, x_cur)
    z_cur = nets.fb2(z_prev, z_next)
    return z_prev, z_cur, z_next


@dataclass
class DegradationFeatureMap:
    e: torch.Tensor  # (3, H, W) or (B, 3, H, W), values in [0, 1]
    scale: torch.Tensor  # per-frame normaliser S, shape () or (B,)


def compute_dfm(z_hat: torch.Tensor, x: torch.Tensor) -> DegradationFeatureMap:
    """e = log(|z_hat - x| + 1) / S with S the per-frame maximum; e = 0 when S = 0.

    Frames are (3, H, W) or batched (B, 3, H, W) with intensities in [0, 1]; S is
    one scalar per frame, taken jointly over channels and pixels.
    """
    if z_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(z_hat.shape)} vs {tuple(x.shape)}")
    if x.dim() not in (3, 4):
        raise ValueError("expected (3,H,W) or (B,3,H,W) frames")
    finfo = torch.finfo(x.dtype if x.is_floating_point() else torch.float32)
    resid = torch.nan_to_num((z_hat - x).abs(), nan=0.0, posinf=finfo.max).clamp_max(finfo.max)
    logged = torch.log1p(resid)
    if x.dim() == 3:
        s = logged.max()
        safe = torch.where(s > 0, s, torch.ones_like(s))
        e = torch.where(s > 0, logged / safe, torch.zeros_like(logged))
    else:
        s = logged.flatten(1).max(dim=1).values
        safe = torch.where(s > 0, s, torch.ones_like(s)).view(-1, 1, 1, 1)
        e = torch.where(s.view(-1, 1, 1, 1) > 0, logged / safe, torch.zeros_like(logged))
    return DegradationFeatureMap(e=e.clamp(0.0, 1.0), scale=s)


def clamp_indices(t: int, n_frames: int, offsets=(-2, -1, 0, 1, 2)) -> tuple[int, ...]:
    return tuple(min(max(t + o, 0), n_frames - 1) for o in offsets)


@torch.no_grad()
def clip_reference(nets: InterpNetPair, frames: torch.Tensor, batch: int = 8) -> torch.Tensor:
    """Estimated reference z_hat_t for every frame of a (T, 3, H, W) clip, clamping at the edges."""
    n = frames.shape[0]
    out = []
    for start in range(0, n, batch):
        idx = [clamp_indices(t, n, (-2, 0, 2)) for t in range(start, min(start + batch, n))]
        _, z_cur, _ = estimate_reference(nets, frames[[i[0] for i in idx]], frames[[i[1] for i in idx]], frames[[i[2] for i in idx]])
        out.append(z_cur)
    return torch.cat(out, 0)


def clip_dfm(nets: InterpNetPair, frames: torch.Tensor, batch: int = 8) -> torch.Tensor:
    """DFMs for every frame of a (T, 3, H, W) clip, using clamped neighbours at the edges."""
    return compute_dfm(clip_reference(nets, frames, batch), frames).e


def dfm_to_gray(e: torch.Tensor | np.ndarray) -> np.ndarray:
    """(3, H, W) map -> 8-bit (H, W) image: max over channels, scaled by 255."""
    arr = e.detach().cpu().numpy() if isinstance(e, torch.Tensor) else np.asarray(e)
    return np.round(arr.max(axis=0).clip(0, 1) * 255.0).astype(np.uint8)
