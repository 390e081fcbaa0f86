"""Multi-frame restoration network modulated by degradation features."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
from torch import nn

from .core_nn import Conv, ResidualBlock, leaky_relu, pixel_shuffle
from .resample import resize_tensor


@dataclass
class ModelConfig:
    n_dmm: int = 10  # cascaded degradation-modulation blocks (n)
    n_recon: int = 8  # reconstruction residual blocks (N)
    channels: int = 64
    scale: int = 2
    window: int = 5
    dfm_enabled: bool = True
    feam_blocks: int = 2
    global_skip: bool = True

    def __post_init__(self):
        if self.n_dmm < 1 or self.n_recon < 1:
            raise ValueError("n_dmm and n_recon must be >= 1")
        if self.channels < 8:
            raise ValueError("channels must be >= 8")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.window != 5:
            raise ValueError("window must be 5")
        if self.feam_blocks < 0:
            raise ValueError("feam_blocks must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class FEAM(nn.Module):
    """Shared per-frame encoder, channel concatenation and a 1x1 fusion conv."""

    def __init__(self, channels: int, window: int = 5, blocks: int = 2):
        super().__init__()
        self.window = window
        self.head = Conv(3, channels)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(blocks)])
        self.fuse = Conv(window * channels, channels, kernel=1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: (B, T, 3, H, W)
        if frames.dim() != 5 or frames.shape[1] != self.window:
            raise ValueError(
                f"expected a (B, {self.window}, 3, H, W) window, got {tuple(frames.shape)}"
            )
        b, t, c, h, w = frames.shape
        feats = self.blocks(leaky_relu(self.head(frames.reshape(b * t, c, h, w))))
        return self.fuse(feats.reshape(b, t * feats.shape[1], h, w))


class DMM(nn.Module):
    """n cascaded conv + leaky-ReLU blocks; every block's output is one modulation feature."""

    def __init__(self, channels: int, n: int):
        super().__init__()
        self.blocks = nn.ModuleList([Conv(3 if i == 0 else channels, channels) for i in range(n)])

    def forward(self, e: torch.Tensor) -> list[torch.Tensor]:
        betas = []
        h = e
        for conv in self.blocks:
            h = leaky_relu(conv(h))
            betas.append(h)
        return betas


class ModulatedBackbone(nn.Module):
    """f^{i+1} = lrelu(conv(f^i)) + beta^i for i = 0..n, with beta^0 = 0."""

    def __init__(self, channels: int, n: int):
        super().__init__()
        self.n = n
        self.convs = nn.ModuleList([Conv(channels, channels) for _ in range(n + 1)])

    def forward(self, f0: torch.Tensor, betas: list[torch.Tensor]) -> torch.Tensor:
        if len(betas) != self.n:
            raise ValueError(f"expected {self.n} modulation features, got {len(betas)}")
        f = leaky_relu(self.convs[0](f0))
        for conv, beta in zip(self.convs[1:], betas):
            if beta.shape != f.shape:
                raise ValueError(
                    f"modulation feature {tuple(beta.shape)} does not match {tuple(f.shape)}"
                )
            f = leaky_relu(conv(f)) + beta
        return f


class Reconstruction(nn.Module):
    """N residual blocks, then x2 conv + pixel-shuffle stages and a 3-channel output conv."""

    def __init__(self, channels: int, n_blocks: int, scale: int, zero_output: bool = False):
        super().__init__()
        if scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {scale}")
        self.scale = scale
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(n_blocks)])
        stages = 1 if scale == 2 else 2
        self.up = nn.ModuleList([Conv(channels, 4 * channels) for _ in range(stages)])
        self.out = Conv(channels, 3, zero=zero_output)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        h = self.blocks(f)
        for conv in self.up:
            h = leaky_relu(pixel_shuffle(conv(h), 2))
        return self.out(h)


class VideoRestorer(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        c = config.channels
        self.feam = FEAM(c, config.window, config.feam_blocks)
        self.dmm = DMM(c, config.n_dmm)
        self.backbone = ModulatedBackbone(c, config.n_dmm)
        self.recon = Reconstruction(c, config.n_recon, config.scale, zero_output=config.global_skip)

    def forward(self, window: torch.Tensor, e: torch.Tensor | None = None) -> torch.Tensor:
        """window: (B, 5, 3, H, W) in [0, 1]; e: (B, 3, H, W) degradation map."""
        squeeze = window.dim() == 4
        if squeeze:
            window = window.unsqueeze(0)
            e = None if e is None else e.unsqueeze(0)
        center = window[:, window.shape[1] // 2]
        if not self.config.dfm_enabled:
            e = torch.zeros_like(center)
        elif e is None:
            raise ValueError("a degradation map is required when dfm_enabled is set")
        f0 = self.feam(window)
        if e.shape[-2:] != f0.shape[-2:]:
            raise ValueError(
                f"degradation map {tuple(e.shape[-2:])} does not match features {tuple(f0.shape[-2:])}"
            )
        out = self.recon(self.backbone(f0, self.dmm(e)))
        if self.config.global_skip:
            h, w = center.shape[-2:]
            out = out + resize_tensor(center, h * self.config.scale, w * self.config.scale)
        return out[0] if squeeze else out
