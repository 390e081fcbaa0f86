"""Sensing nets + restoration network bundled for clip-level inference and checkpointing."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .core_nn import Checkpoint, load_checkpoint, save_checkpoint
from .media import window_indices
from .metrics import to_uint8
from .restoration import ModelConfig, VideoRestorer
from .sensing import InterpNetPair, clip_dfm


class Pipeline:
    def __init__(self, sensing: InterpNetPair, model: VideoRestorer | None = None):
        self.sensing = sensing
        self.model = model

    @property
    def scale(self) -> int:
        return self.model.config.scale

    def named_params(self) -> dict[str, torch.Tensor]:
        out = {f"sensing.{k}": v for k, v in self.sensing.state_dict().items()}
        if self.model is not None:
            out.update({f"restorer.{k}": v for k, v in self.model.state_dict().items()})
        return out

    def dtype(self) -> torch.dtype:
        return next(self.sensing.parameters()).dtype

    def dfm(self, x_frames: np.ndarray | torch.Tensor) -> torch.Tensor:
        """(T, 3, H, W) degradation maps for a (T, 3, H, W) float clip."""
        x = torch.as_tensor(x_frames, dtype=self.dtype())
        self.sensing.eval()
        return clip_dfm(self.sensing, x)

    @torch.no_grad()
    def restore(self, x_frames: np.ndarray, batch: int = 8, return_dfm: bool = False):
        """Restore every frame of a (T, 3, H, W) [0, 1] clip; returns float (T, 3, sH, sW)."""
        if self.model is None:
            raise ValueError("pipeline has no restoration model")
        x = torch.as_tensor(x_frames, dtype=self.dtype())
        n = x.shape[0]
        e = self.dfm(x) if self.model.config.dfm_enabled else torch.zeros_like(x)
        self.model.eval()
        outs = []
        for start in range(0, n, batch):
            ts = list(range(start, min(start + batch, n)))
            win = torch.stack([x[list(window_indices(t, n))] for t in ts])
            outs.append(self.model(win, e[ts]))
        out = torch.cat(outs).numpy()
        return (out, e.numpy()) if return_dfm else out

    def restore_uint8(self, x_clip_frames: np.ndarray) -> np.ndarray:
        """(T, H, W, 3) uint8 in, (T, sH, sW, 3) uint8 out; clamping happens only here."""
        x = x_clip_frames.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
        return to_uint8(self.restore(x).transpose(0, 2, 3, 1))

    # ----------------------------------------------------------------------- persistence

    def _meta(self, meta: dict | None) -> dict:
        meta = dict(meta or {})
        meta["sensing_base"] = self.sensing.fb1.enc1[0].out_channels
        if self.model is not None:
            meta["model_config"] = self.model.config.to_dict()
        return meta

    def to_checkpoint(self, step: int = 0, meta: dict | None = None) -> Checkpoint:
        """In-memory snapshot; parameters are copied."""
        params = {k: v.detach().clone() for k, v in self.named_params().items()}
        return Checkpoint(params=params, step=step, meta=self._meta(meta))

    def save(self, path: str | Path, step: int = 0, meta: dict | None = None, optimizer=None) -> Path:
        return save_checkpoint(path, self.named_params(), step=step, meta=self._meta(meta), optimizer=optimizer)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path, dtype=torch.float32) -> Pipeline:
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        sensing = InterpNetPair(base=int(ckpt.meta.get("sensing_base", 32)))
        sensing.load_state_dict(_prefixed(ckpt.params, "sensing."))
        model = None
        if "model_config" in ckpt.meta:
            model = VideoRestorer(ModelConfig.from_dict(ckpt.meta["model_config"]))
            model.load_state_dict(_prefixed(ckpt.params, "restorer."))
            model.to(dtype)
        return cls(sensing.to(dtype), model)


def _prefixed(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
