"""Procedural test clips: flat gradients, moving band-limited textures and sharp-edged shapes.

Content is rendered analytically per frame, so sub-pixel motion is exact and the
mix of flat and busy regions gives the degradation map something to find.
"""
from __future__ import annotations

import numpy as np

from .media import FrameClip


def _smoothstep(d: np.ndarray, width: float = 0.75) -> np.ndarray:
    return np.clip(0.5 - d / (2 * width), 0.0, 1.0)


def make_clip(seed: int, n_frames: int = 32, size: int | tuple[int, int] = 128, fps: float = 30.0) -> FrameClip:
    rng = np.random.default_rng(seed)
    h, w = (size, size) if isinstance(size, int) else size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    base0 = rng.uniform(0.25, 0.75, 3)
    gx, gy = rng.uniform(-0.25, 0.25, (2, 3)) / max(h, w)
    drift = rng.uniform(-0.002, 0.002, 3)

    # textured patches: sums of oriented sinusoids inside soft-edged panning regions
    patches = []
    for _ in range(int(rng.integers(2, 4))):
        n_waves = 4
        patches.append(
            {
                "freqs": rng.uniform(0.02, 0.16, n_waves),
                "angles": rng.uniform(0, np.pi, n_waves),
                "phases": rng.uniform(0, 2 * np.pi, n_waves),
                "amps": rng.uniform(0.03, 0.09, (n_waves, 3)),
                "pan": rng.uniform(-1.5, 1.5, 2),
                "region": (rng.uniform(0.0, 0.7) * h, rng.uniform(0.0, 0.7) * w, rng.uniform(0.2, 0.45) * h, rng.uniform(0.2, 0.45) * w),
            }
        )

    shapes = []
    for _ in range(int(rng.integers(6, 11))):
        shapes.append(
            {
                "kind": rng.choice(["disc", "rect", "stripes"]),
                "c": np.array([rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w]),
                "v": rng.uniform(-2.0, 2.0, 2),
                "r": rng.uniform(0.04, 0.14) * min(h, w),
                "color": rng.uniform(0.0, 1.0, 3),
                "color2": rng.uniform(0.0, 1.0, 3),
                "period": rng.uniform(6.0, 14.0),
            }
        )

    frames = np.empty((n_frames, h, w, 3), dtype=np.uint8)
    for t in range(n_frames):
        img = base0 + drift * t + gx * xx[..., None] + gy * yy[..., None]
        img = np.broadcast_to(img, (h, w, 3)).copy()

        for pt in patches:
            oy, ox = pt["pan"] * t
            ty, tx = yy - oy, xx - ox
            tex = np.zeros((h, w, 3))
            for f, a, p, amp in zip(pt["freqs"], pt["angles"], pt["phases"], pt["amps"]):
                tex += amp * np.sin(2 * np.pi * f * (np.cos(a) * tx + np.sin(a) * ty) + p)[..., None]
            r0, c0, rh, rw = pt["region"]
            dr = np.maximum(np.abs(yy - (r0 + rh / 2)) - rh / 2, np.abs(xx - (c0 + rw / 2)) - rw / 2)
            img += tex * _smoothstep(dr, 2.0)[..., None]

        for s in shapes:
            cy, cx = s["c"] + s["v"] * t
            # bounce inside the frame
            cy = h - abs((cy % (2 * h)) - h)
            cx = w - abs((cx % (2 * w)) - w)
            if s["kind"] == "disc":
                d = np.hypot(yy - cy, xx - cx) - s["r"]
            else:
                d = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) - s["r"]
            alpha = _smoothstep(d)[..., None]
            fill = s["color"]
            if s["kind"] == "stripes":
                # sin / |grad sin| approximates the signed distance to a stripe edge
                k = 2 * np.pi / s["period"]
                phase = k * (xx - cx + yy - cy) / np.sqrt(2)
                band = _smoothstep(-np.sin(phase) / k)[..., None]
                fill = band * s["color"] + (1 - band) * s["color2"]
            img = img * (1 - alpha) + fill * alpha

        frames[t] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return FrameClip(frames, fps=fps, source_id=f"synth{seed:03d}")
