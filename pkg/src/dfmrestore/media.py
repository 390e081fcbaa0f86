"""Frame I/O, bicubic rescaling, H.264 degradation synthesis, patch sampling and manifests."""
from __future__ import annotations

import json
import logging
import os
import re
import shutil
import subprocess
import tempfile
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .resample import resize_array

log = logging.getLogger(__name__)

MIN_FRAMES = 5
ENCODER_ENV = "DFMRESTORE_FFMPEG"
VIDEO_SUFFIXES = {".mp4", ".mkv", ".avi", ".mov", ".webm", ".y4m"}


class MediaError(RuntimeError):
    pass


class EncoderError(MediaError):
    """The external encoder failed."""


class EncoderNotFound(EncoderError):
    pass


@dataclass
class FrameClip:
    frames: np.ndarray  # (T, H, W, 3) uint8 RGB
    fps: float = 30.0
    source_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {f.shape}")
        if f.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {f.dtype}")
        if f.shape[0] < MIN_FRAMES:
            raise ValueError(f"minimum {MIN_FRAMES} frames required, got {f.shape[0]}")
        self.frames = f

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def to_float(self) -> np.ndarray:
        """(T, 3, H, W) float32 in [0, 1]."""
        return self.frames.transpose(0, 3, 1, 2).astype(np.float32) / 255.0


@dataclass
class DegradedTriple:
    y: FrameClip  # original
    x: FrameClip  # downscaled + compressed
    z: FrameClip  # bicubic downscale of y
    scale: int
    qp: int

    def __post_init__(self):
        if not (len(self.y) == len(self.x) == len(self.z)):
            raise ValueError("y, x and z must have equal frame counts")
        lo = (self.y.height // self.scale, self.y.width // self.scale)
        for name, c in (("x", self.x), ("z", self.z)):
            if (c.height, c.width) != lo or c.height * self.scale != self.y.height:
                raise ValueError(f"{name} is {c.height}x{c.width}, expected {lo[0]}x{lo[1]}")


# --------------------------------------------------------------------------- frame I/O


def _frame_key(p: Path):
    nums = re.findall(r"\d+", p.stem)
    return (int(nums[-1]) if nums else -1, p.name)


def read_frames(path: str | Path, encoder: Encoder | None = None, fps: float = 30.0) -> FrameClip:
    """Read a PNG sequence directory (lossless) or decode a video container."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    if path.is_file():
        frames = decode_video(path, encoder or find_encoder())
        return FrameClip(frames, fps=fps, source_id=path.stem)
    files = sorted((p for p in path.iterdir() if p.suffix.lower() == ".png"), key=_frame_key)
    if not files:
        raise MediaError(f"no frames found in {path}")
    frames = []
    for p in files:
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"))
        except Exception as exc:  # PIL raises several unrelated types
            raise MediaError(f"unreadable frame {p}: {exc}") from exc
        if frames and arr.shape != frames[0].shape:
            raise MediaError(
                f"resolution changes mid-clip at {p.name}: {arr.shape[:2]} vs {frames[0].shape[:2]}"
            )
        frames.append(arr)
    if len(frames) < MIN_FRAMES:
        raise MediaError(f"minimum {MIN_FRAMES} frames required, found {len(frames)} in {path}")
    return FrameClip(np.stack(frames), fps=fps, source_id=path.name)


def write_frames(clip: FrameClip | np.ndarray, out_dir: str | Path) -> list[Path]:
    frames = clip.frames if isinstance(clip, FrameClip) else np.asarray(clip)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = out_dir / f"{i:05d}.png"
        Image.fromarray(f).save(p, optimize=False)
        paths.append(p)
    return paths


def write_gray_frames(maps: Sequence[np.ndarray], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(maps):
        p = out_dir / f"{i:05d}.png"
        Image.fromarray(np.asarray(m, dtype=np.uint8), mode="L").save(p)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------- resizing


def _scaled_dim(n: int, scale: Fraction) -> int:
    out = n * scale
    if out.denominator != 1 or out < 1:
        raise ValueError(f"scaling {n} by {scale} gives non-integral size {float(out)}")
    return int(out)


def resize_frames(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """(T, H, W, 3) uint8 -> (T, out_h, out_w, 3) uint8 with bicubic a=-0.5, clamped."""
    out = np.empty((frames.shape[0], out_h, out_w, frames.shape[-1]), dtype=np.uint8)
    for i, f in enumerate(frames):
        out[i] = np.clip(np.round(resize_array(f, out_h, out_w)), 0, 255).astype(np.uint8)
    return out


def bicubic_resize(clip: FrameClip, scale) -> FrameClip:
    """Resize by a rational factor (output / input); e.g. ``Fraction(1, 2)`` halves each side."""
    s = Fraction(scale).limit_denominator(1000) if not isinstance(scale, Fraction) else scale
    if s <= 0:
        raise ValueError("scale must be positive")
    h, w = _scaled_dim(clip.height, s), _scaled_dim(clip.width, s)
    if s == 1:
        return FrameClip(clip.frames.copy(), clip.fps, clip.source_id)
    return FrameClip(resize_frames(clip.frames, h, w), clip.fps, clip.source_id)


# --------------------------------------------------------------------------- external encoder


@dataclass(frozen=True)
class Encoder:
    path: str
    version: str


def find_encoder() -> Encoder:
    """Locate ffmpeg: ``$DFMRESTORE_FFMPEG``, then PATH, then the imageio-ffmpeg binary."""
    candidates = []
    env = os.environ.get(ENCODER_ENV)
    if env is not None:
        candidates.append(env)
    else:
        which = shutil.which("ffmpeg")
        if which:
            candidates.append(which)
        try:
            import imageio_ffmpeg

            candidates.append(imageio_ffmpeg.get_ffmpeg_exe())
        except (ImportError, RuntimeError):
            pass  # bundled binary unavailable
    for c in candidates:
        if c and Path(c).is_file() and os.access(c, os.X_OK):
            res = subprocess.run([c, "-hide_banner", "-version"], capture_output=True, text=True, check=False)
            if res.returncode == 0:
                first = res.stdout.splitlines()[0] if res.stdout else "ffmpeg unknown"
                return Encoder(path=c, version=first.split(" Copyright")[0].strip())
    where = f" (${ENCODER_ENV}={env})" if env is not None else ""
    raise EncoderNotFound(f"external encoder 'ffmpeg' not found{where}")


def _run(cmd: list[str], stdin: bytes | None = None) -> bytes:
    res = subprocess.run(cmd, input=stdin, capture_output=True, check=False)
    if res.returncode != 0:
        tail = res.stderr.decode(errors="replace")[-2000:]
        raise EncoderError(f"{Path(cmd[0]).name} exited with code {res.returncode}:\n{tail}")
    return res.stdout


def encode_h264(frames: np.ndarray, out_path: str | Path, qp: int, encoder: Encoder, fps: float = 30.0) -> Path:
    """Constant-QP H.264 (4:2:0) encode of raw RGB frames into an MP4 container."""
    if not 0 <= qp <= 51:
        raise ValueError(f"qp must lie in [0, 51], got {qp}")
    _, h, w, _ = frames.shape
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    cmd = [
        encoder.path, "-hide_banner", "-loglevel", "error", "-y",
        "-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{w}x{h}", "-r", f"{fps:g}", "-i", "-",
        "-c:v", "libx264", "-qp", str(int(qp)), "-pix_fmt", "yuv420p", "-threads", "1",
        "-map_metadata", "-1", "-fflags", "+bitexact", "-flags:v", "+bitexact",
        str(out_path),
    ]  # fmt: skip
    _run(cmd, np.ascontiguousarray(frames).tobytes())
    return out_path


def probe_size(path: str | Path, encoder: Encoder) -> tuple[int, int]:
    res = subprocess.run([encoder.path, "-hide_banner", "-i", str(path)], capture_output=True, text=True, check=False)
    m = re.search(r"Video:.*?(\d{2,5})x(\d{2,5})", res.stderr)
    if not m:
        raise MediaError(f"cannot determine video size of {path}")
    return int(m.group(1)), int(m.group(2))


def decode_video(path: str | Path, encoder: Encoder) -> np.ndarray:
    w, h = probe_size(path, encoder)
    raw = _run([
        encoder.path, "-hide_banner", "-loglevel", "error", "-i", str(path),
        "-f", "rawvideo", "-pix_fmt", "rgb24", "-threads", "1", "-",
    ])  # fmt: skip
    n = len(raw) // (h * w * 3)
    if n == 0:
        raise MediaError(f"no frames decoded from {path}")
    return np.frombuffer(raw, dtype=np.uint8)[: n * h * w * 3].reshape(n, h, w, 3).copy()


def synthesize_degradation(
    y: FrameClip,
    scale: int,
    qp: int,
    encoder: Encoder | None = None,
    mp4_path: str | Path | None = None,
) -> DegradedTriple:
    """x = decode(encode(bicubic_down(y))), z = bicubic_down(y)."""
    if scale < 1:
        raise ValueError("scale must be >= 1")
    if y.height % (2 * scale) or y.width % (2 * scale):
        raise ValueError(
            f"{y.width}x{y.height} is not divisible by 2*scale={2 * scale}; "
            "the codec needs even downscaled dimensions"
        )
    encoder = encoder or find_encoder()
    z = bicubic_resize(y, Fraction(1, scale))
    if mp4_path is None:
        with tempfile.TemporaryDirectory() as tmp:
            mp4 = encode_h264(z.frames, Path(tmp) / "x.mp4", qp, encoder, y.fps)
            x_frames = decode_video(mp4, encoder)
    else:
        mp4 = encode_h264(z.frames, mp4_path, qp, encoder, y.fps)
        x_frames = decode_video(mp4, encoder)
    if x_frames.shape != z.frames.shape:
        raise EncoderError(f"decoded clip has shape {x_frames.shape}, expected {z.frames.shape}")
    x = FrameClip(x_frames, y.fps, y.source_id)
    return DegradedTriple(y=y, x=x, z=z, scale=scale, qp=qp)


# --------------------------------------------------------------------------- patches


@dataclass
class PatchBatch:
    inputs: np.ndarray  # (B, 5, 3, p, p) degraded window, float32 in [0, 1]
    refs: np.ndarray  # (B, 3, 3, p, p) bicubic references at t-1, t, t+1
    targets: np.ndarray  # (B, 3, p*s, p*s) original centre frame
    geometry: list[dict] = field(default_factory=list)
    extra: np.ndarray | None = None  # (B, C, p, p) crops of a per-frame side map, e.g. a DFM


def window_indices(t: int, n_frames: int, radius: int = 2) -> tuple[int, ...]:
    return tuple(min(max(i, 0), n_frames - 1) for i in range(t - radius, t + radius + 1))


def augment(arr: np.ndarray, hflip: bool, vflip: bool, rot: int) -> np.ndarray:
    """Flip / rotate the two trailing spatial axes of a (..., H, W) array."""
    if hflip:
        arr = arr[..., :, ::-1]
    if vflip:
        arr = arr[..., ::-1, :]
    if rot % 4:
        arr = np.rot90(arr, k=rot % 4, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def _chw(frames: np.ndarray) -> np.ndarray:
    return frames.transpose(0, 3, 1, 2).astype(np.float32) / 255.0


def sample_patch(
    triple: DegradedTriple,
    t: int,
    patch: int,
    rng: np.random.Generator | int | None = None,
    augment_data: bool = True,
    origin: tuple[int, int] | None = None,
    extra: np.ndarray | None = None,
) -> PatchBatch:
    """One training sample centred on frame ``t``; geometry is recorded for replay.

    ``extra`` is an optional (T, C, H, W) float map at input resolution; frame
    ``t`` of it is cropped and augmented exactly like the inputs.
    """
    rng = np.random.default_rng(rng)
    s = triple.scale
    n, h, w = len(triple.x), triple.x.height, triple.x.width
    if not 0 <= t < n:
        raise IndexError(f"frame index {t} outside clip of {n} frames")
    if patch > h or patch > w or patch < 1:
        raise ValueError(f"patch {patch} does not fit a {w}x{h} input frame")
    if origin is None:
        origin = (int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1)))
    r0, c0 = origin
    if not (0 <= r0 <= h - patch and 0 <= c0 <= w - patch):
        raise ValueError(f"crop origin {origin} out of bounds")
    if augment_data:
        hflip, vflip, rot = bool(rng.integers(2)), bool(rng.integers(2)), int(rng.integers(4))
    else:
        hflip, vflip, rot = False, False, 0

    win = list(window_indices(t, n))
    ref = list(window_indices(t, n, 1))
    xs = _chw(triple.x.frames[win, r0 : r0 + patch, c0 : c0 + patch])
    zs = _chw(triple.z.frames[ref, r0 : r0 + patch, c0 : c0 + patch])
    ys = _chw(triple.y.frames[[t], r0 * s : (r0 + patch) * s, c0 * s : (c0 + patch) * s])[0]
    geom = {"t": t, "origin": (r0, c0), "hflip": hflip, "vflip": vflip, "rot": rot, "window": win}
    ex = None
    if extra is not None:
        ex = augment(np.asarray(extra[t, :, r0 : r0 + patch, c0 : c0 + patch], dtype=np.float32), hflip, vflip, rot)[None]
    return PatchBatch(
        inputs=augment(xs, hflip, vflip, rot)[None],
        refs=augment(zs, hflip, vflip, rot)[None],
        targets=augment(ys, hflip, vflip, rot)[None],
        geometry=[geom],
        extra=ex,
    )


def sample_patch_batch(
    triples: Sequence[DegradedTriple],
    batch: int,
    patch: int,
    rng: np.random.Generator,
    augment_data: bool = True,
    extras: Sequence[np.ndarray] | None = None,
) -> PatchBatch:
    parts = []
    for _ in range(batch):
        k = int(rng.integers(len(triples)))
        t = int(rng.integers(len(triples[k].x)))
        pb = sample_patch(triples[k], t, patch, rng, augment_data, extra=None if extras is None else extras[k])
        pb.geometry[0]["clip"] = k
        parts.append(pb)
    return PatchBatch(
        inputs=np.concatenate([p.inputs for p in parts]),
        refs=np.concatenate([p.refs for p in parts]),
        targets=np.concatenate([p.targets for p in parts]),
        geometry=[p.geometry[0] for p in parts],
        extra=None if extras is None else np.concatenate([p.extra for p in parts]),
    )


# --------------------------------------------------------------------------- manifests


SPLITS = ("train", "val", "test")


@dataclass
class ClipEntry:
    id: str
    y: str
    x: str
    z: str
    split: str


@dataclass
class DatasetManifest:
    clips: list[ClipEntry]
    scale: int
    qp: int
    seed: int
    encoder_version: str = ""

    def __post_init__(self):
        self.clips = [c if isinstance(c, ClipEntry) else ClipEntry(**c) for c in self.clips]
        seen: dict[str, str] = {}
        for c in self.clips:
            if c.split not in SPLITS:
                raise ValueError(f"unknown split {c.split!r} for clip {c.id}")
            if c.id in seen and seen[c.id] != c.split:
                raise ValueError(f"clip {c.id} appears in both {seen[c.id]} and {c.split}")
            seen[c.id] = c.split

    def split(self, name: str) -> list[ClipEntry]:
        return [c for c in self.clips if c.split == name]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        d = json.loads(Path(path).read_text())
        return cls(**d)


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items to ``fractions``."""
    raw = [f * n for f in fractions]
    counts = [int(np.floor(r + 1e-9)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def assign_splits(clip_ids: Sequence[str], fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> dict[str, str]:
    if len(fractions) != len(SPLITS):
        raise ValueError("need one fraction per split (train, val, test)")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    ids = sorted(clip_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("clip ids must be unique")
    wanted = sum(1 for f in fractions if f > 0)
    if len(ids) < wanted:
        raise ValueError(f"{len(ids)} clips cannot fill {wanted} non-empty splits")
    counts = split_counts(len(ids), fractions)
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] = 1
    order = np.random.default_rng(seed).permutation(len(ids))
    out, start = {}, 0
    for name, cnt in zip(SPLITS, counts):
        for j in order[start : start + cnt]:
            out[ids[j]] = name
        start += cnt
    return out


def kfold_splits(clip_ids: Sequence[str], k: int, seed: int = 0, val_count: int = 1) -> list[dict[str, str]]:
    """Fold i tests on the i-th of k disjoint chunks; ``val_count`` clips of the rest validate."""
    ids = sorted(clip_ids)
    if k < 2 or len(ids) < k:
        raise ValueError(f"k-fold needs 2 <= k <= number of clips ({len(ids)}), got k={k}")
    order = [ids[j] for j in np.random.default_rng(seed).permutation(len(ids))]
    chunks = np.array_split(np.arange(len(ids)), k)
    folds = []
    for chunk in chunks:
        test = {order[j] for j in chunk}
        rest = [c for c in order if c not in test]
        val = set(rest[:val_count])
        folds.append({c: "test" if c in test else "val" if c in val else "train" for c in ids})
    return folds


def build_manifest(
    clips: Sequence[ClipEntry | dict | str],
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    scale: int = 2,
    qp: int = 28,
    encoder_version: str = "",
    k_folds: int | None = None,
) -> DatasetManifest | list[DatasetManifest]:
    """Assign clips to train/val/test deterministically; ``k_folds`` returns one manifest per fold."""
    entries = []
    for c in clips:
        if isinstance(c, str):
            c = ClipEntry(id=c, y="", x="", z="", split="train")
        elif isinstance(c, dict):
            c = ClipEntry(**{"split": "train", **c})
        entries.append(c)

    def with_splits(mapping):
        return DatasetManifest(
            clips=[ClipEntry(c.id, c.y, c.x, c.z, mapping[c.id]) for c in sorted(entries, key=lambda c: c.id)],
            scale=scale,
            qp=qp,
            seed=seed,
            encoder_version=encoder_version,
        )

    ids = [c.id for c in entries]
    if k_folds:
        return [with_splits(m) for m in kfold_splits(ids, k_folds, seed)]
    return with_splits(assign_splits(ids, fractions, seed))


def load_triple(entry: ClipEntry, root: str | Path, scale: int, qp: int, encoder: Encoder | None = None) -> DegradedTriple:
    root = Path(root)

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else root / p

    y = read_frames(resolve(entry.y))
    xp = resolve(entry.x)
    x = read_frames(xp, encoder=encoder) if xp.is_dir() else FrameClip(decode_video(xp, encoder or find_encoder()))
    z = read_frames(resolve(entry.z))
    for c in (y, x, z):
        c.source_id = entry.id
    return DegradedTriple(y=y, x=x, z=z, scale=scale, qp=qp)
