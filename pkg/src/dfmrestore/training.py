"""Two-stage training: interpolation nets first, then the modulated restorer; plus fine-tuning."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .core_nn import (
    Adam,
    Checkpoint,
    charbonnier_loss,
    cosine_lr,
    l1_loss,
    load_checkpoint,
    load_optimizer_state,
)
from .media import DegradedTriple, sample_patch_batch
from .metrics import psnr, ssim
from .pipeline import Pipeline
from .restoration import ModelConfig, VideoRestorer
from .sensing import InterpNetPair, clip_reference, compute_dfm, estimate_reference

log = logging.getLogger(__name__)

STAGES = ("1", "2", "finetune")


@dataclass
class TrainingConfig:
    stage: str = "1"
    iterations: int = 5000
    batch_size: int = 8
    patch_size: int = 32
    lr: float = 2e-4
    seed: int = 0
    augment: bool = True
    ckpt_every: int = 0  # 0: only the final checkpoint
    eval_every: int = 0  # 0: no periodic validation
    log_every: int = 1
    cosine: bool = False
    joint: bool = False  # stage 2: keep the sensing nets trainable
    epochs: int = 1  # finetune only
    sensing_base: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        self.stage = str(self.stage)
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.patch_size < 1:
            raise ValueError("iterations must be >= 0, batch_size and patch_size >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainingConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


LOG_FIELDS = ("step", "loss", "psnr", "ssim", "wall_ms")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, step: int, loss: float = math.nan, psnr: float = math.nan, ssim: float = math.nan, wall_ms: float = 0.0):
        if self.rows and step < self.rows[-1]["step"]:
            raise ValueError(f"log step {step} precedes {self.rows[-1]['step']}")
        self.rows.append({"step": step, "loss": loss, "psnr": psnr, "ssim": ssim, "wall_ms": wall_ms})

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows if not math.isnan(r["loss"])]

    def evals(self) -> list[dict]:
        return [r for r in self.rows if not math.isnan(r["psnr"])]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_FIELDS})
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> TrainLog:
        out = cls()
        with Path(path).open() as fh:
            for r in csv.DictReader(fh):
                out.add(int(r["step"]), float(r["loss"]), float(r["psnr"]), float(r["ssim"]), float(r["wall_ms"]))
        return out


# --------------------------------------------------------------------------- evaluation helpers


def evaluate(pipeline: Pipeline, triples: Sequence[DegradedTriple]) -> dict:
    """Mean PSNR/SSIM of restored clips against their originals, plus per-clip rows."""
    rows = []
    for tr in triples:
        out = pipeline.restore_uint8(tr.x.frames)
        p = float(np.mean([psnr(o, y) for o, y in zip(out, tr.y.frames)]))
        s = float(np.mean([ssim(o, y) for o, y in zip(out, tr.y.frames)]))
        rows.append({"clip_id": tr.y.source_id, "psnr_db": p, "ssim": s})
    return {
        "psnr": float(np.mean([r["psnr_db"] for r in rows])) if rows else math.nan,
        "ssim": float(np.mean([r["ssim"] for r in rows])) if rows else math.nan,
        "clips": rows,
    }


def validation_loss(pipeline: Pipeline, triples: Sequence[DegradedTriple]) -> float:
    """Mean Charbonnier loss over every frame of the given clips (unclamped outputs)."""
    total, count = 0.0, 0
    for tr in triples:
        out = pipeline.restore(tr.x.to_float())
        target = torch.as_tensor(tr.y.to_float(), dtype=torch.float64)
        total += charbonnier_loss(torch.as_tensor(out, dtype=torch.float64), target).item() * len(out)
        count += len(out)
    return total / max(count, 1)


def bicubic_baseline(triples: Sequence[DegradedTriple]) -> float:
    from .media import resize_frames

    vals = []
    for tr in triples:
        up = resize_frames(tr.x.frames, tr.y.height, tr.y.width)
        vals.append(np.mean([psnr(u, y) for u, y in zip(up, tr.y.frames)]))
    return float(np.mean(vals))


# --------------------------------------------------------------------------- run directory


class RunDir:
    """{config.json, ckpt/, logs/} layout for one training run."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def ckpt_dir(self) -> Path:
        return self.root / "ckpt"

    @property
    def last_ckpt(self) -> Path:
        return self.ckpt_dir / "last.ckpt"

    @property
    def final_ckpt(self) -> Path:
        return self.ckpt_dir / "final.ckpt"

    @property
    def log_csv(self) -> Path:
        return self.root / "logs" / "train.csv"

    def write_config(self, cfg: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


# --------------------------------------------------------------------------- generic loop


def _loop(
    step_fn: Callable[[object], torch.Tensor],
    opt: Adam,
    data: Sequence[DegradedTriple],
    cfg: TrainingConfig,
    pipeline: Pipeline,
    train_log: TrainLog,
    rng: np.random.Generator,
    start: int,
    total: int,
    run: RunDir | None,
    meta: dict,
    val: Sequence[DegradedTriple] | None = None,
    extras: Sequence[np.ndarray] | None = None,
) -> None:
    t0 = time.perf_counter()
    dtype = cfg.torch_dtype
    for step in range(start + 1, total + 1):
        if cfg.cosine:
            opt.set_lr(cosine_lr(cfg.lr, step - 1, total))
        pb = sample_patch_batch(data, cfg.batch_size, cfg.patch_size, rng, cfg.augment, extras)
        batch = {
            "inputs": torch.as_tensor(pb.inputs, dtype=dtype),
            "refs": torch.as_tensor(pb.refs, dtype=dtype),
            "targets": torch.as_tensor(pb.targets, dtype=dtype),
        }
        if pb.extra is not None:
            batch["zhat"] = torch.as_tensor(pb.extra, dtype=dtype)
        opt.zero_grad()
        loss = step_fn(batch)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        loss.backward()
        opt.step()
        wall = (time.perf_counter() - t0) * 1000.0
        p = s = math.nan
        if val and cfg.eval_every and step % cfg.eval_every == 0:
            ev = evaluate(pipeline, val)
            p, s = ev["psnr"], ev["ssim"]
        if step % cfg.log_every == 0 or step == total or not math.isnan(p):
            train_log.add(step, float(loss.item()), p, s, wall)
        if run is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0 and step != total:
            _save(pipeline, run.last_ckpt, step, meta, opt, rng)
            train_log.to_csv(run.log_csv)


def _save(pipeline: Pipeline, path: Path, step: int, meta: dict, opt: Adam | None, rng: np.random.Generator | None):
    m = dict(meta)
    if rng is not None:
        m["rng_state"] = _rng_state(rng)
    pipeline.save(path, step=step, meta=m, optimizer=opt)


def _resume(run: RunDir | None, pipeline: Pipeline, opt: Adam, rng: np.random.Generator, train_log: TrainLog) -> int:
    if run is None or not run.last_ckpt.exists():
        return 0
    ckpt = load_checkpoint(run.last_ckpt)
    _load_params(pipeline, ckpt)
    if ckpt.optimizer is not None:
        load_optimizer_state(opt, ckpt.optimizer)
    if "rng_state" in ckpt.meta:
        _set_rng_state(rng, ckpt.meta["rng_state"])
    if run.log_csv.exists():
        train_log.rows = [r for r in TrainLog.from_csv(run.log_csv).rows if r["step"] <= ckpt.step]
    log.info("resumed from %s at step %d", run.last_ckpt, ckpt.step)
    return ckpt.step


def _load_params(pipeline: Pipeline, ckpt: Checkpoint) -> None:
    restored = Pipeline.from_checkpoint(ckpt, dtype=pipeline.dtype())
    with torch.no_grad():
        for dst, src in zip(pipeline.sensing.parameters(), restored.sensing.parameters()):
            dst.copy_(src)
        if pipeline.model is not None and restored.model is not None:
            for dst, src in zip(pipeline.model.parameters(), restored.model.parameters()):
                dst.copy_(src)


def _finish(run: RunDir | None, pipeline: Pipeline, step: int, meta: dict, opt: Adam, rng, train_log: TrainLog) -> None:
    if run is None:
        return
    _save(pipeline, run.final_ckpt, step, meta, opt, rng)
    _save(pipeline, run.last_ckpt, step, meta, opt, rng)
    train_log.to_csv(run.log_csv)


def _check_refs(triples: Sequence[DegradedTriple]) -> None:
    if not triples:
        raise ValueError("no training clips")
    for tr in triples:
        if getattr(tr, "z", None) is None:
            raise ValueError(f"clip {tr.y.source_id} has no bicubic reference z")


# --------------------------------------------------------------------------- stage 1


def stage1_loss(nets: InterpNetPair, inputs: torch.Tensor, refs: torch.Tensor) -> torch.Tensor:
    """Mean absolute error of the three estimated references against z_{t-1}, z_t, z_{t+1}."""
    z_prev, z_cur, z_next = estimate_reference(nets, inputs[:, 0], inputs[:, 2], inputs[:, 4])
    return (l1_loss(z_prev, refs[:, 0]) + l1_loss(z_cur, refs[:, 1]) + l1_loss(z_next, refs[:, 2])) / 3.0


def train_stage1(
    triples: Sequence[DegradedTriple],
    config: TrainingConfig,
    run_dir: str | Path | None = None,
    resume: bool = False,
) -> tuple[Pipeline, TrainLog]:
    _check_refs(triples)
    torch.manual_seed(config.seed)
    nets = InterpNetPair(base=config.sensing_base).to(config.torch_dtype)
    pipeline = Pipeline(nets)
    opt = Adam({f"sensing.{k}": v for k, v in nets.named_parameters()}, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    train_log = TrainLog()
    run = RunDir(run_dir) if run_dir is not None else None
    meta = {"stage": "1", "training_config": config.to_dict()}
    if run is not None:
        run.write_config(meta)
    start = _resume(run, pipeline, opt, rng, train_log) if resume else 0
    nets.train()
    _loop(
        lambda b: stage1_loss(nets, b["inputs"], b["refs"]),
        opt, triples, config, pipeline, train_log, rng, start, config.iterations, run, meta,
    )  # fmt: skip
    _finish(run, pipeline, config.iterations, meta, opt, rng, train_log)
    return pipeline, train_log


# --------------------------------------------------------------------------- stage 2


def stage2_loss(
    pipeline: Pipeline,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    joint: bool = False,
    zhat: torch.Tensor | None = None,
) -> torch.Tensor:
    """Charbonnier loss of the restored centre frame.

    The map is normalised over the training window. ``zhat`` holds precomputed
    references cropped like ``inputs``; without it they are estimated from the patch.
    """
    model = pipeline.model
    if model.config.dfm_enabled and zhat is not None and not joint:
        e = compute_dfm(zhat, inputs[:, 2]).e
    elif model.config.dfm_enabled:
        with torch.set_grad_enabled(joint):
            _, z_cur, _ = estimate_reference(pipeline.sensing, inputs[:, 0], inputs[:, 2], inputs[:, 4])
        e = compute_dfm(z_cur if joint else z_cur.detach(), inputs[:, 2]).e
    else:
        e = None
    return charbonnier_loss(model(inputs, e), targets)


@torch.no_grad()
def train_references(pipeline: Pipeline, triples: Sequence[DegradedTriple]) -> list[np.ndarray]:
    """Full-frame z_hat for every training clip; valid to cache because the sensing nets are frozen."""
    pipeline.sensing.eval()
    return [
        clip_reference(pipeline.sensing, torch.as_tensor(tr.x.to_float(), dtype=pipeline.dtype())).float().numpy()
        for tr in triples
    ]


def _load_stage1(stage1: Pipeline | Checkpoint | str | Path, dtype) -> Pipeline:
    if isinstance(stage1, Pipeline):
        return Pipeline(copy.deepcopy(stage1.sensing).to(dtype), None)
    if not isinstance(stage1, Checkpoint):
        stage1 = load_checkpoint(stage1)
    return Pipeline.from_checkpoint(stage1, dtype=dtype)


def train_stage2(
    triples: Sequence[DegradedTriple],
    stage1: Pipeline | Checkpoint | str | Path,
    config: TrainingConfig,
    model_config: ModelConfig | None = None,
    val: Sequence[DegradedTriple] | None = None,
    run_dir: str | Path | None = None,
    resume: bool = False,
) -> tuple[Pipeline, TrainLog]:
    if not triples:
        raise ValueError("no training clips")
    model_config = model_config or ModelConfig(scale=triples[0].scale)
    if any(tr.scale != model_config.scale for tr in triples):
        raise ValueError("training clips do not match the model's scale")
    sensing = _load_stage1(stage1, config.torch_dtype).sensing
    torch.manual_seed(config.seed)
    model = VideoRestorer(model_config).to(config.torch_dtype)
    pipeline = Pipeline(sensing, model)

    for p in sensing.parameters():
        p.requires_grad_(config.joint)
    params = {f"restorer.{k}": v for k, v in model.named_parameters()}
    if config.joint:
        params.update({f"sensing.{k}": v for k, v in sensing.named_parameters()})
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    train_log = TrainLog()
    run = RunDir(run_dir) if run_dir is not None else None
    meta = {"stage": "2", "training_config": config.to_dict()}
    if run is not None:
        run.write_config({**meta, "model_config": model_config.to_dict()})
    start = _resume(run, pipeline, opt, rng, train_log) if resume else 0
    extras = train_references(pipeline, triples) if model_config.dfm_enabled and not config.joint else None
    model.train()
    _loop(
        lambda b: stage2_loss(pipeline, b["inputs"], b["targets"], config.joint, b.get("zhat")),
        opt, triples, config, pipeline, train_log, rng, start, config.iterations, run, meta, val, extras,
    )  # fmt: skip
    _finish(run, pipeline, config.iterations, meta, opt, rng, train_log)
    return pipeline, train_log


# --------------------------------------------------------------------------- fine-tuning


def steps_per_epoch(triples: Sequence[DegradedTriple], batch_size: int) -> int:
    return max(1, math.ceil(sum(len(tr.x) for tr in triples) / batch_size))


def finetune(
    model_ckpt: Pipeline | Checkpoint | str | Path,
    triples: Sequence[DegradedTriple],
    config: TrainingConfig,
    val: Sequence[DegradedTriple],
    run_dir: str | Path | None = None,
) -> tuple[Pipeline, TrainLog]:
    """Continue stage-2 optimisation on new-domain clips, validating after every epoch.

    Row 0 of the log holds the pre-fine-tuning validation score.
    """
    if isinstance(model_ckpt, Pipeline):
        model_ckpt = model_ckpt.to_checkpoint()
    if not isinstance(model_ckpt, Checkpoint):
        model_ckpt = load_checkpoint(model_ckpt)
    pipeline = Pipeline.from_checkpoint(model_ckpt, dtype=config.torch_dtype)
    if pipeline.model is None:
        raise ValueError("fine-tuning needs a stage-2 checkpoint")
    if any(tr.scale != pipeline.scale for tr in list(triples) + list(val)):
        raise ValueError(
            f"checkpoint was trained at scale {pipeline.scale}, data has scale "
            f"{sorted({tr.scale for tr in triples})}"
        )
    for p in pipeline.sensing.parameters():
        p.requires_grad_(config.joint)
    params = {f"restorer.{k}": v for k, v in pipeline.model.named_parameters()}
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    train_log = TrainLog()
    ev = evaluate(pipeline, val)
    train_log.add(0, math.nan, ev["psnr"], ev["ssim"], 0.0)
    per_epoch = steps_per_epoch(triples, config.batch_size)
    extras = train_references(pipeline, triples) if pipeline.model.config.dfm_enabled else None
    meta = {"stage": "finetune", "training_config": config.to_dict()}
    run = RunDir(run_dir) if run_dir is not None else None
    if run is not None:
        run.write_config(meta)
    cfg = TrainingConfig.from_dict({**config.to_dict(), "eval_every": 0, "ckpt_every": 0})
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        pipeline.model.train()
        epoch_log = TrainLog()
        _loop(
            lambda b: stage2_loss(pipeline, b["inputs"], b["targets"], zhat=b.get("zhat")),
            opt, triples, cfg, pipeline, epoch_log, rng, (epoch - 1) * per_epoch, epoch * per_epoch, None, meta,
            None, extras,
        )  # fmt: skip
        ev = evaluate(pipeline, val)
        last = epoch_log.losses[-1] if epoch_log.losses else math.nan
        train_log.add(epoch * per_epoch, last, ev["psnr"], ev["ssim"], (time.perf_counter() - t0) * 1000.0)
    if run is not None:
        _save(pipeline, run.final_ckpt, config.epochs * per_epoch, meta, opt, rng)
        train_log.to_csv(run.log_csv)
    return pipeline, train_log
