"""Evaluation harnesses: per-clip metrics, DFM/error correlation, QP and n sweeps, DFM ablation."""
from __future__ import annotations

import csv
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .media import DegradedTriple, Encoder, FrameClip, synthesize_degradation
from .pipeline import Pipeline
from .resample import resize_array
from .restoration import ModelConfig
from .training import TrainingConfig, evaluate, train_stage2


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if "psnr_db" in r and not (r["psnr_db"] >= 0 or math.isinf(r["psnr_db"])):
                raise ValueError(f"invalid PSNR {r['psnr_db']}")
            if "ssim" in r and not -1.0 - 1e-9 <= r["ssim"] <= 1.0 + 1e-9:
                raise ValueError(f"SSIM {r['ssim']} outside [-1, 1]")

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def mean(self, name: str) -> float:
        vals = [v for v in self.column(name) if not math.isinf(v)]
        return float(np.mean(vals)) if vals else math.inf

    def write_csv(self, path: str | Path, columns: Sequence[str]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in columns])
        return path

    def write_json(self, path: str | Path, summary: Mapping | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"meta": self.meta, "summary": dict(summary or {})}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return v


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not JSON serialisable: {type(v)}")


def metrics_report(pipeline: Pipeline, triples: Sequence[DegradedTriple], **meta) -> MetricsReport:
    ev = evaluate(pipeline, triples)
    rows = sorted(ev["clips"], key=lambda r: r["clip_id"])
    return MetricsReport(rows=rows, meta=meta)


# --------------------------------------------------------------------------- DFM vs. error


@dataclass
class CorrelationRecord:
    pairs: list[tuple[int, int, float, float]]  # (patch_y, patch_x, dfm_mean, err_mean)
    r: float
    degenerate: bool
    patch: int
    grid: tuple[int, int]

    def __post_init__(self):
        if not -1.0 - 1e-12 <= self.r <= 1.0 + 1e-12:
            raise ValueError(f"correlation {self.r} outside [-1, 1]")

    @classmethod
    def pooled(cls, records: Sequence[CorrelationRecord]) -> CorrelationRecord:
        pairs = [p for rec in records for p in rec.pairs]
        r, degenerate = pearson([p[2] for p in pairs], [p[3] for p in pairs])
        return cls(pairs, r, degenerate, records[0].patch, records[0].grid)


def pearson(a: Sequence[float], b: Sequence[float]) -> tuple[float, bool]:
    """Pearson r; (0.0, True) when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("pair counts differ")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if a.size < 2 or denom == 0.0:
        return 0.0, True
    return float(np.clip((da @ db) / denom, -1.0, 1.0)), False


def _to_map(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3:
        return arr.mean(axis=0)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        return arr.mean(axis=-1)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"expected a 2-D map or 3-channel image, got {arr.shape}")


def dfm_error_correlation(e, err, patch: int = 16) -> CorrelationRecord:
    """Tile the DFM and the error map into patch x patch cells and correlate the cell means.

    ``err`` is averaged over channels and bicubically resized to the DFM's
    resolution when the two differ.
    """
    e_map = _to_map(e)
    err_map = _to_map(err)
    if err_map.shape != e_map.shape:
        err_map = resize_array(err_map, *e_map.shape)
    h, w = e_map.shape
    if patch < 1 or patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than the {h}x{w} map")
    gh, gw = h // patch, w // patch
    pairs = []
    for i in range(gh):
        for j in range(gw):
            sl = np.s_[i * patch : (i + 1) * patch, j * patch : (j + 1) * patch]
            pairs.append((i, j, float(e_map[sl].mean()), float(err_map[sl].mean())))
    r, degenerate = pearson([p[2] for p in pairs], [p[3] for p in pairs])
    return CorrelationRecord(pairs, r, degenerate, patch, (gh, gw))


def clip_correlation(pipeline: Pipeline, triples: Sequence[DegradedTriple], patch: int = 16) -> CorrelationRecord:
    """Pooled correlation between per-cell mean DFM and mean |y - y_hat| over every frame."""
    records = []
    for tr in triples:
        out, e = pipeline.restore(tr.x.to_float(), return_dfm=True)
        target = tr.y.to_float()
        restored = np.clip(out, 0.0, 1.0)
        for k in range(len(out)):
            err = np.abs(target[k] - restored[k])
            records.append(dfm_error_correlation(e[k], err, patch))
    return CorrelationRecord.pooled(records)


def correlation_report(rec: CorrelationRecord) -> MetricsReport:
    rows = [{"patch_x": j, "patch_y": i, "dfm_mean": d, "err_mean": m} for i, j, d, m in rec.pairs]
    return MetricsReport(rows=rows, meta={"patch": rec.patch, "pearson_r": rec.r, "degenerate": rec.degenerate})


# --------------------------------------------------------------------------- sweeps


def run_qp_sweep(
    pipeline: Pipeline,
    clips: Sequence[FrameClip],
    qps: Sequence[int],
    encoder: Encoder | None = None,
) -> MetricsReport:
    """Degrade the same originals at each QP, restore them and average PSNR/SSIM per QP."""
    rows = []
    for qp in qps:
        triples = [synthesize_degradation(c, pipeline.scale, qp, encoder) for c in clips]
        ev = evaluate(pipeline, triples)
        rows.append({"qp": int(qp), "psnr_db": ev["psnr"], "ssim": ev["ssim"]})
    return MetricsReport(rows=rows, meta={"scale": pipeline.scale, "clips": [c.source_id for c in clips]})


def _stage1_for(stage1: Pipeline | Mapping[int, Pipeline], seed: int) -> Pipeline:
    if isinstance(stage1, Pipeline):
        return stage1
    return stage1[seed]


def run_n_sweep(
    train: Sequence[DegradedTriple],
    test: Sequence[DegradedTriple],
    stage1: Pipeline | Mapping[int, Pipeline],
    config: TrainingConfig,
    model_config: ModelConfig,
    n_values: Sequence[int],
) -> MetricsReport:
    """One stage-2 run per n with identical budget and seed; one PSNR row per n."""
    if any(n < 1 for n in n_values):
        raise ValueError("n values must be >= 1")
    rows = []
    for n in n_values:
        pipe, _ = train_stage2(train, _stage1_for(stage1, config.seed), config, replace(model_config, n_dmm=int(n)))
        ev = evaluate(pipe, test)
        rows.append({"n": int(n), "psnr_db": ev["psnr"], "ssim": ev["ssim"]})
    return MetricsReport(rows=rows, meta={"seed": config.seed, "iterations": config.iterations})


# --------------------------------------------------------------------------- ablation


def check_arms(a: tuple[TrainingConfig, ModelConfig], b: tuple[TrainingConfig, ModelConfig]) -> None:
    """Arms may differ only in ``dfm_enabled``."""
    if a[0].to_dict() != b[0].to_dict():
        raise ValueError("ablation arms use different training configs")
    ma, mb = a[1].to_dict(), b[1].to_dict()
    ma.pop("dfm_enabled")
    mb.pop("dfm_enabled")
    if ma != mb:
        raise ValueError("ablation arms use different model configs")


def run_ablation(
    train: Sequence[DegradedTriple],
    test: Sequence[DegradedTriple],
    stage1: Pipeline | Mapping[int, Pipeline],
    config: TrainingConfig,
    model_config: ModelConfig,
    seeds: Sequence[int] = (0,),
    arms: tuple[bool, bool] = (True, False),
    arm_configs: tuple[tuple[TrainingConfig, ModelConfig], tuple[TrainingConfig, ModelConfig]] | None = None,
    return_models: bool = False,
):
    """Paired with/without-DFM training per seed; the row delta is PSNR(first arm) - PSNR(second).

    With ``return_models`` the trained pipelines come back too, as
    ``(report, {seed: (first_arm, second_arm)})``.
    """
    if arm_configs is None:
        arm_configs = tuple((config, replace(model_config, dfm_enabled=flag)) for flag in arms)
    check_arms(*arm_configs)
    rows, models = [], {}
    for seed in seeds:
        scores, pipes = [], []
        for tcfg, mcfg in arm_configs:
            tcfg = replace(tcfg, seed=int(seed))
            pipe, _ = train_stage2(train, _stage1_for(stage1, seed), tcfg, mcfg)
            scores.append(evaluate(pipe, test))
            pipes.append(pipe)
        models[int(seed)] = tuple(pipes)
        rows.append(
            {
                "seed": int(seed),
                "psnr_with": scores[0]["psnr"],
                "psnr_without": scores[1]["psnr"],
                "ssim_with": scores[0]["ssim"],
                "ssim_without": scores[1]["ssim"],
                "delta_db": scores[0]["psnr"] - scores[1]["psnr"],
            }
        )
    rep = MetricsReport(rows=rows, meta={"iterations": config.iterations, "arms": [m.dfm_enabled for _, m in arm_configs]})
    rep.meta["mean_delta_db"] = rep.mean("delta_db")
    return (rep, models) if return_models else rep
