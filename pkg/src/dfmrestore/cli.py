"""Command-line entry point: ``dfmrestore {synth,degrade,train,restore,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Sequence
from dataclasses import fields
from pathlib import Path

from . import __version__
from .media import (
    VIDEO_SUFFIXES,
    ClipEntry,
    DatasetManifest,
    EncoderNotFound,
    MediaError,
    build_manifest,
    encode_h264,
    find_encoder,
    load_triple,
    read_frames,
    synthesize_degradation,
    write_frames,
    write_gray_frames,
)
from .restoration import ModelConfig
from .training import TrainingConfig

log = logging.getLogger("dfmrestore")

ENV_PREFIX = "DFMRESTORE_"
EVAL_TASKS = ("metrics", "qp-sweep", "n-sweep", "ablation", "dfm-corr")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- config resolution

TRAIN_KEYS = {f.name: f.type for f in fields(TrainingConfig)}
MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
DATA_KEYS = {"manifest": "str", "stage1_ckpt": "str", "ckpt": "str", "resume": "bool"}
RUN_KEYS = {**TRAIN_KEYS, **MODEL_KEYS, **DATA_KEYS}


def _coerce(key: str, value):
    kind = str(RUN_KEYS[key])
    if isinstance(value, str):
        if "bool" in kind:
            low = value.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise UsageError(f"{key}: expected a boolean, got {value!r}")
            return low in ("1", "true", "yes")
        if "int" in kind:
            return int(value)
        if "float" in kind:
            return float(value)
    return value


def load_config_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(path.read_text())
    return json.loads(path.read_text())


def resolve_config(file_cfg: dict, env: dict, flags: dict) -> dict:
    """Merge file < environment < flags; unknown keys are rejected before any work starts."""
    unknown = set(file_cfg) - set(RUN_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(file_cfg)
    for key in RUN_KEYS:
        ev = env.get(ENV_PREFIX + key.upper())
        if ev is not None:
            merged[key] = ev
    merged.update({k: v for k, v in flags.items() if v is not None})
    try:
        return {k: _coerce(k, v) for k, v in merged.items()}
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def split_config(cfg: dict) -> tuple[TrainingConfig, ModelConfig, dict]:
    try:
        tcfg = TrainingConfig.from_dict({k: v for k, v in cfg.items() if k in TRAIN_KEYS})
        mcfg = ModelConfig.from_dict({k: v for k, v in cfg.items() if k in MODEL_KEYS})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return tcfg, mcfg, {k: v for k, v in cfg.items() if k in DATA_KEYS}


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _encoder():
    try:
        return find_encoder()
    except EncoderNotFound as exc:
        raise UsageError(str(exc)) from exc


def _load_split(manifest_path: str | Path, split: str, encoder=None):
    if not manifest_path:
        raise UsageError("--manifest is required")
    mpath = Path(manifest_path)
    if not mpath.is_file():
        raise UsageError(f"manifest not found: {mpath}")
    man = DatasetManifest.load(mpath)
    return man, [load_triple(e, mpath.parent, man.scale, man.qp, encoder) for e in man.split(split)]


def _ints(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    from .synthetic import make_clip

    out = Path(args.out)
    for i in range(args.count):
        clip = make_clip(args.seed * 1000 + i, n_frames=args.frames, size=args.size)
        write_frames(clip, out / f"clip{i:03d}")
    print(f"wrote {args.count} clips to {out}")
    return 0


def _input_clips(root: Path) -> list[Path]:
    if not root.is_dir():
        raise UsageError(f"input directory not found: {root}")
    items = [p for p in sorted(root.iterdir()) if p.is_dir() or p.suffix.lower() in VIDEO_SUFFIXES]
    if not items:
        raise UsageError(f"no clips found in {root}")
    return items


def cmd_degrade(args) -> int:
    if args.scale not in (2, 4):
        raise UsageError("--scale must be 2 or 4")
    encoder = _encoder()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fractions = tuple(float(v) for v in args.splits.split(","))
    entries = []
    for src in _input_clips(Path(args.input)):
        y = read_frames(src, encoder)
        cid = src.stem if src.is_file() else src.name
        x_rel = Path("x") / f"{cid}.mp4"
        z_rel = Path("z") / cid
        tr = synthesize_degradation(y, args.scale, args.qp, encoder, mp4_path=out / x_rel)
        write_frames(tr.z, out / z_rel)
        y_path = os.path.relpath(src.resolve(), out.resolve())
        entries.append(ClipEntry(id=cid, y=y_path, x=str(x_rel), z=str(z_rel), split="train"))
        log.info("degraded %s", cid)
    try:
        man = build_manifest(
            entries, fractions, args.seed, args.scale, args.qp, encoder.version, k_folds=args.kfold
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if isinstance(man, list):
        for k, m in enumerate(man):
            m.save(out / f"manifest_fold{k}.json")
        man[0].save(out / "manifest.json")
    else:
        man.save(out / "manifest.json")
    print(f"wrote {len(entries)} degraded clips and {out / 'manifest.json'}")
    return 0


def _train_flags(args) -> dict:
    flags = {
        "stage": args.stage,
        "iterations": args.iterations,
        "batch_size": args.batch_size,
        "patch_size": args.patch_size,
        "lr": args.lr,
        "seed": args.seed,
        "epochs": args.epochs,
        "ckpt_every": args.ckpt_every,
        "eval_every": args.eval_every,
        "n_dmm": args.n_dmm,
        "n_recon": args.n_recon,
        "channels": args.channels,
        "manifest": args.manifest,
        "stage1_ckpt": args.stage1_ckpt,
        "ckpt": args.ckpt,
    }
    if args.no_dfm:
        flags["dfm_enabled"] = False
    if args.no_augment:
        flags["augment"] = False
    if args.resume:
        flags["resume"] = True
    return flags


def cmd_train(args) -> int:
    from .core_nn import load_checkpoint
    from .training import finetune, train_stage1, train_stage2

    cfg = resolve_config(load_config_file(args.config), dict(os.environ), _train_flags(args))
    tcfg, mcfg, data = split_config(cfg)
    out = Path(args.out)
    if tcfg.stage == "2" and not data.get("stage1_ckpt"):
        raise UsageError("stage 2 requires --stage1-ckpt from a completed stage-1 run")
    if tcfg.stage == "finetune" and not data.get("ckpt"):
        raise UsageError("finetune requires --ckpt from a completed stage-2 run")
    for key in ("stage1_ckpt", "ckpt"):
        if data.get(key) and not Path(data[key]).is_file():
            raise UsageError(f"{key.replace('_', '-')} not found: {data[key]}")
    if data.get("stage1_ckpt"):
        try:
            load_checkpoint(data["stage1_ckpt"])
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    encoder = _encoder()
    man, train = _load_split(data.get("manifest"), "train", encoder)
    _, val = _load_split(data.get("manifest"), "val", encoder)
    if not train:
        raise UsageError("manifest has no training clips")
    _write_json(out / "resolved_config.json", cfg)
    mcfg.scale = man.scale
    if tcfg.stage == "1":
        _, tlog = train_stage1(train, tcfg, run_dir=out, resume=bool(data.get("resume")))
    elif tcfg.stage == "2":
        _, tlog = train_stage2(
            train, data["stage1_ckpt"], tcfg, mcfg, val=val, run_dir=out, resume=bool(data.get("resume"))
        )
    else:
        if not val:
            raise UsageError("finetune needs validation clips in the manifest")
        _, tlog = finetune(data["ckpt"], train, tcfg, val, run_dir=out)
    final = tlog.losses[-1] if tlog.losses else float("nan")
    print(f"stage {tcfg.stage} finished: final loss {final:.6f}; checkpoint {out / 'ckpt' / 'final.ckpt'}")
    return 0


def _load_pipeline(path):
    from .pipeline import Pipeline

    if not path:
        raise UsageError("--ckpt is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        pipe = Pipeline.from_checkpoint(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if pipe.model is None:
        raise UsageError(f"{path} holds no restoration model (stage-1 checkpoint?)")
    return pipe


def cmd_restore(args) -> int:
    from .metrics import to_uint8
    from .sensing import dfm_to_gray

    pipe = _load_pipeline(args.ckpt)
    encoder = None
    src = Path(args.input)
    if src.is_file() or args.mp4:
        encoder = _encoder()
    if not src.exists():
        raise UsageError(f"input not found: {src}")
    clip = read_frames(src, encoder)
    out = Path(args.out)
    restored, e = pipe.restore(clip.to_float(), return_dfm=True)
    frames = to_uint8(restored.transpose(0, 2, 3, 1))
    write_frames(frames, out / "frames")
    if args.dump_dfm:
        write_gray_frames([dfm_to_gray(m) for m in e], out / "dfm")
    if args.mp4:
        encode_h264(frames, out / "restored.mp4", args.preview_qp, encoder, clip.fps)
    print(f"restored {len(frames)} frames to {out / 'frames'}")
    return 0


def cmd_eval(args) -> int:
    from dataclasses import replace

    from . import evaluation as ev
    from .pipeline import Pipeline

    if args.task not in EVAL_TASKS:
        raise UsageError(f"unknown task {args.task!r}; valid tasks: {', '.join(EVAL_TASKS)}")
    out = Path(args.out)
    encoder = _encoder()
    man, test = _load_split(args.manifest, args.split, encoder)
    if not test:
        raise UsageError(f"manifest has no {args.split!r} clips")
    meta = {"scale": man.scale, "qp": man.qp, "seed": args.seed, "model": str(args.ckpt or args.stage1_ckpt)}

    if args.task == "metrics":
        rep = ev.metrics_report(_load_pipeline(args.ckpt), test, **meta)
        rep.write_csv(out / "metrics.csv", ["clip_id", "psnr_db", "ssim"])
        rep.write_json(out / "summary.json", {"psnr_db": rep.mean("psnr_db"), "ssim": rep.mean("ssim")})
    elif args.task == "dfm-corr":
        rec = ev.clip_correlation(_load_pipeline(args.ckpt), test, args.patch)
        rep = ev.correlation_report(rec)
        rep.meta.update(meta)
        rep.write_csv(out / "corr.csv", ["patch_x", "patch_y", "dfm_mean", "err_mean"])
        rep.write_json(out / "summary.json", {"pearson_r": rec.r, "degenerate": rec.degenerate, "pairs": len(rec.pairs)})
    elif args.task == "qp-sweep":
        qps = _ints(args.qps) or [23, 28, 33]
        rep = ev.run_qp_sweep(_load_pipeline(args.ckpt), [tr.y for tr in test], qps, encoder)
        rep.meta.update(meta)
        rep.write_csv(out / "sweep.csv", ["qp", "psnr_db"])
        rep.write_json(out / "summary.json", {"psnr_db": {str(r["qp"]): r["psnr_db"] for r in rep.rows}})
    else:
        cfg = resolve_config(load_config_file(args.config), dict(os.environ), {"stage": "2", "seed": args.seed, "iterations": args.iterations})
        tcfg, mcfg, _ = split_config(cfg)
        mcfg = replace(mcfg, scale=man.scale)
        if not args.stage1_ckpt or not Path(args.stage1_ckpt).is_file():
            raise UsageError(f"--stage1-ckpt is required for {args.task}")
        stage1 = Pipeline.from_checkpoint(args.stage1_ckpt, dtype=tcfg.torch_dtype)
        _, train = _load_split(args.manifest, "train", encoder)
        if args.task == "n-sweep":
            n_values = _ints(args.n_values) or [2, 10]
            rep = ev.run_n_sweep(train, test, stage1, tcfg, mcfg, n_values)
            rep.write_csv(out / "sweep.csv", ["n", "psnr_db"])
            rep.write_json(out / "summary.json", {"psnr_db": {str(r["n"]): r["psnr_db"] for r in rep.rows}})
        else:
            seeds = _ints(args.seeds) or [args.seed]
            rep = ev.run_ablation(train, test, stage1, tcfg, mcfg, seeds)
            rep.write_csv(out / "ablation.csv", ["seed", "psnr_with", "psnr_without", "delta_db"])
            rep.write_json(out / "summary.json", {"mean_delta_db": rep.meta["mean_delta_db"]})
    print(f"wrote {args.task} results to {out}")
    return 0


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfmrestore", description="Degradation-sensing video restoration")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write procedural PNG clips for experiments")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--frames", type=int, default=32)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("degrade", help="downscale + H.264-compress clips and write a manifest")
    d.add_argument("--in", dest="input", required=True, help="directory of PNG-sequence dirs or videos")
    d.add_argument("--out", required=True)
    d.add_argument("--scale", type=int, default=2)
    d.add_argument("--qp", type=int, default=28)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--splits", default="0.8,0.1,0.1", help="train,val,test fractions")
    d.add_argument("--kfold", type=int, default=None)
    d.set_defaults(func=cmd_degrade)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=["1", "2", "finetune"])
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--out", required=True)
    t.add_argument("--stage1-ckpt")
    t.add_argument("--ckpt", help="stage-2 checkpoint to fine-tune")
    t.add_argument("--no-dfm", action="store_true")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--ckpt-every", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--n-dmm", type=int)
    t.add_argument("--n-recon", type=int)
    t.add_argument("--channels", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("restore", help="restore a degraded clip")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--dump-dfm", action="store_true")
    r.add_argument("--mp4", action="store_true", help="also write an H.264 preview")
    r.add_argument("--preview-qp", type=int, default=18)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="metrics and analysis experiments")
    e.add_argument("--task", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--stage1-ckpt")
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--patch", type=int, default=16)
    e.add_argument("--qps")
    e.add_argument("--n-values")
    e.add_argument("--seeds")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--iterations", type=int)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"dfmrestore {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MediaError, ValueError, RuntimeError, OSError) as exc:
        print(f"dfmrestore {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
