"""Command-line entry point: gen-data, train, reconstruct, evaluate.

Every command writes exactly one JSON run manifest alongside its outputs
(command, effective config, seeds, content hashes of inputs, wall time).
Reruns with identical flags produce byte-identical outputs apart from the
manifest's wall-time field.  Flag values override config-file entries,
which override the built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as M
from .data_model import Dataset, DynamicImage, KSpaceData, load_volume, save_volume
from .network import INIT_MODES, PAPER_STAGES, PAPER_SUBSTAGES, default_params, forward
from .phantom import MaskSpec, PhantomConfig, build_dataset
from .sampling import load_mask, save_mask
from .training import (
    OPTIMIZERS,
    TrainConfig,
    load_checkpoint,
    read_checkpoint_manifest,
    save_checkpoint,
    train,
    write_loss_history,
)

__all__ = ["main"]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(path: Path, command: str, config: dict, inputs, outputs, t0: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_time_s": time.perf_counter() - t0,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config_file(path) -> dict:
    """Parse a simple key=value config file; '#' starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _effective(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, value in file_cfg.items():
            cfg[key] = type(defaults[key])(value) if defaults[key] is not None else value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _sample_stem(i: int) -> str:
    return f"sample_{i:03d}"


def _dataset_stems(data_dir: Path) -> list:
    stems = sorted(p.name[: -len(".gt.cvol")] for p in data_dir.glob("*.gt.cvol"))
    if not stems:
        raise FileNotFoundError(f"no *.gt.cvol samples found in {data_dir}")
    return stems


def _load_dataset_dir(data_dir: Path):
    samples = []
    for stem in _dataset_stems(data_dir):
        y = load_volume(data_dir / f"{stem}.kspace.cvol")
        mask = load_mask(data_dir / f"{stem}.mask.cmask")
        gt = load_volume(data_dir / f"{stem}.gt.cvol")
        samples.append((KSpaceData(y.data), mask, gt))
    return Dataset(samples)


def cmd_gen_data(args) -> int:
    defaults = {
        "n": 2,
        "nx": 64,
        "ny": 64,
        "nt": 8,
        "mask": "1drandom",
        "accel": 4.0,
        "center_lines": 4,
        "noise": 0.0,
        "seed": 0,
    }
    cfg = _effective(defaults, args)
    if cfg["accel"] < 1:
        raise ValueError(f"--accel must be >= 1, got {cfg['accel']}")
    t0 = time.perf_counter()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(
        cfg["n"],
        PhantomConfig(nx=cfg["nx"], ny=cfg["ny"], nt=cfg["nt"]),
        MaskSpec(kind=cfg["mask"], accel=cfg["accel"], center_lines=cfg["center_lines"]),
        noise_sigma=cfg["noise"],
        seed=cfg["seed"],
    )
    outputs = []
    for i, (y, mask, gt) in enumerate(dataset):
        stem = _sample_stem(i)
        save_volume(out_dir / f"{stem}.kspace.cvol", DynamicImage(y.data))
        save_mask(out_dir / f"{stem}.mask.cmask", mask)
        save_volume(out_dir / f"{stem}.gt.cvol", gt)
        outputs += [
            out_dir / f"{stem}.kspace.cvol",
            out_dir / f"{stem}.mask.cmask",
            out_dir / f"{stem}.gt.cvol",
        ]
    for p in outputs:  # validate before declaring success
        if not p.exists():
            raise RuntimeError(f"output {p} was not written")
    _write_manifest(out_dir / "manifest.json", "gen-data", cfg, [], outputs, t0)
    return 0


def cmd_train(args) -> int:
    defaults = {
        "init": "dct_tv",
        "stages": PAPER_STAGES,
        "substages": PAPER_SUBSTAGES,
        "epochs": 400,
        "lr": 0.01,
        "optimizer": "gd",
        "batch_size": 1,
        "val_fraction": 0.1,
        "seed": 0,
    }
    cfg = _effective(defaults, args)
    t0 = time.perf_counter()
    data_dir = Path(args.data)
    dataset = _load_dataset_dir(data_dir)
    nx, ny, nt = dataset[0][2].shape
    init = default_params(
        nx,
        ny,
        nt,
        init_mode=cfg["init"],
        seed=cfg["seed"],
        n_stages=cfg["stages"],
        n_substages=cfg["substages"],
    )
    tc = TrainConfig(
        learning_rate=cfg["lr"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        optimizer=cfg["optimizer"],
        seed=cfg["seed"],
        validation_fraction=cfg["val_fraction"],
    )
    params, report = train(dataset, init, tc)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.lckpt"
    losses = out_dir / "loss_history.csv"
    save_checkpoint(ckpt, params, tc, report, dims=(nx, ny, nt))
    write_loss_history(losses, report)
    load_checkpoint(ckpt)  # validate the written artifact
    inputs = sorted(data_dir.glob("sample_*"))
    _write_manifest(out_dir / "manifest.json", "train", cfg, inputs, [ckpt, losses], t0)
    return 0


def _export_frames(volume: DynamicImage, frames_dir: Path) -> list:
    """8-bit binary PGM per frame, magnitudes scaled to the volume max."""
    frames_dir.mkdir(parents=True, exist_ok=True)
    mag = np.abs(volume.data)
    peak = mag.max()
    scale = 255.0 / peak if peak > 0 else 0.0
    written = []
    for t in range(volume.nt):
        frame = np.round(mag[:, :, t] * scale).astype(np.uint8)
        path = frames_dir / f"frame_{t:03d}.pgm"
        with open(path, "wb") as f:
            f.write(f"P5\n{frame.shape[1]} {frame.shape[0]}\n255\n".encode("ascii"))
            f.write(frame.tobytes())
        written.append(path)
    return written


def cmd_reconstruct(args) -> int:
    t0 = time.perf_counter()
    params, _, _ = load_checkpoint(args.checkpoint)
    manifest = read_checkpoint_manifest(args.checkpoint)
    y = load_volume(args.kspace)
    mask = load_mask(args.mask)
    if y.shape != mask.shape:
        raise ValueError(f"k-space shape {y.shape} does not match mask shape {mask.shape}")
    dims = manifest.get("dims")
    if dims is not None and tuple(dims) != y.shape:
        raise ValueError(
            f"checkpoint was trained for dims {tuple(dims)}, data has {y.shape}"
        )
    x_rec, _ = forward(KSpaceData(y.data), mask, params)
    out_path = Path(args.out)
    save_volume(out_path, x_rec)
    outputs = [out_path]
    if args.export_frames:
        outputs += _export_frames(x_rec, Path(args.export_frames))
    load_volume(out_path)  # validate
    cfg = {"checkpoint": str(args.checkpoint), "kspace": str(args.kspace), "mask": str(args.mask)}
    _write_manifest(
        out_path.with_suffix(out_path.suffix + ".manifest.json"),
        "reconstruct",
        cfg,
        [args.checkpoint, args.kspace, args.mask],
        outputs,
        t0,
    )
    return 0


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    pred_files = {p.stem.split(".")[0]: p for p in sorted(pred_dir.glob("*.cvol"))}
    ref_files = {p.stem.split(".")[0]: p for p in sorted(ref_dir.glob("*.cvol"))}
    if not pred_files:
        raise FileNotFoundError(f"no .cvol files in {pred_dir}")
    if set(pred_files) != set(ref_files):
        only_pred = sorted(set(pred_files) - set(ref_files))
        only_ref = sorted(set(ref_files) - set(pred_files))
        raise ValueError(
            f"mismatched sample sets (pred-only: {only_pred}, ref-only: {only_ref})"
        )
    reports = []
    rows = []
    for stem in sorted(pred_files):
        rec = load_volume(pred_files[stem])
        gt = load_volume(ref_files[stem])
        rep = M.compute_report(rec, gt)
        reports.append(rep)
        rows.append((stem, rep))
    mean, std = M.aggregate_reports(reports)
    out_path = Path(args.out)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write("sample_id,nmse,psnr_db,ssim,hfen\n")
        for stem, rep in rows:
            f.write(f"{stem},{rep.nmse!r},{rep.psnr_db!r},{rep.ssim!r},{rep.hfen!r}\n")
        f.write(f"mean,{mean.nmse!r},{mean.psnr_db!r},{mean.ssim!r},{mean.hfen!r}\n")
        f.write(f"std,{std.nmse!r},{std.psnr_db!r},{std.ssim!r},{std.hfen!r}\n")
    inputs = sorted(pred_files.values()) + sorted(ref_files.values())
    metric_constants = {
        "ssim_win_size": 11,
        "ssim_sigma": 1.5,
        "ssim_k1": 0.01,
        "ssim_k2": 0.03,
        "hfen_log_size": 15,
        "hfen_log_sigma": 1.5,
        "psnr_cap_db": M.PSNR_CAP_DB,
    }
    _write_manifest(
        out_path.with_suffix(out_path.suffix + ".manifest.json"),
        "evaluate",
        {"pred": str(pred_dir), "ref": str(ref_dir), "metrics": metric_constants},
        inputs,
        [out_path],
        t0,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lantern",
        description="Unrolled-ADMM analysis-transform reconstruction for dynamic MRI",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic phantom datasets")
    p.add_argument("--n", type=int, help="number of samples")
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--nt", type=int)
    p.add_argument("--mask", choices=["1drandom", "radial", "full"])
    p.add_argument("--accel", type=float)
    p.add_argument("--center-lines", dest="center_lines", type=int)
    p.add_argument("--noise", type=float, help="k-space noise std per component")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a reconstruction model")
    p.add_argument("--data", required=True, help="directory produced by gen-data")
    p.add_argument("--init", choices=list(INIT_MODES))
    p.add_argument("--stages", type=int)
    p.add_argument("--substages", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=list(OPTIMIZERS))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one sample with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kspace", required=True, help="undersampled k-space .cvol")
    p.add_argument("--mask", required=True, help=".cmask file")
    p.add_argument("--out", required=True, help="output .cvol path")
    p.add_argument("--export-frames", help="directory for per-frame PGM magnitudes")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="batch metrics over matching volume directories")
    p.add_argument("--pred", required=True, help="directory of reconstructed .cvol files")
    p.add_argument("--ref", required=True, help="directory of reference .cvol files")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean one-line error, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
