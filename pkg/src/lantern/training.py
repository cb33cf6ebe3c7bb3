"""Optimization loop over the network parameters, plus checkpoint persistence.

Training is plain stochastic first-order descent at batch size 1 by default
(learning rate 0.01, 400 epochs), with Adam as the faster option for
desk-scale runs.  Given the same dataset, initialization, and seed the loop
is bit-exactly reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .backprop import backward, loss_and_grad_x
from .data_model import Dataset, HeaderError, NonFiniteError, PayloadError
from .network import LanternParams, StageParams, SubstageParams, forward
from .transforms import FilterBank, PiecewiseLinear

__all__ = [
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_manifest",
    "write_loss_history",
]

CHECKPOINT_VERSION = 1
OPTIMIZERS = ("gd", "adam")


class TrainingDiverged(RuntimeError):
    """Raised when the loss turns non-finite; carries the offending step."""

    def __init__(self, epoch: int, sample: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, sample {sample}")
        self.epoch = epoch
        self.sample = sample


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 400
    batch_size: int = 1
    optimizer: str = "gd"
    seed: int = 0
    validation_fraction: float = 0.1
    grad_clip: float | None = None  # global-norm divergence guard, off by default
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must be in [0, 1), got {self.validation_fraction}"
            )


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    wall_time_s: float = 0.0


def _mean_loss(flat, template, samples) -> float:
    params = template.unpack(flat)
    losses = []
    for y, mask, gt in samples:
        x_rec, _ = forward(y, mask, params)
        losses.append(loss_and_grad_x(x_rec, gt)[0])
    return float(np.mean(losses))


def train(dataset: Dataset, init: LanternParams, cfg: TrainConfig):
    """Run the training loop; returns (final parameters, per-epoch report).

    Each step: forward, loss gradient, hand-derived backward, optimizer
    update.  Samples are shuffled per epoch with the seeded generator; the
    validation split is carved off once up front.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    n_val = int(round(cfg.validation_fraction * n))
    perm = rng.permutation(n)
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("validation split leaves no training samples")
    val_samples = [dataset[i] for i in val_idx]

    flat = init.pack()
    adam_m = np.zeros_like(flat)
    adam_v = np.zeros_like(flat)
    adam_t = 0
    report = TrainReport()

    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            params = init.unpack(flat)
            grad_sum = None
            for idx in batch:
                y, mask, gt = dataset[int(idx)]
                try:
                    x_rec, tape = forward(y, mask, params)
                except NonFiniteError:
                    raise TrainingDiverged(epoch, int(idx), float("nan")) from None
                loss, d_x = loss_and_grad_x(x_rec, gt)
                if not np.isfinite(loss):
                    raise TrainingDiverged(epoch, int(idx), loss)
                grads, _ = backward(tape, y, mask, params, d_x)
                g = grads.pack()
                grad_sum = g if grad_sum is None else grad_sum + g
                epoch_losses.append(loss)
            g = grad_sum / len(batch)
            if cfg.grad_clip is not None:
                norm = float(np.linalg.norm(g))
                if norm > cfg.grad_clip:
                    g = g * (cfg.grad_clip / norm)
            if cfg.optimizer == "gd":
                flat = flat - cfg.learning_rate * g
            else:
                adam_t += 1
                adam_m = cfg.adam_beta1 * adam_m + (1 - cfg.adam_beta1) * g
                adam_v = cfg.adam_beta2 * adam_v + (1 - cfg.adam_beta2) * g * g
                m_hat = adam_m / (1 - cfg.adam_beta1**adam_t)
                v_hat = adam_v / (1 - cfg.adam_beta2**adam_t)
                flat = flat - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        report.train_loss.append(float(np.mean(epoch_losses)))
        report.val_loss.append(
            _mean_loss(flat, init, val_samples) if val_samples else float("nan")
        )
    report.wall_time_s = time.perf_counter() - t0
    return init.unpack(flat), report


# --- checkpoint container (.lckpt): JSON manifest line + raw float64 payload ---


def save_checkpoint(
    path,
    params: LanternParams,
    cfg: TrainConfig,
    report: TrainReport,
    dims: tuple | None = None,
) -> None:
    """Persist parameters, config and loss history; round-trips bit-exactly.

    ``dims`` records the (nx, ny, nt) the model was trained for so consumers
    can validate inputs against the manifest.
    """
    tensors = []
    chunks = []
    offset = 0
    named = list(params.named_tensors())
    # PLF knot positions are structural (not learned) but required to rebuild
    for n, st in enumerate(params.stages):
        for k, sub in enumerate(st.substages):
            named.append((f"stage{n:02d}.sub{k:02d}.plf.p", sub.plf.positions))
    for name, arr in named:
        arr = np.asarray(arr, dtype=np.float64)
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.astype("<f8").tobytes())
        offset += arr.size
    manifest = {
        "format": "lckpt",
        "version": CHECKPOINT_VERSION,
        "dims": list(dims) if dims is not None else None,
        "n_stages": params.n_stages,
        "n_substages": params.n_substages,
        "config": asdict(cfg),
        "train_loss": report.train_loss,
        "val_loss": report.val_loss,
        "wall_time_s": report.wall_time_s,
        "tensors": tensors,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        f.write(b"".join(chunks))


def read_checkpoint_manifest(path) -> dict:
    """Parse and validate just the JSON manifest line of a checkpoint."""
    with open(path, "rb") as f:
        blob = f.read()
    newline = blob.find(b"\n")
    if newline < 0:
        raise HeaderError(f"{path}: no manifest line found")
    try:
        manifest = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: malformed manifest: {exc}") from exc
    if manifest.get("format") != "lckpt":
        raise HeaderError(f"{path}: not a checkpoint file")
    return manifest


def load_checkpoint(path):
    """Rebuild (params, cfg, report) from a ``.lckpt`` file."""
    with open(path, "rb") as f:
        blob = f.read()
    newline = blob.find(b"\n")
    manifest = read_checkpoint_manifest(path)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise HeaderError(
            f"{path}: checkpoint version {manifest.get('version')} "
            f"unsupported (expected {CHECKPOINT_VERSION})"
        )
    payload = blob[newline + 1 :]
    values = {}
    for spec in manifest["tensors"]:
        size = int(np.prod(spec["shape"])) if spec["shape"] else 1
        start = spec["offset"] * 8
        end = start + size * 8
        if end > len(payload):
            raise PayloadError(f"{path}: payload truncated at tensor {spec['name']}")
        values[spec["name"]] = np.frombuffer(payload[start:end], dtype="<f8").reshape(
            spec["shape"]
        )

    stages = []
    for n in range(int(manifest["n_stages"])):
        subs = []
        for k in range(int(manifest["n_substages"])):
            pre = f"stage{n:02d}.sub{k:02d}"
            k1, k2 = [], []
            for i in range(1000):
                key = f"{pre}.conv1.k{i:02d}"
                if key not in values:
                    break
                k1.append(values[key])
            for i in range(1000):
                key = f"{pre}.conv2.k{i:02d}"
                if key not in values:
                    break
                k2.append(values[key])
            try:
                subs.append(
                    SubstageParams(
                        mu1=float(values[f"{pre}.mu1"][0]),
                        mu2=float(values[f"{pre}.mu2"][0]),
                        conv1=FilterBank(tuple(k1), values[f"{pre}.conv1.bias"]),
                        conv2=FilterBank(tuple(k2), values[f"{pre}.conv2.bias"]),
                        plf=PiecewiseLinear(values[f"{pre}.plf.p"], values[f"{pre}.plf.q"]),
                    )
                )
            except KeyError as exc:
                raise PayloadError(f"{path}: missing tensor {exc}") from exc
        try:
            stages.append(
                StageParams(
                    log_rho=float(values[f"stage{n:02d}.log_rho"][0]),
                    eta=float(values[f"stage{n:02d}.eta"][0]),
                    substages=subs,
                )
            )
        except KeyError as exc:
            raise PayloadError(f"{path}: missing tensor {exc}") from exc
    params = LanternParams(stages)
    cfg = TrainConfig(**manifest["config"])
    report = TrainReport(
        train_loss=list(manifest["train_loss"]),
        val_loss=list(manifest["val_loss"]),
        wall_time_s=float(manifest["wall_time_s"]),
    )
    return params, cfg, report


def write_loss_history(path, report: TrainReport) -> None:
    """CSV export: epoch, train_loss, val_loss."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,train_loss,val_loss\n")
        for i, (tr, va) in enumerate(zip(report.train_loss, report.val_loss)):
            f.write(f"{i},{tr!r},{va!r}\n")
