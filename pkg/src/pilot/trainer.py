"""Optimization: Kaiming init, warmup schedule, AdamW, checkpoints and the training loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff.nn import Module
from .data import ChunkDataset
from .objective import LossConfig, pit_loss

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
CHECKPOINT_MAGIC = b"PILOTCKP"
CHECKPOINT_VERSION = 1


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    base_lr: float = 0.05
    epochs: int = 200
    warmup_steps: int = 1000
    weight_decay: float = 1e-2
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.warmup_steps < 1:
            raise ValueError("batch_size and warmup_steps must be >= 1")


def kaiming_init(model: Module, seed: int) -> None:
    """Draw every registered weight from N(0, 2 / fan_in); other parameters keep their defaults."""
    rng = np.random.default_rng(seed)
    for _, module in model.named_modules():
        params = vars(module)
        for name, fan_in in module.fan_in.items():
            p = params[name]
            p.data[...] = rng.normal(0.0, math.sqrt(2.0 / fan_in), p.shape)


def lr_schedule(step: int, base_lr: float, model_dim: int, warmup_steps: int) -> float:
    """``base_lr * d^-0.5 * min(step^-0.5, step * warmup^-1.5)``: linear warmup, inverse-sqrt decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    return base_lr * model_dim ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
               weight_decay: float) -> None:
    """One in-place AdamW update with bias correction and decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        p.data -= (lr * update + lr * weight_decay * p.data).astype(p.dtype, copy=False)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# -- checkpoints -----------------------------------------------------------------

@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a model."""

    model_config: dict
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    optimizer: AdamState = field(default_factory=AdamState)
    best_val_loss: float = float("inf")
    epoch: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.model_config, sort_keys=True).encode()).hexdigest()[:16]


def snapshot(model: Module, state: AdamState | None = None, **kwargs) -> Checkpoint:
    opt = AdamState()
    if state is not None:
        opt = AdamState(state.step, {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()})
    return Checkpoint(
        model_config=model.config.to_dict(),
        params={k: p.data.copy() for k, p in model.named_parameters()},
        buffers={k: b.copy() for k, b in model.named_buffers()},
        optimizer=opt,
        **kwargs,
    )


def restore(model: Module, ckpt: Checkpoint) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    if set(params) != set(ckpt.params) or set(buffers) != set(ckpt.buffers):
        raise ValueError("checkpoint does not match the model layout")
    for k, p in params.items():
        if p.shape != ckpt.params[k].shape:
            raise ValueError(f"checkpoint tensor {k} has shape {ckpt.params[k].shape}, model expects {p.shape}")
        p.data[...] = ckpt.params[k]
    for k, b in buffers.items():
        b[...] = ckpt.buffers[k]


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Binary container: magic, version, manifest length, JSON manifest, raw little-endian tensors."""
    tensors: list[tuple[str, np.ndarray]] = []
    tensors += [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"buffer/{k}", v) for k, v in ckpt.buffers.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in ckpt.optimizer.m.items()]
    tensors += [(f"adam_v/{k}", v) for k, v in ckpt.optimizer.v.items()]
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "model_config": ckpt.model_config,
        "fingerprint": ckpt.fingerprint,
        "adam_step": ckpt.optimizer.step,
        "best_val_loss": ckpt.best_val_loss,
        "epoch": ckpt.epoch,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, head_len = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(data[20:20 + head_len].decode("utf-8"))
    base = 20 + head_len
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    for e in manifest["tensors"]:
        kind, name = e["name"].split("/", 1)
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        groups[kind][name] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    ckpt = Checkpoint(manifest["model_config"], groups["param"], groups["buffer"],
                      AdamState(manifest["adam_step"], groups["adam_m"], groups["adam_v"]),
                      manifest["best_val_loss"], manifest["epoch"], manifest.get("extra", {}))
    if ckpt.fingerprint != manifest["fingerprint"]:
        raise ValueError(f"{path}: config fingerprint mismatch")
    return ckpt


# -- training loop -----------------------------------------------------------------

@dataclass
class FitResult:
    best: Checkpoint
    curves: list[tuple[int, float, float, float]]  # epoch, train loss, validation loss, last lr


def dataset_loss(model, data: ChunkDataset, loss_config: LossConfig, batch_size: int) -> float:
    """Mean per-chunk loss in evaluation mode."""
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(data), batch_size):
            x, act, doa = data.batch(slice(start, start + batch_size))
            total += float(pit_loss(model(x, training=False), act, doa, loss_config).data)
    return total / max(len(data), 1)


def write_curves(path: str | Path, curves) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for epoch, tr, va, lr in curves:
            writer.writerow([epoch, repr(tr), repr(va), repr(lr)])


def fit(model, train: ChunkDataset, validation: ChunkDataset, config: TrainConfig,
        loss_config: LossConfig = LossConfig(), curves_path: str | Path | None = None) -> FitResult:
    """Train with seeded shuffling and keep the parameters with the lowest validation loss.

    The caller initializes the model. The per-batch objective is the
    permutation-invariant loss averaged over chunks.
    """
    if len(train) == 0 or len(validation) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = dict(model.named_parameters())
    state = AdamState()
    model_dim = model.config.model_dim
    best = snapshot(model, state)
    curves = []
    lr = 0.0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        running = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            x, act, doa = train.batch(idx)
            lr = lr_schedule(state.step + 1, config.base_lr, model_dim, config.warmup_steps)
            model.zero_grad()
            loss = pit_loss(model(x, training=True), act, doa, loss_config) * (1.0 / len(idx))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalAbort(f"non-finite loss at epoch {epoch}, step {state.step + 1}", best)
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            try:
                clip_grad_norm(grads, config.grad_clip)
                adamw_step(params, grads, state, lr, config.weight_decay)
            except NumericalAbort as exc:
                exc.checkpoint = best
                raise
            running += value * len(idx)
        train_loss = running / len(train)
        val_loss = dataset_loss(model, validation, loss_config, config.batch_size)
        curves.append((epoch, train_loss, val_loss, lr))
        if val_loss < best.best_val_loss:
            best = snapshot(model, state, best_val_loss=val_loss, epoch=epoch)
        log.info("epoch %d: train %.4f  val %.4f  lr %.2e  (%.1fs)", epoch, train_loss, val_loss, lr,
                 time.perf_counter() - t0)
        if curves_path is not None:
            write_curves(curves_path, curves)
    return FitResult(best, curves)
