"""Deterministic 2D -> 3D lifting with a dilated temporal convolution network.

Inputs are temporally upsampled before the network so the stacked receptive
field fits inside the window, then averaged back down to the original frame
rate. Convolutions use edge padding so every output frame sees a full window.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import DimensionMismatch, NonFiniteLoss, ShapeMismatch
from .nn_core import (
    Activation,
    Adam,
    Conv1d,
    Dense,
    Layer,
    ModelParams,
    Residual,
    Sequential,
    checksum,
    load_checkpoint,
    mse_loss,
    receptive_field,
    save_checkpoint,
)
from .seeding import rng_for
from .skeleton import DEPTH_AXIS, PoseSequence, renormalize
from .synth_data import GestureDataset


class LifterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    conv_stack: list[tuple[int, int]] = [(3, 1), (3, 3), (3, 9)]
    channels: int = Field(32, ge=1)
    upsample_factor: int = Field(8, ge=1)
    upsample_mode: Literal["repeat", "linear"] = "repeat"
    lr: float = Field(2e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    steps: int = Field(2000, ge=0)
    seed: int = 0

    @field_validator("conv_stack")
    @classmethod
    def _stack(cls, v):
        if not v:
            raise ValueError("conv_stack must be non-empty")
        for k, d in v:
            if k < 1 or d < 1:
                raise ValueError("kernel sizes and dilations must be >= 1")
        return v

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.conv_stack)

    def check_window(self, seq_len: int) -> bool:
        ok = self.receptive_field <= self.upsample_factor * seq_len
        if not ok:
            warnings.warn(
                f"receptive field {self.receptive_field} exceeds upsampled window "
                f"{self.upsample_factor * seq_len}",
                stacklevel=2,
            )
        return ok


def build_network(bone_count: int, config: LifterConfig, dtype=np.float32) -> Sequential:
    rng = np.random.default_rng(rng_for(config.seed, "lifter-init").integers(0, 2**63))
    c = config.channels
    (k0, d0), *rest = config.conv_stack
    layers: list[tuple[str, Layer]] = [
        ("expand", Conv1d(bone_count * 2, c, k0, rng, dilation=d0, dtype=dtype)),
        ("expand_act", Activation("relu")),
    ]
    for i, (k, d) in enumerate(rest):
        block = Sequential(
            [
                ("conv", Conv1d(c, c, k, rng, dilation=d, dtype=dtype)),
                ("act1", Activation("relu")),
                ("mix", Dense(c, c, rng, dtype)),
                ("act2", Activation("relu")),
            ]
        )
        layers.append((f"block{i}", Residual(block)))
    layers.append(("out", Dense(c, bone_count * 3, rng, dtype)))
    return Sequential(layers)


def upsample(x: np.ndarray, factor: int, mode: str = "repeat") -> np.ndarray:
    """(batch, frames, ch) -> (batch, frames * factor, ch)."""
    if factor == 1:
        return x
    if mode == "repeat":
        return np.repeat(x, factor, axis=1)
    n = x.shape[1]
    pos = np.clip((np.arange(n * factor) + 0.5) / factor - 0.5, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo)[None, :, None].astype(x.dtype)
    return x[:, lo] * (1 - w) + x[:, hi] * w


def downsample(y: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return y
    b, n, c = y.shape
    return y.reshape(b, n // factor, factor, c).mean(axis=2)


def _downsample_grad(dy: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(dy / factor, factor, axis=1) if factor > 1 else dy


@dataclass
class TrainedLifter:
    config: LifterConfig
    net: Sequential
    bone_count: int
    seq_len: int
    log: dict = field(default_factory=dict)

    @property
    def validation_mpjpe(self) -> float:
        return self.log["val_mpjpe"]

    @property
    def params(self) -> ModelParams:
        return ModelParams.of(self.net, seed=self.config.seed)

    def tensors(self) -> dict[str, np.ndarray]:
        return dict(self.net.named_parameters())

    def checksum(self) -> str:
        return checksum(self.tensors())

    def raw_forward(self, x2d: np.ndarray) -> np.ndarray:
        """Network output before renormalization, (batch, frames, bones, 3)."""
        b, n = x2d.shape[:2]
        x = upsample(x2d.reshape(b, n, -1).astype(np.float32), self.config.upsample_factor, self.config.upsample_mode)
        y = downsample(self.net.forward(x), self.config.upsample_factor)
        self._clear()
        return y.reshape(b, n, self.bone_count, 3)

    def _clear(self):
        def walk(layer):
            layer._cache = None
            for child in layer.children.values():
                walk(child)

        walk(self.net)

    def save(self, path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        sha = save_checkpoint(path, self.tensors())
        meta = {"config": self.config.model_dump(), "bone_count": self.bone_count, "seq_len": self.seq_len, "log": self.log}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return sha

    @classmethod
    def load(cls, path) -> "TrainedLifter":
        path = Path(path)
        tensors, _ = load_checkpoint(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        config = LifterConfig.model_validate(meta["config"])
        net = build_network(meta["bone_count"], config)
        net.load_parameters(tensors)
        return cls(config, net, meta["bone_count"], meta["seq_len"], meta.get("log", {}))


def mpjpe(pred: PoseSequence | np.ndarray, gt: PoseSequence | np.ndarray) -> float:
    """Mean Euclidean distance between corresponding bone vectors."""
    a = np.asarray(pred.data if isinstance(pred, PoseSequence) else pred, dtype=np.float64)
    b = np.asarray(gt.data if isinstance(gt, PoseSequence) else gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mpjpe needs equal shapes, got {a.shape} and {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def _batch_mpjpe(lifter: TrainedLifter, x2d: np.ndarray, y3d: np.ndarray) -> float:
    if len(x2d) == 0:
        return float("nan")
    return mpjpe(renormalize(lifter.raw_forward(x2d).astype(np.float64)), y3d)


def train_lifter(dataset3d: GestureDataset, config: LifterConfig | None = None) -> TrainedLifter:
    """Fit 2D -> 3D on pairs (project_2d(seq), seq) by squared vector error."""
    config = config or LifterConfig()
    if dataset3d.dims != 3:
        raise DimensionMismatch("the lifter trains on 3D sequences")
    config.check_window(dataset3d.seq_len)
    y_all = dataset3d.poses.astype(np.float32)
    x_all = y_all[..., :DEPTH_AXIS]
    n = len(y_all)
    rng = rng_for(config.seed, "lifter-train")
    order = rng.permutation(n)
    n_val = n // 10 if n >= 10 else 0
    val_idx, train_idx = (order[:n_val], order[n_val:]) if n_val else (order, order)

    net = build_network(dataset3d.bone_count, config)
    lifter = TrainedLifter(config, net, dataset3d.bone_count, dataset3d.seq_len)
    initial = _batch_mpjpe(lifter, x_all[val_idx], y_all[val_idx])
    opt = Adam(net, lr=config.lr)
    f = config.upsample_factor
    curve = []
    for step in range(config.steps):
        idx = train_idx[rng.integers(0, len(train_idx), size=config.batch_size)]
        b = len(idx)
        x = upsample(x_all[idx].reshape(b, dataset3d.seq_len, -1), f, config.upsample_mode)
        pred = downsample(net.forward(x), f)
        loss, grad = mse_loss(pred, y_all[idx].reshape(pred.shape))
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"non-finite lifter loss at step {step}")
        net.zero_grad()
        net.backward(_downsample_grad(grad.astype(np.float32), f))
        opt.step()
        if step % 100 == 0 or step == config.steps - 1:
            curve.append([step, loss])
    lifter.log = {
        "initial_val_mpjpe": initial,
        "val_mpjpe": _batch_mpjpe(lifter, x_all[val_idx], y_all[val_idx]) if config.steps else initial,
        "loss_curve": curve,
        "receptive_field": config.receptive_field,
    }
    return lifter


def lift(lifter: TrainedLifter, seq2d: PoseSequence, renormalize_output: bool = True) -> PoseSequence:
    """Deterministic 3D estimate of a 2D sequence."""
    if seq2d.dims != 2:
        raise DimensionMismatch("lift expects a 2D sequence")
    if seq2d.bone_count != lifter.bone_count:
        raise ShapeMismatch(f"expected {lifter.bone_count} bones, got {seq2d.bone_count}")
    out = lifter.raw_forward(seq2d.data[None]).astype(np.float64)[0]
    return PoseSequence(renormalize(out) if renormalize_output else out, seq2d.fps)


def lift_batch(lifter: TrainedLifter, seqs: Sequence[PoseSequence], batch: int = 128) -> list[PoseSequence]:
    """Lift many sequences; each output is a function of its own input only."""
    out: list[PoseSequence] = []
    for s in seqs:
        if s.dims != 2:
            raise DimensionMismatch("lift expects 2D sequences")
    for start in range(0, len(seqs), batch):
        chunk = seqs[start : start + batch]
        data = renormalize(lifter.raw_forward(np.stack([s.data for s in chunk])).astype(np.float64))
        out.extend(PoseSequence(d, s.fps) for d, s in zip(data, chunk))
    return out
