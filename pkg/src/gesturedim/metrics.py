"""Gesture metrics: Frechet gesture distance, beat consistency and diversity.

FGD and diversity operate on latent features of a pose autoencoder trained
separately for each gesture space (2D or 3D); values are only comparable
within one encoder, identified by its checksum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import (
    DimMismatch,
    EmptyAudioBeats,
    EmptyDataset,
    EmptyKinematicBeats,
    NonFiniteInput,
    TooFewSamples,
    TooShort,
)
from .nn_core import Activation, Adam, Dense, Sequential, checksum, mse_loss
from .nn_core.checkpoint import load_checkpoint, save_checkpoint
from .seeding import rng_for
from .skeleton import PoseSequence


class BCParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma: float = Field(0.1, gt=0)
    threshold: float = Field(0.05, gt=0)


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    latent_dim: int = Field(32, ge=1)
    hidden: int = Field(32, ge=1)
    steps: int = Field(1500, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)


@dataclass(frozen=True)
class BeatSet:
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if np.any(np.diff(times) <= 0):
            raise ValueError("beat times must be strictly increasing")
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class GestureStats:
    mu: np.ndarray
    sigma: np.ndarray
    sample_count: int

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[0]


class PoseEncoder:
    """Dense autoencoder over flattened pose sequences; ``encode`` uses only the encoder half."""

    def __init__(self, input_shape: tuple[int, int, int], config: EncoderConfig | None = None, seed: int = 0):
        self.config = config or EncoderConfig()
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        c = self.config
        rng = np.random.default_rng(self.seed)
        size = int(np.prod(self.input_shape))
        self.encoder = Sequential(
            [("fc1", Dense(size, c.hidden, rng)), ("act", Activation("gelu")), ("fc2", Dense(c.hidden, c.latent_dim, rng))]
        )
        self.decoder = Sequential(
            [("fc1", Dense(c.latent_dim, c.hidden, rng)), ("act", Activation("gelu")), ("fc2", Dense(c.hidden, size, rng))]
        )
        self.input_mean = np.zeros(size, dtype=np.float32)
        self.log: dict = {}

    @property
    def dims(self) -> int:
        return self.input_shape[2]

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _flat(self, poses) -> np.ndarray:
        arr = _as_array(poses)
        if arr.shape[1:] != self.input_shape:
            raise DimMismatch(f"encoder expects sequences of shape {self.input_shape}, got {arr.shape[1:]}")
        return arr.reshape(len(arr), -1).astype(np.float32) - self.input_mean

    def encode(self, poses) -> np.ndarray:
        """Latent features, float64, shape (count, latent_dim)."""
        return self.encoder.forward(self._flat(poses)).astype(np.float64)

    def reconstruction_error(self, poses) -> float:
        x = self._flat(poses)
        return mse_loss(self.decoder.forward(self.encoder.forward(x)), x)[0]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.named_parameters()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.named_parameters()})
        out["input_mean"] = self.input_mean
        return out

    def checksum(self) -> str:
        return checksum(self.tensors())

    def save(self, path) -> str:
        path = Path(path)
        sha = save_checkpoint(path, self.tensors())
        meta = {"input_shape": list(self.input_shape), "seed": self.seed, "config": self.config.model_dump(), "log": self.log}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return sha

    @classmethod
    def load(cls, path) -> "PoseEncoder":
        path = Path(path)
        tensors, _ = load_checkpoint(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        enc = cls(tuple(meta["input_shape"]), EncoderConfig.model_validate(meta["config"]), meta["seed"])
        enc.encoder.load_parameters({k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")})
        enc.decoder.load_parameters({k[8:]: v for k, v in tensors.items() if k.startswith("decoder.")})
        enc.input_mean[...] = tensors["input_mean"]
        enc.log = meta.get("log", {})
        return enc


def _as_array(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return poses
    if hasattr(poses, "poses"):
        return poses.poses
    seqs = list(poses)
    if not seqs:
        return np.zeros((0, 0, 0, 0))
    return np.stack([s.data if isinstance(s, PoseSequence) else np.asarray(s) for s in seqs])


def train_encoder(dataset, latent_dim: int | None = None, seed: int = 0, config: EncoderConfig | None = None) -> PoseEncoder:
    """Fit the autoencoder by reconstruction MSE; deterministic given ``seed``."""
    config = config or EncoderConfig()
    if latent_dim is not None:
        config = config.model_copy(update={"latent_dim": latent_dim})
    poses = _as_array(dataset)
    if len(poses) == 0:
        raise EmptyDataset("cannot train an encoder on an empty dataset")
    enc = PoseEncoder(poses.shape[1:], config, seed)
    flat = poses.reshape(len(poses), -1).astype(np.float32)
    enc.input_mean[...] = flat.mean(axis=0, dtype=np.float64)

    rng = rng_for(seed, "encoder-train")
    order = rng.permutation(len(poses))
    n_hold = len(poses) // 10 if len(poses) >= 10 else 0
    held = poses[order[:n_hold]] if n_hold else poses
    train = poses[order[n_hold:]]
    initial = enc.reconstruction_error(held)

    model = Sequential([("encoder", enc.encoder), ("decoder", enc.decoder)])
    opt = Adam(model, lr=config.lr)
    x_all = enc._flat(train)
    for _ in range(config.steps):
        idx = rng.integers(0, len(x_all), size=min(config.batch_size, len(x_all)))
        x = x_all[idx]
        loss, dl = mse_loss(model.forward(x), x)
        if not math.isfinite(loss):
            raise FloatingPointError("encoder training diverged")
        model.backward(dl)
        opt.step()
    enc.log = {"initial_holdout_mse": initial, "final_holdout_mse": enc.reconstruction_error(held), "holdout_count": int(len(held))}
    return enc


def gesture_stats(encoder: PoseEncoder, sequences) -> GestureStats:
    return stats_from_latents(encoder.encode(sequences))


def stats_from_latents(latents: np.ndarray) -> GestureStats:
    latents = np.asarray(latents, dtype=np.float64)
    n = len(latents)
    if n < 2:
        raise TooFewSamples("at least two samples are needed for a covariance")
    mu = latents.mean(axis=0)
    centred = latents - mu
    sigma = centred.T @ centred / (n - 1)
    return GestureStats(mu, 0.5 * (sigma + sigma.T), n)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fgd(a: GestureStats, b: GestureStats, variant: Literal["standard", "paper-literal"] = "standard") -> float:
    """Frechet distance between two Gaussian fits (lower means more similar).

    ``paper-literal`` evaluates ||mu_a - mu_b|| + Tr(S_a + S_b - 2 (S_a S_b)^2)
    exactly as printed, for comparison only.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimMismatch("statistics have different latent dimensions")
    for arr in (a.mu, b.mu, a.sigma, b.sigma):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput("non-finite statistics")
    diff = a.mu - b.mu
    if variant == "paper-literal":
        prod = a.sigma @ b.sigma
        return float(np.linalg.norm(diff) + np.trace(a.sigma + b.sigma - 2 * prod @ prod))
    if variant != "standard":
        raise ValueError(f"unknown fgd variant {variant!r}")
    # Tr (S_a^1/2 S_b S_a^1/2)^1/2 equals the nuclear norm of S_a^1/2 S_b^1/2; the
    # singular values avoid a second square root of near-zero eigenvalues
    cross = np.linalg.svd(_sqrt_psd(a.sigma) @ _sqrt_psd(b.sigma), compute_uv=False).sum()
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * cross)
    return max(value, 0.0)


def angle_velocity(seq: PoseSequence | np.ndarray) -> np.ndarray:
    """Mean over bones of the angle (radians) between consecutive frames; length frames - 1."""
    data = seq.data if isinstance(seq, PoseSequence) else np.asarray(seq)
    data = data.astype(np.float64)
    norms = np.linalg.norm(data, axis=-1, keepdims=True)
    unit = np.where(norms > 1e-12, data / np.maximum(norms, 1e-12), 0.0)
    dots = np.sum(unit[1:] * unit[:-1], axis=-1)
    degenerate = (norms[1:, :, 0] <= 1e-12) | (norms[:-1, :, 0] <= 1e-12)
    angles = np.where(degenerate, 0.0, np.arccos(np.clip(dots, -1.0, 1.0)))
    return angles.mean(axis=1)


def extract_kinematic_beats(seq: PoseSequence, params: BCParams | None = None) -> BeatSet:
    """Frames whose angle velocity is a strict local maximum above the threshold.

    Velocity at frame f measures motion from f-1 to f; the frame before the
    sequence counts as motionless and the last frame has no right neighbour,
    so candidates are frames 1 .. frames-2.
    """
    params = params or BCParams()
    if seq.frames < 2:
        raise TooShort("need at least two frames for angle velocity")
    vel = np.concatenate([[0.0], angle_velocity(seq)])
    frames = [
        f
        for f in range(1, seq.frames - 1)
        if vel[f] > params.threshold and vel[f] > vel[f - 1] and vel[f] > vel[f + 1]
    ]
    return BeatSet(np.asarray(frames, dtype=np.float64) / seq.fps)


def beat_consistency(audio: BeatSet | Sequence[float], kinematic: BeatSet | Sequence[float], sigma: float = 0.1) -> float:
    """Mean over audio beats of exp(-d^2 / 2 sigma^2), d = distance to the nearest kinematic beat."""
    a = audio.times if isinstance(audio, BeatSet) else np.asarray(audio, dtype=np.float64)
    k = kinematic.times if isinstance(kinematic, BeatSet) else np.asarray(kinematic, dtype=np.float64)
    if a.size == 0:
        raise EmptyAudioBeats("no audio beats")
    if k.size == 0:
        raise EmptyKinematicBeats("no kinematic beats")
    nearest = np.min(np.abs(a[:, None] - k[None, :]), axis=1)
    return float(np.mean(np.exp(-(nearest**2) / (2.0 * sigma**2))))


def diversity_from_latents(latents: np.ndarray, n: int, seed: int, repeats: int = 1) -> float:
    """||mean(A) - mean(B)|| for disjoint seeded subsets A, B of size ``n``.

    With ``repeats`` > 1 the value is averaged over independent draws.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if n < 1 or len(latents) < 2 * n:
        raise TooFewSamples(f"diversity needs at least {2 * n} samples, got {len(latents)}")
    rng = rng_for(seed, "diversity")
    values = []
    for _ in range(repeats):
        perm = rng.permutation(len(latents))
        mu_a = latents[perm[:n]].mean(axis=0)
        mu_b = latents[perm[n : 2 * n]].mean(axis=0)
        values.append(float(np.linalg.norm(mu_a - mu_b)))
    return float(np.mean(values))


def diversity(encoder: PoseEncoder, sequences, n: int = 64, seed: int = 0, repeats: int = 1) -> float:
    return diversity_from_latents(encoder.encode(sequences), n, seed, repeats)


def mean_beat_consistency(
    sequences: Iterable[PoseSequence], audio_beats: Iterable[Sequence[float]], params: BCParams | None = None
) -> tuple[float, int]:
    """Average BC over paired sequences.

    Sequences without any kinematic beat score 0 in the average; their count
    is returned alongside so degenerate generations stay visible.
    """
    params = params or BCParams()
    scores, empty = [], 0
    for seq, beats in zip(sequences, audio_beats):
        kin = extract_kinematic_beats(seq, params)
        if len(kin) == 0:
            empty += 1
            scores.append(0.0)
            continue
        scores.append(beat_consistency(np.asarray(beats), kin, params.sigma))
    if not scores:
        raise EmptyDataset("no sequences to score")
    return float(np.mean(scores)), empty
