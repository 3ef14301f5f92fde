"""Speech-conditioned DDPM gesture generator with classifier-free guidance.

The denoiser predicts the injected noise. Speech features pass through a small
temporal convolution and are concatenated with the noisy pose frames and a
sinusoidal timestep embedding along the feature axis. During training each
batch element has its speech condition swapped for a learned null embedding
with probability ``p_uncond``; ``p_uncond = 1`` gives a purely unconditional
model whose samples ignore speech entirely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import (
    DimensionMismatch,
    FrameMismatch,
    NoiseAtFinalStep,
    NonFiniteLoss,
    ShapeMismatch,
    StepOutOfRange,
)
from .nn_core import (
    Adam,
    Layer,
    LayerSpec,
    ModelParams,
    Residual,
    Sequential,
    build_layer,
    checksum,
    load_checkpoint,
    mse_loss,
    save_checkpoint,
    sinusoidal_encoding,
)
from .seeding import rng_for
from .skeleton import PoseSequence, renormalize
from .synth_data import GestureDataset, SpeechTrack


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int = 100, kind: Literal["linear", "cosine"] = "linear") -> DiffusionSchedule:
    """Noise schedule with T steps.

    The linear endpoints 1e-4 and 0.02 are quoted for 1000 steps; they are
    scaled by 1000/T so the terminal alpha_bar stays near zero for short chains.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind == "linear":
        scale = 1000.0 / T
        beta = np.linspace(1e-4 * scale, min(0.02 * scale, 0.999), T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        beta = np.clip(1 - f[1:] / f[:-1], 1e-5, 0.999)
    else:
        raise ValueError(f"unknown schedule {kind!r}")
    return DiffusionSchedule(beta)


def _check_step(t: int, schedule: DiffusionSchedule) -> None:
    if not 0 <= int(t) < schedule.T:
        raise StepOutOfRange(f"step {t} outside [0, {schedule.T})")


def forward_sample(x0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; ``t`` may be per batch element."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeMismatch("noise must have the shape of x0")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise StepOutOfRange(f"step outside [0, {schedule.T})")
    ab = schedule.alpha_bar[t_arr]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


def guided_eps(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """(1 + w) eps_cond - w eps_uncond, evaluated as c + w (c - u) so both anchors are exact."""
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ShapeMismatch("conditional and unconditional predictions differ in shape")
    if w < 0:
        raise ValueError("guidance weight must be >= 0")
    return eps_cond + w * (eps_cond - eps_uncond)


def sample_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: DiffusionSchedule, z: np.ndarray) -> np.ndarray:
    """One ancestral step with fixed variance sigma_t^2 = beta_t."""
    _check_step(t, schedule)
    if np.shape(eps_hat) != np.shape(x_t) or np.shape(z) != np.shape(x_t):
        raise ShapeMismatch("eps_hat and z must match x_t")
    if t == 0 and np.any(z != 0):
        raise NoiseAtFinalStep("no noise may be added at t = 0")
    beta, alpha, ab = schedule.beta[t], schedule.alpha[t], schedule.alpha_bar[t]
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    return (mean + math.sqrt(beta) * z).astype(np.asarray(x_t).dtype)


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dims: Literal[2, 3] = 3
    p_uncond: float = Field(0.1, ge=0.0, le=1.0)
    guidance_weight: float = Field(0.5, ge=0.0)
    T: int = Field(100, ge=1)
    schedule: Literal["linear", "cosine"] = "linear"
    model_dim: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    blocks: int = Field(1, ge=0)
    cond_dim: int = Field(16, ge=1)
    time_dim: int = Field(16, ge=2)
    lr: float = Field(3e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    steps: int = Field(3000, ge=0)
    normalize: bool = True
    input_skip: bool = True
    post_normalize: Optional[bool] = None
    seed: int = 0

    def denoiser_specs(self, feat_dim: int, speech_dim: int) -> dict[str, list[LayerSpec]]:
        """Layer specs of the speech encoder and the denoising trunk."""
        d = self.model_dim
        speech = [
            LayerSpec("conv1d", {"in_channels": speech_dim, "out_channels": self.cond_dim, "kernel_size": 3}),
            LayerSpec("activation", {"fn": "gelu"}),
        ]
        trunk = [
            LayerSpec("dense", {"in_dim": feat_dim + self.cond_dim + self.time_dim, "out_dim": d}),
            LayerSpec("activation", {"fn": "gelu"}),
            LayerSpec("conv1d", {"in_channels": d, "out_channels": d, "kernel_size": 3}),
            LayerSpec("activation", {"fn": "gelu"}),
        ]
        trunk += [
            LayerSpec("attention_block", {"model_dim": d, "heads": self.heads, "add_position": i == 0})
            for i in range(self.blocks)
        ]
        trunk += [LayerSpec("layer_norm", {"dim": d}), LayerSpec("dense", {"in_dim": d, "out_dim": feat_dim})]
        # linear path from x_t to eps: at high noise eps is close to x_t itself
        skip = [LayerSpec("dense", {"in_dim": feat_dim, "out_dim": feat_dim})] if self.input_skip else []
        return {"speech": speech, "trunk": trunk, "skip": skip}


class Denoiser(Layer):
    """eps prediction network; ``mask[i]`` replaces element i's speech by the null embedding."""

    def __init__(self, feat_dim: int, speech_dim: int, config: GeneratorConfig, seed: int, dtype=np.float32):
        super().__init__()
        self.feat_dim, self.speech_dim, self.config = feat_dim, speech_dim, config
        rng = np.random.default_rng(seed)
        specs = config.denoiser_specs(feat_dim, speech_dim)
        self.speech_enc = self.add(
            "speech", Sequential([(f"{i}_{s.kind}", build_layer(s, rng, dtype)) for i, s in enumerate(specs["speech"])])
        )
        trunk_layers = [build_layer(s, rng, dtype) for s in specs["trunk"]]
        # the temporal conv after the input projection is residual
        trunk_layers[2] = Residual(Sequential([("conv", trunk_layers[2]), ("act", trunk_layers[3])]))
        del trunk_layers[3]
        self.trunk = self.add("trunk", Sequential([(f"{i}", layer) for i, layer in enumerate(trunk_layers)]))
        self.skip = None
        if specs["skip"]:
            # identity start: the trunk only has to learn the residual eps - x_t
            self.skip = self.add("skip", build_layer(specs["skip"][0], rng, dtype))
            self.skip.params["weight"][...] = np.eye(feat_dim, dtype=dtype)
        self.params["null_embedding"] = rng.uniform(-1, 1, size=config.cond_dim).astype(dtype)
        self.dtype = dtype

    def predict(self, x_t: np.ndarray, t: np.ndarray, speech: np.ndarray, mask: np.ndarray) -> np.ndarray:
        b, n, f = x_t.shape
        if f != self.feat_dim or speech.shape != (b, n, self.speech_dim):
            raise ShapeMismatch("denoiser inputs have unexpected shapes")
        mask = np.asarray(mask, dtype=bool).reshape(b)
        emb = self.speech_enc.forward(speech.astype(self.dtype))
        null = np.broadcast_to(self.params["null_embedding"], emb.shape)
        cond = np.where(mask[:, None, None], null, emb)
        t_feat = sinusoidal_encoding(np.broadcast_to(np.asarray(t).reshape(-1), (b,)), self.config.time_dim)
        t_feat = np.broadcast_to(t_feat[:, None, :], (b, n, self.config.time_dim)).astype(self.dtype)
        self._cache = mask
        out = self.trunk.forward(np.concatenate([x_t.astype(self.dtype), cond, t_feat], axis=-1))
        return out if self.skip is None else out + self.skip.forward(x_t.astype(self.dtype))

    def forward(self, x):
        return self.predict(*x)

    def backward(self, d_eps: np.ndarray) -> None:
        mask = self._take_cache()
        d_in = self.trunk.backward(d_eps)
        if self.skip is not None:
            self.skip.backward(d_eps)
        d_cond = d_in[..., self.feat_dim : self.feat_dim + self.config.cond_dim]
        self.grads["null_embedding"] = (
            d_cond[mask].reshape(-1, self.config.cond_dim).sum(axis=0, dtype=np.float64).astype(self.dtype)
        )
        self.speech_enc.backward(np.where(mask[:, None, None], 0, d_cond).astype(d_cond.dtype))


@dataclass
class TrainedGenerator:
    config: GeneratorConfig
    denoiser: Denoiser
    schedule: DiffusionSchedule
    seq_len: int
    bone_count: int
    data_mean: np.ndarray
    data_std: np.ndarray
    speech_mean: np.ndarray
    speech_std: np.ndarray
    log: dict = field(default_factory=dict)

    @property
    def dims(self) -> int:
        return self.config.dims

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.tensors(), seed=self.config.seed)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"denoiser.{k}": v for k, v in self.denoiser.named_parameters()}
        out.update(
            {
                "norm.data_mean": self.data_mean,
                "norm.data_std": self.data_std,
                "norm.speech_mean": self.speech_mean,
                "norm.speech_std": self.speech_std,
            }
        )
        return out

    def checksum(self) -> str:
        return checksum(self.tensors())

    def save(self, path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        sha = save_checkpoint(path, self.tensors())
        meta = {
            "config": self.config.model_dump(),
            "seq_len": self.seq_len,
            "bone_count": self.bone_count,
            "speech_dim": self.denoiser.speech_dim,
            "schedule": {"T": self.schedule.T, "beta": self.schedule.beta.tolist(), "alpha_bar": self.schedule.alpha_bar.tolist()},
            "log": self.log,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return sha

    @classmethod
    def load(cls, path) -> "TrainedGenerator":
        path = Path(path)
        tensors, _ = load_checkpoint(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        config = GeneratorConfig.model_validate(meta["config"])
        feat_dim = meta["bone_count"] * config.dims
        den = Denoiser(feat_dim, meta["speech_dim"], config, seed=config.seed)
        den.load_parameters({k[len("denoiser.") :]: v for k, v in tensors.items() if k.startswith("denoiser.")})
        return cls(
            config,
            den,
            DiffusionSchedule(np.asarray(meta["schedule"]["beta"])),
            meta["seq_len"],
            meta["bone_count"],
            tensors["norm.data_mean"],
            tensors["norm.data_std"],
            tensors["norm.speech_mean"],
            tensors["norm.speech_std"],
            meta.get("log", {}),
        )


def _denoising_loss(den: Denoiser, x0, speech, t, eps, mask, schedule) -> float:
    pred = den.predict(forward_sample(x0, t, eps, schedule), t, speech, mask)
    den._cache = None
    return mse_loss(pred, eps)[0]


def train(dataset: GestureDataset, config: GeneratorConfig) -> TrainedGenerator:
    """Fit the denoiser by noise-prediction MSE; deterministic given ``config.seed``."""
    if dataset.dims != config.dims:
        raise DimensionMismatch(f"dataset is {dataset.dims}D, generator is {config.dims}D")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    seed = config.seed
    n, seq_len, bones = len(dataset), dataset.seq_len, dataset.bone_count
    x_all = dataset.poses.reshape(n, seq_len, bones * config.dims).astype(np.float32)
    s_all = dataset.features.astype(np.float32)

    if config.normalize:
        data_mean = x_all.mean(axis=(0, 1), dtype=np.float64).astype(np.float32)
        data_std = np.maximum(x_all.std(axis=(0, 1), dtype=np.float64), 0.05).astype(np.float32)
    else:
        data_mean = np.zeros(x_all.shape[-1], np.float32)
        data_std = np.ones(x_all.shape[-1], np.float32)
    speech_mean = s_all.mean(axis=(0, 1), dtype=np.float64).astype(np.float32)
    speech_std = np.maximum(s_all.std(axis=(0, 1), dtype=np.float64), 1e-3).astype(np.float32)
    x_all = (x_all - data_mean) / data_std
    s_all = (s_all - speech_mean) / speech_std

    schedule = make_schedule(config.T, config.schedule)
    den = Denoiser(x_all.shape[-1], s_all.shape[-1], config, seed=seed)
    gen = TrainedGenerator(config, den, schedule, seq_len, bones, data_mean, data_std, speech_mean, speech_std)

    rng = rng_for(seed, "generator-train")
    order = rng.permutation(n)
    n_hold = n // 10 if n >= 10 else 0
    hold_idx = order[:n_hold] if n_hold else order
    train_idx = order[n_hold:]
    hold_rng = rng_for(seed, "generator-holdout")
    hold_t = hold_rng.integers(0, config.T, size=len(hold_idx))
    hold_eps = hold_rng.standard_normal(x_all[hold_idx].shape).astype(np.float32)
    hold_mask = np.zeros(len(hold_idx), bool) if config.p_uncond < 1 else np.ones(len(hold_idx), bool)
    holdout = (x_all[hold_idx], s_all[hold_idx], hold_t, hold_eps, hold_mask, schedule)
    initial = _denoising_loss(den, *holdout)

    opt = Adam(den, lr=config.lr)
    masked = total = 0
    curve = []
    for step in range(config.steps):
        idx = train_idx[rng.integers(0, len(train_idx), size=config.batch_size)]
        t = rng.integers(0, config.T, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size,) + x_all.shape[1:]).astype(np.float32)
        mask = rng.uniform(size=config.batch_size) < config.p_uncond
        masked += int(mask.sum())
        total += config.batch_size
        pred = den.predict(forward_sample(x_all[idx], t, eps, schedule), t, s_all[idx], mask)
        loss, d_pred = mse_loss(pred, eps)
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"non-finite denoising loss at step {step}")
        den.zero_grad()
        den.backward(d_pred.astype(np.float32))
        opt.step()
        if step % 100 == 0 or step == config.steps - 1:
            curve.append([step, loss])
    gen.log = {
        "initial_holdout_loss": initial,
        "final_holdout_loss": _denoising_loss(den, *holdout),
        "masked_fraction": masked / total if total else None,
        "loss_curve": curve,
        "train_count": int(len(train_idx)),
    }
    return gen


def _normalise_speech(gen: TrainedGenerator, feats: np.ndarray) -> np.ndarray:
    return ((feats.astype(np.float32) - gen.speech_mean) / gen.speech_std).astype(np.float32)


def sample(gen: TrainedGenerator, speech: np.ndarray, seed: int, guidance_weight: float | None = None) -> np.ndarray:
    """Ancestral sampling, one chain per row of ``speech`` (count, frames, speech_dim).

    Returns de-normalised pose data (count, frames, bones, dims).
    """
    speech = np.asarray(speech)
    count = speech.shape[0]
    if speech.ndim != 3 or speech.shape[1] != gen.seq_len:
        raise FrameMismatch(f"speech must have {gen.seq_len} frames")
    feat_dim = gen.bone_count * gen.dims
    if count == 0:
        return np.zeros((0, gen.seq_len, gen.bone_count, gen.dims))
    w = gen.config.guidance_weight if guidance_weight is None else guidance_weight
    rng = rng_for(seed, "sample")
    s = _normalise_speech(gen, speech)
    cond_mask = np.zeros(count, bool)
    null_mask = np.ones(count, bool)
    unconditional = gen.config.p_uncond >= 1.0
    x = rng.standard_normal((count, gen.seq_len, feat_dim)).astype(np.float32)
    for t in reversed(range(gen.schedule.T)):
        t_vec = np.full(count, t)
        if unconditional:
            eps = gen.denoiser.predict(x, t_vec, s, null_mask)
        else:
            eps = gen.denoiser.predict(x, t_vec, s, cond_mask)
            if w > 0:
                eps = guided_eps(eps, gen.denoiser.predict(x, t_vec, s, null_mask), w)
        gen.denoiser._cache = None
        z = rng.standard_normal(x.shape).astype(np.float32) if t > 0 else np.zeros_like(x)
        x = sample_step(x, t, eps, gen.schedule, z)
    out = (x * gen.data_std + gen.data_mean).astype(np.float64)
    out = out.reshape(count, gen.seq_len, gen.bone_count, gen.dims)
    post = gen.config.post_normalize if gen.config.post_normalize is not None else gen.dims == 3
    return renormalize(out) if post else out


def generate(gen: TrainedGenerator, speech: SpeechTrack, count: int, seed: int) -> list[PoseSequence]:
    """``count`` gesture sequences for one speech track."""
    if speech.frames != gen.seq_len:
        raise FrameMismatch(f"speech has {speech.frames} frames, generator expects {gen.seq_len}")
    feats = np.broadcast_to(speech.features, (count,) + speech.features.shape)
    return [PoseSequence(d, speech.fps) for d in sample(gen, feats, seed)]


def generate_for_tracks(gen: TrainedGenerator, tracks: Sequence[SpeechTrack], seed: int, batch: int = 256) -> list[PoseSequence]:
    """One sequence per speech track, sampled in batches with per-batch noise streams."""
    out: list[PoseSequence] = []
    for start in range(0, len(tracks), batch):
        chunk = tracks[start : start + batch]
        for trk in chunk:
            if trk.frames != gen.seq_len:
                raise FrameMismatch(f"speech has {trk.frames} frames, generator expects {gen.seq_len}")
        feats = np.stack([trk.features for trk in chunk])
        data = sample(gen, feats, rng_for(seed, "batch", start).integers(0, 2**63))
        out.extend(PoseSequence(d, trk.fps) for d, trk in zip(data, chunk))
    return out
