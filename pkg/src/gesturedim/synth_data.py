"""Seeded synthetic speech/gesture corpora with known beats and depth ambiguity.

Each bone direction is parameterised by an azimuth in the image plane and an
elevation towards the camera, ``(cos e cos a, cos e sin a, sin e)``. Elevations
stay positive, so depth is a deterministic function of the 2D projection
unless ``ambiguity_mode="mirror"`` flips the depth sign of whole sequences.

Speech beats inject a raised-cosine velocity pulse (0.5, 1, 0.5 over three
frames) into the azimuth of the arm bones and an energy bump into the speech
features at the same frame.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import FormatError, InvalidConfig, InvalidFraction
from .seeding import rng_for
from .skeleton import DEFAULT_FPS, DEFAULT_SEQ_LEN, PoseSequence, SkeletonTopology, mirror_depth, project_2d

MAGIC = b"GDB1"
FORMAT_VERSION = 1
FEATURE_DIM = 4

# azimuth (radians) of each default bone, in bone order (children 1..9)
_DEFAULT_REST_AZIMUTH = np.deg2rad([90, 90, 90, 0, -90, -60, 180, -90, -120])
_DEFAULT_ARM_BONES = (3, 4, 5, 6, 7, 8)


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_sequences: int = 1536
    seq_len: int = DEFAULT_SEQ_LEN
    fps: float = DEFAULT_FPS
    beat_rate_hz: float = 1.5
    beat_times: Optional[list[float]] = None
    pulse_amplitude: float = 0.3
    baseline_motion_amplitude: float = 0.1
    rest_elevation: float = 0.6
    ambiguity_mode: Literal["none", "mirror"] = "mirror"
    ambiguity_mix: float = Field(0.5, ge=0.0, le=1.0)
    noise_std: float = 0.005
    feature_noise_std: float = 0.02
    pulse_bones: Optional[list[int]] = None

    @model_validator(mode="after")
    def _check(self):
        for name in ("pulse_amplitude", "baseline_motion_amplitude", "noise_std", "feature_noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.num_sequences < 1:
            raise ValueError("num_sequences must be >= 1")
        if self.seq_len < 4 or self.fps <= 0 or self.beat_rate_hz <= 0:
            raise ValueError("seq_len >= 4, fps > 0 and beat_rate_hz > 0 required")
        return self


@dataclass(frozen=True)
class SpeechTrack:
    """Per-frame speech features (energy, d/dt energy, two band proxies) and beat times."""

    features: np.ndarray
    beat_times: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        feats = np.asarray(self.features)
        beats = np.asarray(self.beat_times, dtype=np.float64)
        if feats.ndim != 2 or not np.all(np.isfinite(feats)):
            raise ValueError("features must be a finite (frames, feature_dim) array")
        duration = feats.shape[0] / self.fps
        if beats.ndim != 1 or np.any(np.diff(beats) <= 0) or np.any((beats < 0) | (beats >= duration)):
            raise ValueError("beat_times must be strictly increasing within [0, frames/fps)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "beat_times", beats)

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class GestureDataset:
    pairs: list[tuple[PoseSequence, SpeechTrack]]
    seed: int
    generator_config: Optional[SynthConfig] = None
    fps: float = DEFAULT_FPS
    seq_len: int = DEFAULT_SEQ_LEN
    bone_count: int = 9
    dims: int = 3
    feature_dim: int = FEATURE_DIM
    version: int = FORMAT_VERSION
    depth_signs: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        for pose, speech in self.pairs:
            if (pose.frames, pose.bone_count, pose.dims) != (self.seq_len, self.bone_count, self.dims):
                raise ValueError("pose sequence shape differs from dataset header")
            if speech.frames != self.seq_len or speech.feature_dim != self.feature_dim:
                raise ValueError("speech track shape differs from dataset header")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def poses(self) -> np.ndarray:
        """(count, frames, bones, dims) array."""
        if not self.pairs:
            return np.zeros((0, self.seq_len, self.bone_count, self.dims))
        return np.stack([p.data for p, _ in self.pairs])

    @property
    def features(self) -> np.ndarray:
        if not self.pairs:
            return np.zeros((0, self.seq_len, self.feature_dim))
        return np.stack([s.features for _, s in self.pairs])

    @property
    def speech(self) -> list[SpeechTrack]:
        return [s for _, s in self.pairs]

    def sequences(self) -> list[PoseSequence]:
        return [p for p, _ in self.pairs]

    def _replace(self, pairs, depth_signs=None, dims=None) -> "GestureDataset":
        return GestureDataset(
            pairs,
            self.seed,
            self.generator_config,
            self.fps,
            self.seq_len,
            self.bone_count,
            self.dims if dims is None else dims,
            self.feature_dim,
            self.version,
            depth_signs,
        )

    def subset(self, indices) -> "GestureDataset":
        indices = list(indices)
        signs = None if self.depth_signs is None else self.depth_signs[indices]
        return self._replace([self.pairs[i] for i in indices], signs)

    def with_poses(self, poses: list[PoseSequence]) -> "GestureDataset":
        """Same speech tracks, new pose sequences (used for generated sets)."""
        if len(poses) != len(self.pairs):
            raise ValueError("one pose sequence per speech track required")
        dims = poses[0].dims if poses else self.dims
        return self._replace([(p, s) for p, (_, s) in zip(poses, self.pairs)], dims=dims)

    def projected(self) -> "GestureDataset":
        if self.dims != 3:
            raise ValueError("dataset is already 2D")
        return self._replace([(project_2d(p), s) for p, s in self.pairs], dims=2)


def beat_frame(t: float, fps: float) -> int:
    """Frame nearest to time ``t`` (ties round up)."""
    return int(math.floor(t * fps + 0.5))


def _rest_azimuth(bone_count: int) -> np.ndarray:
    if bone_count == len(_DEFAULT_REST_AZIMUTH):
        return _DEFAULT_REST_AZIMUTH.copy()
    return 2 * np.pi * np.arange(bone_count) / bone_count


def _draw_beats(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    n, fps = config.seq_len, config.fps
    if config.beat_times is not None:
        beats = np.asarray(config.beat_times, dtype=np.float64)
        frames = [beat_frame(t, fps) for t in beats]
        if np.any(np.diff(beats) <= 0) or min(frames) < 1 or max(frames) > n - 1:
            raise InvalidConfig("beat_times must be increasing and inside the sequence")
        return beats
    period = 1.0 / config.beat_rate_hz
    lo, hi = 2, n - 2
    times, t = [], rng.uniform(0.1, period)
    while t < n / fps:
        f = beat_frame(t, fps)
        if lo <= f <= hi and (not times or f - beat_frame(times[-1], fps) >= 4):
            times.append(t)
        t += period * rng.uniform(0.75, 1.25)
    if not times:
        times.append(rng.uniform(lo, hi) / fps)
    return np.asarray(times)


def _sequence(
    index: int, config: SynthConfig, bone_count: int, seed: int
) -> tuple[PoseSequence, SpeechTrack, float]:
    rng = rng_for(seed, "sequence", index)
    n, fps = config.seq_len, config.fps
    t = np.arange(n) / fps
    beats = _draw_beats(rng, config)

    amp = config.baseline_motion_amplitude
    freqs = rng.uniform(0.2, 0.6, size=(2, bone_count, 2))
    phases = rng.uniform(0, 2 * np.pi, size=(2, bone_count, 2))
    weights = rng.uniform(0.5, 1.0, size=(2, bone_count, 2))
    osc = np.sin(2 * np.pi * freqs[..., None] * t + phases[..., None])  # (2, bones, 2, frames)
    osc = (weights[..., None] * osc).sum(axis=2)  # (2, bones, frames)

    azimuth = _rest_azimuth(bone_count)[:, None] + rng.uniform(-0.2, 0.2, size=(bone_count, 1))
    azimuth = azimuth + amp * osc[0]
    elevation = config.rest_elevation + rng.uniform(-0.1, 0.1, size=(bone_count, 1))
    elevation = elevation + 0.5 * amp * osc[1]

    pulse_bones = config.pulse_bones
    if pulse_bones is None:
        pulse_bones = list(_DEFAULT_ARM_BONES) if bone_count == 9 else list(range(bone_count))
    increments = np.zeros((bone_count, n))
    for tb in beats:
        f = beat_frame(tb, fps)
        signs = rng.choice([-1.0, 1.0], size=len(pulse_bones))
        for k, w in ((-1, 0.5), (0, 1.0), (1, 0.5)):
            if 1 <= f + k < n:
                increments[pulse_bones, f + k] += signs * config.pulse_amplitude * w
    azimuth = azimuth + np.cumsum(increments, axis=1)
    if config.noise_std > 0:
        azimuth = azimuth + rng.normal(0, config.noise_std, size=azimuth.shape)
        elevation = elevation + rng.normal(0, config.noise_std, size=elevation.shape)

    ce = np.cos(elevation)
    data = np.stack([ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)], axis=-1)
    data = data.transpose(1, 0, 2)  # (frames, bones, 3)

    sign = 1.0
    if config.ambiguity_mode == "mirror":
        flip_rng = rng_for(seed, "mirror", index)
        if flip_rng.uniform() < config.ambiguity_mix:
            sign = -1.0
            data[..., 2] *= -1

    width = 0.6
    energy = np.full(n, 0.1)
    for tb in beats:
        energy += np.exp(-0.5 * ((np.arange(n) - beat_frame(tb, fps)) / width) ** 2)
    energy += rng.normal(0, config.feature_noise_std, size=n)
    denergy = np.gradient(energy)
    band_phase = rng.uniform(0, 2 * np.pi, size=2)
    low = energy * (0.6 + 0.4 * np.sin(2 * np.pi * 0.3 * t + band_phase[0]))
    high = energy * (0.6 + 0.4 * np.cos(2 * np.pi * 0.7 * t + band_phase[1]))
    feats = np.stack([energy, denergy, low, high], axis=-1)
    return PoseSequence(data, fps), SpeechTrack(feats, beats, fps), sign


def generate(config: SynthConfig, topo: SkeletonTopology | None = None, seed: int = 0) -> GestureDataset:
    """Synthetic 3D corpus. Each sequence draws from its own ``(seed, index)`` substream."""
    topo = topo or SkeletonTopology()
    raw = config.model_dump() if isinstance(config, SynthConfig) else config
    try:
        config = SynthConfig.model_validate(raw)
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from exc
    pairs, signs = [], []
    for i in range(config.num_sequences):
        pose, speech, sign = _sequence(i, config, topo.bone_count, seed)
        pairs.append((pose, speech))
        signs.append(sign)
    return GestureDataset(
        pairs,
        seed=int(seed),
        generator_config=config,
        fps=config.fps,
        seq_len=config.seq_len,
        bone_count=topo.bone_count,
        dims=3,
        depth_signs=np.asarray(signs),
    )


def with_mirror_pairs(dataset: GestureDataset) -> GestureDataset:
    """Each sequence followed by its depth mirror, sharing one speech track.

    Every 2D trajectory then has exactly two equally weighted 3D completions.
    """
    if dataset.dims != 3:
        raise ValueError("mirror pairs need a 3D dataset")
    pairs = []
    for pose, speech in dataset.pairs:
        pairs += [(pose, speech), (mirror_depth(pose), speech)]
    signs = None
    if dataset.depth_signs is not None:
        signs = np.repeat(dataset.depth_signs, 2) * np.tile([1, -1], len(dataset))
    return dataset._replace(pairs, signs)


def split(dataset: GestureDataset, train_fraction: float, seed: int) -> tuple[GestureDataset, GestureDataset]:
    if not 0.0 < train_fraction < 1.0:
        raise InvalidFraction("train_fraction must lie in (0, 1)")
    order = rng_for(seed, "split").permutation(len(dataset))
    n_train = int(math.floor(len(dataset) * train_fraction + 0.5))
    return dataset.subset(sorted(order[:n_train])), dataset.subset(sorted(order[n_train:]))


def dumps_dataset(ds: GestureDataset) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(
        struct.pack(
            "<6IfQ",
            ds.version,
            len(ds),
            ds.seq_len,
            ds.bone_count,
            ds.dims,
            ds.feature_dim,
            ds.fps,
            int(ds.seed) % 2**64,
        )
    )
    for pose, speech in ds.pairs:
        buf.write(np.ascontiguousarray(pose.data, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(speech.features, dtype="<f4").tobytes())
        buf.write(struct.pack("<I", len(speech.beat_times)))
        buf.write(np.ascontiguousarray(speech.beat_times, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_dataset(blob: bytes, config: SynthConfig | None = None) -> GestureDataset:
    if blob[:4] != MAGIC:
        raise FormatError("not a GDB1 dataset")
    header = struct.calcsize("<6IfQ")
    version, count, seq_len, bones, dims, fdim, fps, seed = struct.unpack_from("<6IfQ", blob, 4)
    pos = 4 + header
    pose_n, feat_n = seq_len * bones * dims, seq_len * fdim
    pairs = []
    try:
        for _ in range(count):
            pose = np.frombuffer(blob, "<f4", pose_n, pos).reshape(seq_len, bones, dims)
            pos += 4 * pose_n
            feats = np.frombuffer(blob, "<f4", feat_n, pos).reshape(seq_len, fdim)
            pos += 4 * feat_n
            (nb,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            beats = np.frombuffer(blob, "<f8", nb, pos)
            pos += 8 * nb
            pairs.append(
                (
                    PoseSequence(pose.astype(np.float64), float(fps)),
                    SpeechTrack(feats.astype(np.float64), beats.copy(), float(fps)),
                )
            )
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated dataset: {exc}") from exc
    if pos != len(blob):
        raise FormatError("trailing bytes after last pair")
    return GestureDataset(pairs, seed, config, float(fps), seq_len, bones, dims, fdim, version)


def save_dataset(path: str | Path, ds: GestureDataset) -> Path:
    """Write ``path`` plus a JSON sidecar holding the generator config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_dataset(ds))
    sidecar = {"seed": int(ds.seed), "dims": ds.dims, "count": len(ds)}
    if ds.generator_config is not None:
        sidecar["generator_config"] = ds.generator_config.model_dump()
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path: str | Path) -> GestureDataset:
    path = Path(path)
    config = None
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if "generator_config" in meta:
            config = SynthConfig.model_validate(meta["generator_config"])
    return loads_dataset(path.read_bytes(), config)
