"""End-to-end comparison of 3D generation against 2D generation plus lifting.

Ten settings are evaluated, each in exactly one space:

* 3D space: ground truth, the 3D generator, the 2D generator followed by the
  lifter, and the unconditional counterparts of the two generated settings.
* 2D space: ground truth, the 2D generator, the 3D generator with its depth
  axis dropped, and again the unconditional counterparts.

All randomness descends from ``ExperimentConfig.seed``; each model, sampling
run and metric draws from a substream keyed by its role, so adding or removing
settings never changes the numbers of the others.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import __version__
from . import diffusion as D
from . import lifter as L
from .errors import GestureError, InvalidConfig, MissingCheckpoint
from .metrics import (
    BCParams,
    EncoderConfig,
    PoseEncoder,
    diversity_from_latents,
    fgd,
    mean_beat_consistency,
    stats_from_latents,
    train_encoder,
)
from .seeding import derive_seed
from .skeleton import PoseSequence, project_2d
from .synth_data import GestureDataset, SynthConfig, generate, load_dataset, split

log = logging.getLogger(__name__)

SettingName = Literal[
    "gt3d",
    "gt2d",
    "gen3d",
    "gen2d",
    "gen2d_lift",
    "gen3d_to_2d",
    "uncond_gen3d",
    "uncond_gen2d",
    "uncond_gen2d_lift",
    "uncond_gen3d_to_2d",
]
SETTINGS: tuple[str, ...] = SettingName.__args__

# setting -> (evaluation space, generator key or None, post-processing)
_PLAN: dict[str, tuple[int, Optional[str], Optional[str]]] = {
    "gt3d": (3, None, None),
    "gt2d": (2, None, None),
    "gen3d": (3, "gen3d", None),
    "gen2d": (2, "gen2d", None),
    "gen2d_lift": (3, "gen2d", "lift"),
    "gen3d_to_2d": (2, "gen3d", "project"),
    "uncond_gen3d": (3, "uncond_gen3d", None),
    "uncond_gen2d": (2, "uncond_gen2d", None),
    "uncond_gen2d_lift": (3, "uncond_gen2d", "lift"),
    "uncond_gen3d_to_2d": (2, "uncond_gen3d", "project"),
}
GENERATORS: dict[str, tuple[int, bool]] = {
    "gen3d": (3, False),
    "gen2d": (2, False),
    "uncond_gen3d": (3, True),
    "uncond_gen2d": (2, True),
}

LABELS = {
    "gt3d": "Ground truth 3D",
    "gen3d": "Generator 3D",
    "gen2d_lift": "Generator 2D + lifter",
    "gt2d": "Ground truth 2D",
    "gen3d_to_2d": "Generator 3D -> 2D",
    "gen2d": "Generator 2D",
    "uncond_gen3d": "Uncond. generator 3D",
    "uncond_gen2d_lift": "Uncond. generator 2D + lifter",
    "uncond_gen3d_to_2d": "Uncond. generator 3D -> 2D",
    "uncond_gen2d": "Uncond. generator 2D",
}

# Published full-scale values on TED Gesture-3D (FGD, BC, Diversity); context only.
REFERENCE_VALUES = {
    "gt3d": (0.0, 0.702, 102.339),
    "gen3d": (1.370, 0.659, 102.586),
    "gen2d_lift": (9.833, 0.571, 92.136),
    "gt2d": (0.0, 0.689, 112.76),
    "gen3d_to_2d": (1.722, 0.645, 110.649),
    "gen2d": (3.279, 0.643, 112.165),
    "uncond_gen3d": (3.288, 0.683, 98.905),
    "uncond_gen2d_lift": (10.009, 0.595, 93.945),
    "uncond_gen3d_to_2d": (5.529, 0.667, 111.599),
    "uncond_gen2d": (1.757, 0.653, 113.304),
}

BLOCKS = (
    ("Evaluation in 3D", ("gt3d", "gen3d", "gen2d_lift")),
    ("Evaluation in 2D", ("gt2d", "gen3d_to_2d", "gen2d")),
    ("Unconditional ablation, 3D", ("gt3d", "uncond_gen3d", "uncond_gen2d_lift")),
    ("Unconditional ablation, 2D", ("gt2d", "uncond_gen3d_to_2d", "uncond_gen2d")),
)

CSV_COLUMNS = (
    "setting",
    "space",
    "n",
    "fgd",
    "bc",
    "bc_empty",
    "diversity",
    "mpjpe",
    "fgd_variant",
    "bc_sigma",
    "beat_threshold",
    "div_n",
    "div_repeats",
    "encoder_sha",
    "generator_sha",
    "lifter_sha",
    "seed",
)

CHECKPOINT_NAMES = {
    "gen3d": "generator_3d.ckpt",
    "gen2d": "generator_2d.ckpt",
    "uncond_gen3d": "generator_3d_uncond.ckpt",
    "uncond_gen2d": "generator_2d_uncond.ckpt",
    "lifter": "lifter.ckpt",
    "encoder3d": "encoder_3d.ckpt",
    "encoder2d": "encoder_2d.ckpt",
}


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    corpus: SynthConfig = SynthConfig()
    train_fraction: float = Field(2 / 3, gt=0, lt=1)
    settings: list[SettingName] = list(SETTINGS)
    generator: D.GeneratorConfig = D.GeneratorConfig()
    lifter: L.LifterConfig = L.LifterConfig()
    encoder: EncoderConfig = EncoderConfig()
    bc: BCParams = BCParams()
    diversity_n: int = Field(64, ge=1)
    diversity_repeats: int = Field(100, ge=1)
    fgd_variant: Literal["standard", "paper-literal"] = "standard"
    generated_count: int = Field(512, ge=2)
    data_path: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    train_missing: bool = True
    parallel: bool = False

    @field_validator("settings")
    @classmethod
    def _unique(cls, v):
        if not v:
            raise ValueError("at least one setting is required")
        if len(set(v)) != len(v):
            raise ValueError("settings must be unique")
        return v

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate_json(Path(path).read_text())
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from exc


# seed helpers shared with the CLI so standalone training matches run_experiment
def corpus_seed(master: int) -> int:
    return derive_seed(master, "corpus")


def split_seed(master: int) -> int:
    return derive_seed(master, "split")


def generator_config(config: ExperimentConfig, key: str) -> D.GeneratorConfig:
    dims, uncond = GENERATORS[key]
    p_uncond = 1.0 if uncond else config.generator.p_uncond
    return config.generator.model_copy(
        update={"dims": dims, "p_uncond": p_uncond, "seed": derive_seed(config.seed, "generator", key)}
    )


def lifter_config(config: ExperimentConfig) -> L.LifterConfig:
    return config.lifter.model_copy(update={"seed": derive_seed(config.seed, "lifter")})


def encoder_seed(master: int, dims: int) -> int:
    return derive_seed(master, "encoder", dims)


def load_corpus(config: ExperimentConfig) -> GestureDataset:
    if config.data_path:
        return load_dataset(config.data_path)
    return generate(config.corpus, seed=corpus_seed(config.seed))


def split_corpus(config: ExperimentConfig, corpus: GestureDataset) -> tuple[GestureDataset, GestureDataset]:
    return split(corpus, config.train_fraction, split_seed(config.seed))


def in_space(ds: GestureDataset, dims: int) -> GestureDataset:
    return ds if ds.dims == dims else ds.projected()


@dataclass
class MetricReport:
    rows: list[dict]
    metadata: dict = field(default_factory=dict)

    def row(self, setting: str) -> dict:
        for r in self.rows:
            if r["setting"] == setting:
                return r
        raise KeyError(setting)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: _fmt(r[k]) for k in CSV_COLUMNS})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metadata: dict | None = None) -> "MetricReport":
        rows = []
        for raw in csv.DictReader(io.StringIO(text)):
            r: dict = dict(raw)
            for k in ("space", "n", "bc_empty", "div_n", "div_repeats", "seed"):
                r[k] = int(r[k])
            for k in ("fgd", "bc", "diversity", "mpjpe", "bc_sigma", "beat_threshold"):
                r[k] = float(r[k]) if r[k] != "" else None
            rows.append(r)
        return cls(rows, metadata or {})

    def to_markdown(self) -> str:
        present = {r["setting"]: r for r in self.rows}
        lines = ["# Gesture generation report", ""]
        for title, names in BLOCKS:
            names = [n for n in names if n in present]
            if not names:
                continue
            lines += [f"## {title}", "", "| Setting | FGD ↓ | BC ↑ | Diversity ↑ | MPJPE | n |", "|---|---|---|---|---|---|"]
            for n in names:
                r = present[n]
                lines.append(
                    f"| {LABELS[n]} | {_fmt(r['fgd'])} | {_fmt(r['bc'])} | {_fmt(r['diversity'])} "
                    f"| {_fmt(r['mpjpe']) or '-'} | {r['n']} |"
                )
            lines.append("")
        if self.rows:
            r0 = self.rows[0]
            lines += [
                f"FGD variant `{r0['fgd_variant']}`; BC sigma {r0['bc_sigma']} s, beat threshold "
                f"{r0['beat_threshold']}; diversity subsets of {r0['div_n']} averaged over {r0['div_repeats']} draw(s); "
                f"master seed {r0['seed']}.",
                "",
            ]
        lines += [
            "Published reference values on TED Gesture-3D (FGD / BC / Diversity), shown for "
            "context only. They come from a different corpus, encoder and training scale and "
            "are not targets for this synthetic setup:",
            "",
        ]
        for n in SETTINGS:
            if n in present:
                f, b, d = REFERENCE_VALUES[n]
                lines.append(f"- {LABELS[n]}: {f} / {b} / {d}")
        lines.append("")
        return "\n".join(lines)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "report.csv", "markdown": out / "report.md", "metadata": out / "metadata.json"}
        paths["csv"].write_text(self.to_csv())
        paths["markdown"].write_text(self.to_markdown())
        paths["metadata"].write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")
        return paths


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _with_setting(exc: Exception, name: str) -> Exception:
    try:
        return type(exc)(f"setting {name}: {exc}")
    except Exception:  # exception types with unusual constructors
        return RuntimeError(f"setting {name}: {exc!r}")


class _Models:
    """Lazily trained or loaded models for one experiment."""

    def __init__(self, config: ExperimentConfig, train: GestureDataset, test: GestureDataset):
        self.config, self.train, self.test = config, train, test
        self.dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
        self.generators: dict[str, D.TrainedGenerator] = {}
        self.encoders: dict[int, PoseEncoder] = {}
        self.lifter: Optional[L.TrainedLifter] = None

    def _path(self, key: str) -> Optional[Path]:
        if self.dir is None:
            return None
        path = self.dir / CHECKPOINT_NAMES[key]
        if path.exists():
            return path
        if not self.config.train_missing:
            raise MissingCheckpoint(str(path))
        return None

    def generator(self, key: str) -> D.TrainedGenerator:
        if key not in self.generators:
            path = self._path(key)
            if path is not None:
                self.generators[key] = D.TrainedGenerator.load(path)
            else:
                dims = GENERATORS[key][0]
                log.info("training generator %s", key)
                self.generators[key] = D.train(in_space(self.train, dims), generator_config(self.config, key))
        return self.generators[key]

    def get_lifter(self) -> L.TrainedLifter:
        if self.lifter is None:
            path = self._path("lifter")
            if path is not None:
                self.lifter = L.TrainedLifter.load(path)
            else:
                log.info("training lifter")
                self.lifter = L.train_lifter(self.train, lifter_config(self.config))
        return self.lifter

    def encoder(self, dims: int) -> PoseEncoder:
        if dims not in self.encoders:
            path = self._path(f"encoder{dims}d")
            if path is not None:
                self.encoders[dims] = PoseEncoder.load(path)
            else:
                log.info("training %dD encoder", dims)
                self.encoders[dims] = train_encoder(
                    in_space(self.train, dims), seed=encoder_seed(self.config.seed, dims), config=self.config.encoder
                )
        return self.encoders[dims]


def _map(fn: Callable, items: list, parallel: bool) -> list:
    if parallel and len(items) > 1:
        with ThreadPoolExecutor(max_workers=len(items)) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def run_experiment(config: ExperimentConfig) -> MetricReport:
    """Train or load every model the requested settings need, then evaluate each setting."""
    start = time.perf_counter()
    corpus = load_corpus(config)
    train, test = split_corpus(config, corpus)
    models = _Models(config, train, test)
    settings = list(config.settings)
    spaces = sorted({_PLAN[s][0] for s in settings})
    gen_keys = sorted({_PLAN[s][1] for s in settings if _PLAN[s][1]})
    need_lifter = any(_PLAN[s][2] == "lift" for s in settings)

    # training is sequential and deterministic; sampling and scoring may be threaded
    for key in gen_keys:
        models.generator(key)
    for dims in spaces:
        models.encoder(dims)
    lifter = models.get_lifter() if need_lifter else None

    tracks = [test.speech[i % len(test)] for i in range(config.generated_count)]

    def sample(key: str) -> list[PoseSequence]:
        return D.generate_for_tracks(models.generator(key), tracks, derive_seed(config.seed, "sample", key))

    samples = dict(zip(gen_keys, _map(sample, gen_keys, config.parallel)))
    lifted_cache: dict[str, list[PoseSequence]] = {}
    if lifter is not None:
        for key in gen_keys:
            if any(_PLAN[s][1] == key and _PLAN[s][2] == "lift" for s in settings):
                lifted_cache[key] = L.lift_batch(lifter, samples[key])

    refs = {}
    for dims in spaces:
        ref = in_space(test, dims)
        refs[dims] = (ref, stats_from_latents(models.encoder(dims).encode(ref.poses)))

    lifter_mpjpe = None
    if lifter is not None:
        lifted_gt = L.lift_batch(lifter, [project_2d(s) for s in test.sequences()])
        lifter_mpjpe = float(np.mean([L.mpjpe(p, g) for p, g in zip(lifted_gt, test.sequences())]))

    div_seed = derive_seed(config.seed, "diversity")

    def evaluate(name: str) -> dict:
        dims, key, post = _PLAN[name]
        try:
            ref, ref_stats = refs[dims]
            if key is None:
                seqs, beats = ref.sequences(), [t.beat_times for t in ref.speech]
            else:
                seqs = lifted_cache[key] if post == "lift" else samples[key]
                if post == "project":
                    seqs = [project_2d(s) for s in seqs]
                beats = [t.beat_times for t in tracks]
            enc = models.encoder(dims)
            latents = enc.encode(np.stack([s.data for s in seqs]))
            bc, empty = mean_beat_consistency(seqs, beats, config.bc)
            return {
                "setting": name,
                "space": dims,
                "n": len(seqs),
                "fgd": fgd(stats_from_latents(latents), ref_stats, config.fgd_variant),
                "bc": bc,
                "bc_empty": empty,
                "diversity": diversity_from_latents(latents, config.diversity_n, div_seed, config.diversity_repeats),
                "mpjpe": lifter_mpjpe if post == "lift" else None,
                "fgd_variant": config.fgd_variant,
                "bc_sigma": config.bc.sigma,
                "beat_threshold": config.bc.threshold,
                "div_n": config.diversity_n,
                "div_repeats": config.diversity_repeats,
                "encoder_sha": enc.checksum(),
                "generator_sha": models.generator(key).checksum() if key else "",
                "lifter_sha": lifter.checksum() if post == "lift" and lifter is not None else "",
                "seed": config.seed,
            }
        except GestureError as exc:
            raise _with_setting(exc, name) from exc

    rows = _map(evaluate, settings, config.parallel)
    rows.sort(key=lambda r: (-r["space"], SETTINGS.index(r["setting"])))

    metadata = {
        "master_seed": config.seed,
        "config_sha256": config.digest(),
        "config": config.model_dump(mode="json"),
        "seeds": {
            "corpus": corpus_seed(config.seed),
            "split": split_seed(config.seed),
            "diversity": div_seed,
            **{f"generator.{k}": generator_config(config, k).seed for k in gen_keys},
            **{f"sample.{k}": derive_seed(config.seed, "sample", k) for k in gen_keys},
            **{f"encoder.{d}d": encoder_seed(config.seed, d) for d in spaces},
            **({"lifter": lifter_config(config).seed} if need_lifter else {}),
        },
        "corpus": {"sequences": len(corpus), "train": len(train), "test": len(test)},
        "generated_per_setting": config.generated_count,
        "encoders": {f"{d}d": {"sha": models.encoders[d].checksum(), **models.encoders[d].log} for d in spaces},
        "generators": {
            k: {"sha": g.checksum(), **{a: b for a, b in g.log.items() if a != "loss_curve"}}
            for k, g in models.generators.items()
        },
        "lifter": None
        if lifter is None
        else {"sha": lifter.checksum(), "test_mpjpe": lifter_mpjpe, **{a: b for a, b in lifter.log.items() if a != "loss_curve"}},
        "wall_time_s": time.perf_counter() - start,
        "versions": {"gesturedim": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    return MetricReport(rows, metadata)
