"""Experiment configuration: nested dataclasses loaded from JSON."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .encoding import DEFAULT_LAMBDAS
from .geometry import ProbeConfig
from .lesion import DEFAULT_COMPONENTS
from .microlm import ConfigError, ModelConfig
from .synth import SynthLanguageSpec, check_disjoint, default_languages


@dataclass
class CorpusConfig:
    train_tokens: int = 40000
    heldout_tokens: int = 3000
    probe_tokens: int = 6000


@dataclass
class TrainingConfig:
    pretrain_steps: int = 1500
    pretrain_lr: float = 0.5
    pretrain_lr_final: float = 0.05
    finetune_steps: int = 200
    finetune_lr: float = 0.05
    batch_size: int = 16
    seq_len: int = 64
    clip: float = 1.0


@dataclass
class SubjectsConfig:
    per_language: int = 8
    n_runs: int = 9
    trs_per_run: int = 60
    n_voxels: int = 40
    snr: float = 5.0
    # number of embedding-space directions the voxels load on
    planted_dims: int = 4
    # "lesion": directions the matched specific lesion destroys most on
    # held-out text; "language": axes whose held-out mean separates languages
    dims_from: str = "lesion"
    subject_jitter: float = 0.2
    heldout_tokens: int = 3000


@dataclass
class LesionConfig:
    fraction: float = 0.01
    scope: str = "group"
    components: list[str] = field(default_factory=lambda: list(DEFAULT_COMPONENTS))
    seed: int = 7


@dataclass
class EncodingConfig:
    tr: float = 2.0
    lag: float = 4.0
    lambda_grid: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    lambda_mode: str = "global"


@dataclass
class StatsConfig:
    fdr_q: float = 0.01
    fdr_method: str = "BH"
    epsilon: float = 1e-6
    n_rois: int = 4


@dataclass
class GeometryConfig:
    tokens_per_language: int = 600
    pca_dims: int = 50


@dataclass
class ProbeSettings:
    hidden: int = 128
    dropout: float = 0.1
    epochs: int = 20
    lr: float = 1e-3
    batch: int = 64
    n_bins: int = 6

    def probe_config(self, seed: int) -> ProbeConfig:
        return ProbeConfig(self.hidden, self.dropout, self.epochs, self.lr, self.batch, seed)


_SECTIONS = {
    "model": ModelConfig, "corpora": CorpusConfig, "training": TrainingConfig,
    "subjects": SubjectsConfig, "lesion": LesionConfig, "encoding": EncodingConfig,
    "stats": StatsConfig, "geometry": GeometryConfig, "probe": ProbeSettings,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    languages: list[SynthLanguageSpec] = field(default_factory=default_languages)
    corpora: CorpusConfig = field(default_factory=CorpusConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    subjects: SubjectsConfig = field(default_factory=SubjectsConfig)
    lesion: LesionConfig = field(default_factory=LesionConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    output_dir: str = "runs/default"

    def validate(self) -> None:
        if len(self.languages) != 3:
            raise ConfigError(f"exactly three languages required, got {len(self.languages)}")
        if len({s.id for s in self.languages}) != 3:
            raise ConfigError("language ids must be distinct")
        try:
            for s in self.languages:
                s.validate(self.model.vocab_size)
            check_disjoint(self.languages)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.lesion.fraction < 1:
            raise ConfigError("lesion.fraction must lie in (0, 1)")
        if self.lesion.scope not in ("group", "global"):
            raise ConfigError("lesion.scope must be 'group' or 'global'")
        if self.subjects.per_language < 2:
            raise ConfigError("at least two subjects per language are needed for t-tests")
        if self.subjects.n_runs < 2:
            raise ConfigError("subjects.n_runs must be >= 2")
        if self.subjects.dims_from not in ("lesion", "language"):
            raise ConfigError("subjects.dims_from must be 'lesion' or 'language'")
        if not 0 < self.subjects.planted_dims <= self.model.dim:
            raise ConfigError("subjects.planted_dims must lie in [1, model.dim]")
        if not 0 < self.subjects.heldout_tokens <= self.corpora.heldout_tokens:
            raise ConfigError("subjects.heldout_tokens must lie in [1, corpora.heldout_tokens]")
        if self.stats.fdr_method not in ("BH", "BY"):
            raise ConfigError("stats.fdr_method must be 'BH' or 'BY'")
        if not self.stats.epsilon > 0:
            raise ConfigError("stats.epsilon must be > 0")
        if self.encoding.lambda_mode not in ("global", "voxel"):
            raise ConfigError("encoding.lambda_mode must be 'global' or 'voxel'")
        if any(l < 0 for l in self.encoding.lambda_grid) or not self.encoding.lambda_grid:
            raise ConfigError("encoding.lambda_grid must be nonempty and nonnegative")

    @property
    def language_ids(self) -> list[str]:
        return [s.id for s in self.languages]

    @property
    def story_tokens(self) -> int:
        """Tokens needed to cover every run of the listening experiment."""
        rate = min(s.tokens_per_second for s in self.languages)
        return int(self.subjects.n_runs * self.subjects.trs_per_run * self.encoding.tr * rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["languages"] = [s.to_dict() for s in self.languages]
        return d

    def content_hash(self) -> str:
        """Hash of everything that affects results (the output dir does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        try:
            for name, typ in _SECTIONS.items():
                if name in d:
                    sub = d.pop(name)
                    fields = {f.name for f in dataclasses.fields(typ)}
                    bad = set(sub) - fields
                    if bad:
                        raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
                    kwargs[name] = typ(**sub)
            if "languages" in d:
                kwargs["languages"] = [SynthLanguageSpec.from_dict(s) for s in d.pop("languages")]
            kwargs.update(d)
            cfg = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def derive_seed(master: int, name: str) -> int:
    """Stable per-purpose seed derived from the master seed."""
    h = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def small_config(output_dir: str = "runs/small", seed: int = 0) -> ExperimentConfig:
    """A fast configuration for smoke tests and determinism checks."""
    cfg = ExperimentConfig(
        seed=seed,
        model=ModelConfig(vocab_size=256, dim=16, n_layers=1, n_heads=2, mlp_mult=2,
                          context_len=32, seed=seed),
        corpora=CorpusConfig(train_tokens=3000, heldout_tokens=600, probe_tokens=1500),
        training=TrainingConfig(pretrain_steps=40, pretrain_lr=0.3, pretrain_lr_final=0.05,
                                finetune_steps=10, finetune_lr=0.05, batch_size=4, seq_len=16),
        subjects=SubjectsConfig(per_language=3, n_runs=3, trs_per_run=20, n_voxels=8,
                                planted_dims=3, heldout_tokens=200),
        encoding=EncodingConfig(lambda_grid=[0.1, 10.0, 1000.0]),
        geometry=GeometryConfig(tokens_per_language=80, pca_dims=8),
        probe=ProbeSettings(hidden=16, epochs=3, n_bins=3),
        output_dir=output_dir,
    )
    cfg.validate()
    return cfg
