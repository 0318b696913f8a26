"""Experiment configuration: one JSON file, every key optional.

Layout (all sections and keys may be omitted; see ``ExperimentConfig()`` for
defaults)::

    {
      "seed": 0,
      "out_dir": "runs/default",
      "corpus":   {"n_pairs": 2000, "n_concepts": 4, "noise_rate": 0.0, ...},
      "model":    {"d_model": 32, "depth": 2, ...},
      "train":    {"epochs": 10, "base_lr": 0.0003, "amf_enabled": true, ...},
      "eval":     {"heldout_pairs": 200, "ks": [1, 5, 10], ...},
      "ablation": {"seeds": [0, 1, 2, 3, 4], "noise_rate": 0.3, "epochs": 20, "workers": 1},
      "paths":    {"train": null, "heldout": null, "checkpoint": null}
    }

The root ``seed`` overrides ``corpus.seed`` and ``train.seed``; component
seeds are then derived from it by name. Unknown keys are rejected so that a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import CorpusConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass
class EvalConfig:
    heldout_pairs: int = 200
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    frames_per_video: int = 1
    videos_per_concept: int | None = None
    renormalize_video: bool = True
    bench_sizes: list[int] = field(default_factory=lambda: [500, 1000, 2000])
    bench_repeats: int = 3
    fusion_hidden: int = 32


@dataclass
class AblationConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    noise_rate: float = 0.3
    epochs: int = 20  # noisy pairs slow convergence; 10 epochs leaves every row near its starting point
    workers: int = 1


@dataclass
class PathsConfig:
    """Input locations; ``None`` means the conventional file inside ``out_dir``."""

    train: str | None = None
    heldout: str | None = None
    checkpoint: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def resolve(self) -> ExperimentConfig:
        """Propagate the root seed and the corpus vocabularies; validate everything."""
        self.corpus.seed = self.seed
        self.train.seed = self.seed
        self.model.vocab_image = self.corpus.vocab_image
        self.model.vocab_text = self.corpus.vocab_text
        self.model.max_len = max(self.model.max_len, self.corpus.image_len, self.corpus.text_len_max)
        try:
            self.corpus.validate()
            self.model.validate()
            self.train.validate()
        except TypeError as e:  # e.g. a string where a number belongs
            raise ConfigError(f"ill-typed config value: {e}") from None
        if any(k < 1 for k in self.eval.ks):
            raise ConfigError("eval.ks must be positive")
        if self.eval.heldout_pairs < 1:
            raise ConfigError("eval.heldout_pairs must be >= 1")
        if len(self.eval.bench_sizes) < 2:
            raise ConfigError("eval.bench_sizes needs at least two sizes")
        if not self.ablation.seeds:
            raise ConfigError("ablation.seeds is empty")
        if self.ablation.epochs < 1:
            raise ConfigError("ablation.epochs must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def echo(self, out_dir=None, name: str = "config.json") -> Path:
        """Write the resolved config next to the outputs it produced."""
        out = Path(out_dir or self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / name
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    def path(self, key: str) -> Path:
        default = {"train": "train.jsonl", "heldout": "heldout.jsonl", "checkpoint": "checkpoint.npz"}[key]
        given = getattr(self.paths, key)
        return Path(given) if given else Path(self.out_dir) / default


def _fill(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _fill(type(default), value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def from_dict(data: dict) -> ExperimentConfig:
    return _fill(ExperimentConfig, data, "")


def load_config(path=None) -> ExperimentConfig:
    """Read a JSON config; ``None`` gives all defaults. File problems raise OSError."""
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e.msg} at line {e.lineno})") from None
    return from_dict(data)
