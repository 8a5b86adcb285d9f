"""Run configuration: JSON document with every default materialised."""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

BACKBONES = ("recurrent", "linear")
VARIANTS = ("full", "no_cluster", "no_vae", "none")

# fields that determine parameter shapes or forward semantics; a checkpoint
# trained under one value cannot be evaluated under another
ARCHITECTURE_FIELDS = ("l", "h", "K", "d", "N", "hidden_dim", "backbone", "variant", "rounds",
                       "sigma", "temperature", "straight_through", "input_dim")


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    length: int = 20000
    p_dry: float = 0.8
    extreme_rate: float = 0.066
    y_th: float = 8.0
    wet_persistence: float = 0.75
    dry_persistence: float | None = None
    gamma_shape: float = 0.7
    gamma_scale: float | None = None
    intensity_memory: float = 0.8
    pwv_lead: int = 3
    resolution_minutes: int = 60
    seed: int = 0


@dataclass
class RunBlock:
    seed: int = 0
    l: int = 24
    h: int = 4
    K: int = 6
    beta: float = 0.3
    sigma: float = 1.0
    temperature: float = 0.5
    rounds: int = 1
    straight_through: bool = True
    detach_assignment: bool = True
    d: int = 16
    N: int = 8
    hidden_dim: int = 16
    input_dim: int = 6
    lr: float = 1e-3
    epochs: int = 8
    batch_size: int = 128
    grad_clip: float = 5.0
    backbone: str = "recurrent"
    variant: str = "full"
    n_seeds: int = 3
    mse_space: str = "normalized"
    select_best: bool = True
    extreme_threshold: float = 8.0
    workers: int = 4


@dataclass
class DataBlock:
    csv: str | None = None
    resolution_minutes: int = 60
    max_gap: int = 3
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class OutputBlock:
    dir: str = "out"
    report: str = "report.json"
    checkpoint: str = "checkpoint.json"
    data_csv: str = "synthetic.csv"
    plots: bool = False


@dataclass
class RunConfig:
    run: RunBlock = field(default_factory=RunBlock)
    data: DataBlock = field(default_factory=DataBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        validate_config(raw)
        raw = copy.deepcopy(raw)
        data_raw = raw.get("data", {})
        synth = SynthConfig(**data_raw.pop("synth", {}))
        return cls(run=RunBlock(**raw.get("run", {})),
                   data=DataBlock(synth=synth, **data_raw),
                   output=OutputBlock(**raw.get("output", {})))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def replace_run(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, **changes))

    def fingerprint(self) -> dict:
        return dataclasses.asdict(self.run)


def load_schema(name: str) -> dict:
    text = resources.files("rainbalance").joinpath("schemas").joinpath(name).read_text(encoding="utf-8")
    return json.loads(text)


def validate_config(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema("config.schema.json"))
    problems = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if problems:
        lines = [f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
                 for e in problems]
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
