"""Strict JSON experiment configs, presets and dotted-key overrides."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import jsonschema

from .models import ZOO
from .optim import LrSchedule
from .rewind import DEFAULT_CADENCE, FINETUNE_LR, STRATEGIES
from .train import TrainConfig

REFERENCE_MODELS = ("resnet20", "resnet56", "resnet110", "wrn16-8")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "synthetic"
    scale: str = "desk"
    train_size: int = 8000
    val_size: int = 2000
    seed: int = 0
    pad: int = 4
    root: str | None = None


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 0.1
    boundaries: tuple[int, ...] = (500, 750)
    multipliers: tuple[float, ...] = (0.1, 0.1)
    total_iterations: int = 1000
    momentum: float = 0.9
    l2: float = 1e-4
    l2_scope: str = "all"
    batch_size: int = 64
    finetune_lr: float = FINETUNE_LR

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.boundaries, self.multipliers, self.total_iterations)


@dataclass(frozen=True)
class PruneConfig:
    scope: str = "global"
    structured: bool = False
    exempt: tuple[str, ...] = ()


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"
    figures: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    strategy: tuple[str, ...] = ("finetune",)
    mode: str = "one_shot"
    compressions: tuple[float, ...] = ()
    sparsities: tuple[float, ...] = ()
    step_fraction: float = 0.3
    rounds: int = 3
    trials: int = 2
    seed: int = 0
    rewind_iteration: int | None = None
    bn_decay: float | None = None
    optim: OptimConfig = field(default_factory=OptimConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    checkpoint_cadence: int = DEFAULT_CADENCE
    workers: int = 1
    deterministic: bool = True
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def target_sparsities(self) -> list[float]:
        if self.sparsities:
            return list(self.sparsities)
        return [1.0 - 1.0 / c if c > 0 else float("nan") for c in self.compressions]

    @property
    def schedule(self) -> LrSchedule:
        return self.optim.schedule()

    @property
    def train_config(self) -> TrainConfig:
        o = self.optim
        return TrainConfig(l2=o.l2, l2_scope=o.l2_scope, momentum=o.momentum,
                           batch_size=o.batch_size, bn_decay=self.bn_decay)

    @property
    def num_classes(self) -> int:
        return 100 if self.dataset.name == "cifar100" else 10

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        return json.loads(json.dumps(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _load_schema() -> dict:
    return json.loads(resources.files("rewindlab").joinpath("config.schema.json").read_text())


SCHEMA = _load_schema()


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("rewindlab").joinpath("presets").iterdir()
                  if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files("rewindlab").joinpath("presets", f"{name}.json")
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return json.loads(path.read_text())


def default_optim(model: str) -> dict:
    """Hyper-parameters of the matching published recipe, or the desk recipe."""
    if model.startswith("resnet"):
        return {"base_lr": 0.1, "boundaries": [36000, 54000], "multipliers": [0.1, 0.1],
                "total_iterations": 72000, "l2": 1e-4, "batch_size": 128}
    if model == "wrn16-8":
        return {"base_lr": 0.1, "boundaries": [32000, 48000, 64000], "multipliers": [0.2, 0.2, 0.2],
                "total_iterations": 80000, "l2": 2e-4, "batch_size": 128}
    return {}


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides:
        path, value = parse_override(item)
        node = raw
        for k in path[:-1]:
            nxt = node.get(k)
            if isinstance(nxt, str) and k == "dataset":
                nxt = {"name": nxt}
            if nxt is None:
                nxt = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"cannot set {'.'.join(path)}: {k!r} is not an object")
            node[k] = nxt
            node = nxt
        node[path[-1]] = value
    return raw


def _dotted(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        key = ".".join(filter(None, [path, extra[0] if extra else ""]))
        return f"unknown key {key!r}"
    return f"{path or '<root>'}: {err.message}"


def from_dict(raw: dict) -> ExperimentConfig:
    """Validate a raw config dict and resolve every default."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = copy.deepcopy(raw)
    if isinstance(raw.get("dataset"), str):
        raw["dataset"] = {"name": raw["dataset"]}
    if isinstance(raw.get("strategy"), str):
        raw["strategy"] = [raw["strategy"]]
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        raise ConfigError(_dotted(errors[0]))
    model = raw["model"]
    if model not in ZOO:
        raise ConfigError(f"model: unknown {model!r}; zoo: {', '.join(ZOO)}")
    ds = DatasetConfig(**raw.get("dataset", {}))
    if ds.name in ("cifar10", "cifar100") and ds.scale == "full":
        ds = DatasetConfig(**{**asdict(ds), "train_size": 50000, "val_size": 10000})
    optim_raw = {**default_optim(model), **raw.get("optim", {})}
    for k in ("boundaries", "multipliers"):
        if k in optim_raw:
            optim_raw[k] = tuple(optim_raw[k])
    optim = OptimConfig(**optim_raw)
    try:
        optim.schedule()
    except ValueError as exc:
        raise ConfigError(f"optim: {exc}") from None
    n = optim.total_iterations
    prune_raw = dict(raw.get("prune", {}))
    if "exempt" in prune_raw:
        prune_raw["exempt"] = tuple(prune_raw["exempt"])
    fields = {k: v for k, v in raw.items() if k not in ("dataset", "optim", "prune", "output")}
    for k in ("strategy", "compressions", "sparsities"):
        if k in fields:
            fields[k] = tuple(fields[k])
    if fields.get("compressions") and fields.get("sparsities"):
        raise ConfigError("compressions: give either compressions or sparsities, not both")
    if not fields.get("compressions") and not fields.get("sparsities"):
        fields["compressions"] = (2.0,)
    if fields.get("rewind_iteration") is None:
        fields["rewind_iteration"] = n // 4
    if not 0 <= fields["rewind_iteration"] <= n:
        raise ConfigError(f"rewind_iteration: {fields['rewind_iteration']} outside [0, {n}]")
    if model in REFERENCE_MODELS and fields.get("trials", 2) < 2:
        raise ConfigError("trials: reference-model runs need between 2 and 12 trials")
    cfg = ExperimentConfig(dataset=ds, optim=optim, prune=PruneConfig(**prune_raw),
                           output=OutputConfig(**raw.get("output", {})), **fields)
    for s in cfg.strategy:
        if s not in STRATEGIES:
            raise ConfigError(f"strategy: unknown {s!r}; choose from {', '.join(STRATEGIES)}")
    return cfg


def parse_config(path: str | os.PathLike | None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Load ``path`` (a JSON file or ``preset:<name>``), apply overrides, validate."""
    if path is None:
        raise ConfigError("no config given")
    text = str(path)
    if text.startswith("preset:"):
        raw = load_preset(text.split(":", 1)[1])
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return from_dict(apply_overrides(raw, overrides))
