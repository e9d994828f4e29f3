"""Experiment configuration stored as YAML.

Every field has an explicit key; unknown keys are rejected so that a typo
never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import yaml

from .autodiff import resolve_dtype
from .errors import ConfigError
from .federation.training import TrainSettings
from .phantom import SiteProfile, default_sites
from .strategy import StrategyId
from .unet import UNetConfig


def _default_sites() -> tuple:
    return tuple(default_sites(0))


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str = "run"
    strategy: str = "fedftn"
    Q: int = 300
    P: int = 3
    lr: float = 1e-4
    batch: int = 3
    lambda_gwc: float = 0.001
    mu: float = 0.01
    seed: int = 0
    data_seed: int = 0
    precision: str = "f32"
    transport: str = "inproc"
    output_dir: str = "runs/default"
    crop: Optional[int] = 16
    flip: bool = True
    reset_adam: bool = False
    eval_every: int = 1
    eval_splits: tuple = ("val", "test")
    n_subjects: int = 12
    split: tuple = (8, 1, 3)
    volume_size: int = 32
    sa_epochs: int = 10
    sa_lr: float = 2e-5
    unet: UNetConfig = field(default_factory=UNetConfig)
    sites: tuple = field(default_factory=_default_sites)

    def __post_init__(self):
        try:
            object.__setattr__(self, "strategy", StrategyId.parse(self.strategy).value)
            resolve_dtype(self.precision)
        except (ConfigError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        object.__setattr__(self, "eval_splits", tuple(self.eval_splits))
        object.__setattr__(self, "split", tuple(int(s) for s in self.split))
        object.__setattr__(self, "sites", tuple(dataclasses.replace(s, seed=self.data_seed)
                                                for s in self.sites))
        bad = set(self.eval_splits) - {"train", "val", "test"}
        if bad:
            raise ConfigError(f"eval_splits: unknown split(s) {sorted(bad)}")
        if not self.sites:
            raise ConfigError("sites: at least one site is required")
        ids = [s.site_id for s in self.sites]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"sites: duplicate site ids {ids}")
        if len(self.split) != 3 or sum(self.split) != self.n_subjects:
            raise ConfigError(f"split: {self.split} must be three counts summing to n_subjects")
        if self.volume_size % self.unet.divisor:
            raise ConfigError(f"volume_size: {self.volume_size} not divisible by {self.unet.divisor}")
        if self.crop is not None and (self.crop > self.volume_size or self.crop % self.unet.divisor):
            raise ConfigError(f"crop: {self.crop} must fit the volume and divide by {self.unet.divisor}")
        if self.transport != "inproc" and not self.transport.startswith("socket"):
            raise ConfigError(f"transport: expected inproc or socket:HOST:PORT, got {self.transport!r}")
        for name in ("lr", "lambda_gwc", "mu", "sa_lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        try:
            self.train_settings()
        except ConfigError as exc:
            raise ConfigError(f"schedule: {exc}") from None

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            strategy=self.strategy, Q=self.Q, P=self.P, lr=self.lr, batch=self.batch,
            lambda_gwc=self.lambda_gwc, mu=self.mu, crop=self.crop, flip=self.flip,
            seed=self.seed, precision=self.precision, unet=self.unet,
            reset_adam=self.reset_adam, eval_every=self.eval_every, eval_splits=self.eval_splits)

    @property
    def size(self) -> tuple:
        return (self.volume_size,) * 3

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# -- (de)serialization ---------------------------------------------------------

_SITE_KEYS = [f.name for f in dataclasses.fields(SiteProfile) if f.name != "seed"]
_UNET_KEYS = [f.name for f in dataclasses.fields(UNetConfig)]


def to_dict(config: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name == "unet":
            value = {k: getattr(value, k) for k in _UNET_KEYS}
        elif f.name == "sites":
            value = [{k: (list(v) if isinstance(v, tuple) else v)
                      for k in _SITE_KEYS for v in [getattr(s, k)]} for s in value]
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def render(config: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False, default_flow_style=None)


def _coerce(key: str, value, kind):
    """Convert a YAML scalar to ``kind`` with a field-level error."""
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float, str)) and not isinstance(value, bool):
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, str):
            return value
    raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")


def _check_keys(where: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


_SCALARS = {"run_id": str, "strategy": str, "Q": int, "P": int, "lr": float, "batch": int,
            "lambda_gwc": float, "mu": float, "seed": int, "data_seed": int, "precision": str,
            "transport": str, "output_dir": str, "flip": bool, "reset_adam": bool,
            "eval_every": int, "n_subjects": int, "volume_size": int, "sa_epochs": int,
            "sa_lr": float}
_TYPE_NAMES = {"int": int, "bool": bool, int: int, bool: bool}
_SITE_TYPES = {"site_id": int, "blur_fwhm_voxels": float, "noise_gain": float,
               "intensity_scale": float}


def from_dict(data: dict) -> ExperimentConfig:
    names = [f.name for f in dataclasses.fields(ExperimentConfig)]
    _check_keys("config", data, names)
    kw = {}
    for key, value in data.items():
        if key in _SCALARS:
            kw[key] = _coerce(key, value, _SCALARS[key])
        elif key == "crop":
            kw[key] = None if value is None else _coerce(key, value, int)
        elif key in ("eval_splits", "split"):
            if not isinstance(value, list):
                raise ConfigError(f"{key}: expected a list, got {value!r}")
            kind = str if key == "eval_splits" else int
            kw[key] = tuple(_coerce(f"{key}[{i}]", v, kind) for i, v in enumerate(value))
        elif key == "unet":
            _check_keys("unet", value, _UNET_KEYS)
            types = {f.name: f.type for f in dataclasses.fields(UNetConfig)}
            kw[key] = UNetConfig(**{k: _coerce(f"unet.{k}", v, _TYPE_NAMES[types[k]])
                                    for k, v in value.items()})
        elif key == "sites":
            if not isinstance(value, list):
                raise ConfigError(f"sites: expected a list, got {value!r}")
            kw[key] = tuple(_site(i, s) for i, s in enumerate(value))
    return ExperimentConfig(**kw)


def _site(i: int, data: dict) -> SiteProfile:
    where = f"sites[{i}]"
    _check_keys(where, data, _SITE_KEYS)
    if "site_id" not in data or "count_levels" not in data:
        raise ConfigError(f"{where}: site_id and count_levels are required")
    kw = {k: _coerce(f"{where}.{k}", v, _SITE_TYPES[k]) for k, v in data.items() if k in _SITE_TYPES}
    for k in ("count_levels", "voxel_anisotropy"):
        if k in data:
            if not isinstance(data[k], list):
                raise ConfigError(f"{where}.{k}: expected a list")
            kw[k] = tuple(_coerce(f"{where}.{k}", v, float) for v in data[k])
    return SiteProfile(**kw)


def parse(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return from_dict(data or {})


def load(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def save(config: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render(config))
