"""Experiment configuration: one YAML file with per-stage sections.

Every field has a default, unknown keys are rejected with the dotted key
in the message, and ``section.key=value`` overrides are applied on top.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .diffusion import ConfigurationError
from .evo import EvoConfig
from .experiments import FIG2_MIXTURE


@dataclass
class MixtureSpec:
    weights: list = field(default_factory=lambda: list(FIG2_MIXTURE["weights"]))
    means: list = field(default_factory=lambda: [list(m) for m in FIG2_MIXTURE["means"]])
    variances: list = field(default_factory=lambda: list(FIG2_MIXTURE["variances"]))
    labels: list = field(default_factory=lambda: list(FIG2_MIXTURE["labels"]))


@dataclass
class BlockNetSpec:
    D: int = 1
    d: int = 8
    N: int = 8
    n_classes: int = 2
    hidden: int | None = None
    embed_scale: float = 0.3
    readout_scale: float = 0.5
    zero_blocks: bool = False
    seed: int = 0


@dataclass
class ModelSection:
    type: str = "mixture"  # mixture | blocknet
    cond: int | None = 1
    mixture: MixtureSpec = field(default_factory=MixtureSpec)
    blocknet: BlockNetSpec = field(default_factory=BlockNetSpec)


@dataclass
class NoiseSection:
    kind: str = "linear-beta"
    T_max: int = 1000
    params: list | None = None


@dataclass
class GridSection:
    T: int = 50
    T_ref: int = 1000


@dataclass
class GuidanceSection:
    w_const: float = 1.5
    tau: float | None = None  # None: 0.1 * w_const
    w_max: float = 3.0

    @property
    def tau_value(self) -> float:
        return 0.1 * self.w_const if self.tau is None else self.tau


@dataclass
class EvoSection:
    P: int = 16
    G: int = 10
    sigma0: float = 0.5
    eta: float = 1.0
    lam: float | None = None
    n_probes: int = 32
    w_init: float | None = None
    max_active: int | None = None
    return_best: bool = True


@dataclass
class CacheSection:
    refresh_period: int = 2
    ridge: float = 1e-6
    guidance_rule: bool = True
    n_calib: int = 256
    active: list = field(default_factory=lambda: [2, 6, 11, 17, 24, 31, 39, 46])
    w_active: float = 2.0


@dataclass
class RankSection:
    K: int = 4
    r_min: int = 2
    r_max: int | None = None  # None: hidden width d
    budget: int | None = None  # None: K * r_max * 3 // 4
    max_sweeps: int = 3
    n_eval: int = 64
    target_weight: float = 0.0


@dataclass
class SampleSection:
    steps: int = 1000
    w: float | None = None  # None: guidance.w_const
    schedule: str | None = None  # path to a schedule.json
    n_samples: int = 10_000


@dataclass
class Fig2Section:
    n_samples: int = 10_000
    n_random: int = 10
    T_const: int = 1000


@dataclass
class ExperimentConfig:
    name: str = "default"
    seed: int = 0
    out: str = "out"
    workers: int | None = None  # None: available parallelism
    model: ModelSection = field(default_factory=ModelSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    grid: GridSection = field(default_factory=GridSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    evo: EvoSection = field(default_factory=EvoSection)
    cache: CacheSection = field(default_factory=CacheSection)
    ranks: RankSection = field(default_factory=RankSection)
    sample: SampleSection = field(default_factory=SampleSection)
    fig2: Fig2Section = field(default_factory=Fig2Section)

    @property
    def out_dir(self) -> Path:
        return Path(self.out) / self.name

    @property
    def n_workers(self) -> int:
        return self.workers or os.cpu_count() or 1

    def evo_config(self) -> EvoConfig:
        e, g = self.evo, self.guidance
        try:
            return EvoConfig(P=e.P, G=e.G, sigma0=e.sigma0, eta=e.eta, lam=e.lam, tau=g.tau_value, w_max=g.w_max,
                             w_const=g.w_const, w_init=e.w_init, T=self.grid.T, T_ref=self.grid.T_ref,
                             n_probes=e.n_probes, seed=self.seed, return_best=e.return_best,
                             max_active=e.max_active)
        except ValueError as err:
            raise ConfigurationError(f"evo: {err}") from err

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Settings for the four-panel mixture comparison.
FIG2_PRESET = {
    "name": "fig2",
    "grid": {"T": 50, "T_ref": 1000},
    "guidance": {"w_const": 1.5, "tau": 1.0, "w_max": 8.0},
    "evo": {"P": 32, "G": 100, "sigma0": 2.0, "eta": 1.0, "lam": 0.02, "n_probes": 128,
            "w_init": 1.5, "max_active": 8},
}

PRESETS = {"fig2": FIG2_PRESET}


def _build(cls, data, prefix: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section {prefix or '<root>'!r} must be a mapping")
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in known:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, dotted + ".")
        else:
            kwargs[key] = _coerce(value, known[key].type, dotted)
    return cls(**kwargs)


def _coerce(value, annotation: str, dotted: str):
    # YAML 1.1 reads "1e300" as a string; numeric fields accept it anyway
    kinds = {a.strip() for a in str(annotation).split("|")}
    if value is None:
        if "None" not in kinds:
            raise ConfigurationError(f"config key {dotted!r} may not be null")
        return None
    if "float" in kinds and not isinstance(value, bool):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"config key {dotted!r} expects a number, got {value!r}") from None
    if "int" in kinds and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ConfigurationError(f"config key {dotted!r} expects an integer, got {value!r}")
    if "bool" in kinds and not isinstance(value, bool):
        raise ConfigurationError(f"config key {dotted!r} expects true/false, got {value!r}")
    return value


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` to a nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw else None
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def load_config(path=None, overrides=(), preset: str | None = None) -> ExperimentConfig:
    data: dict = {}
    if preset is not None:
        data = _merge(data, PRESETS[preset])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigurationError(f"cannot read config {path}: {err}") from err
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigurationError(f"malformed config {path}: {err}") from err
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a mapping at the top level")
        data = _merge(data, loaded)
    for ov in overrides:
        data = _merge(data, parse_override(ov))
    try:
        return _build(ExperimentConfig, data, "")
    except TypeError as err:
        raise ConfigurationError(str(err)) from err
