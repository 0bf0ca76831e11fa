"""Experiment configuration files.

INI syntax (``key = value`` lines under ``[section]`` headers). Sections:

``[experiment]``  seed, output_dir
``[network]``     preset (desk | face) or an explicit layer list; input_shape, classes
``[layer NAME]``  one per layer when no preset is used
``[train]``       any :class:`TrainConfig` field except ``seed``
``[plan]``        stages, criterion, lambda, any_order, l1_coeff, check_every, brp_steps
``[data]``        kind = synthetic | idx_files and its source keys

Unknown sections or keys are errors. :func:`dump_config` writes every value
explicitly, and loading its output reproduces the same configuration.
"""
from __future__ import annotations

import configparser
from fractions import Fraction
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import architectures
from .layers import LayerSpec, NetworkSpec
from .pipeline import PlanError, SparsityPlan
from .training import TrainConfig


class ConfigError(ValueError):
    pass


PRESETS = {
    "desk": architectures.desk_spec,
    "face": architectures.face_baseline_spec,
}


@dataclass(frozen=True)
class DatasetSource:
    kind: str = "synthetic"
    generator: str = "shapes"
    samples: int = 6000
    image_hw: tuple = (24, 20)
    channels: int = 1
    classes: int = 10
    noise: float = 0.25
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    test_fraction: float = 0.2
    stats_fraction: float = 0.1
    stats_min: int = 256

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx_files"):
            raise ConfigError(f"data.kind must be synthetic or idx_files, got {self.kind!r}")
        if self.kind == "synthetic":
            if self.generator != "shapes":
                raise ConfigError(f"data.generator: unknown generator {self.generator!r}")
            if self.samples < 2:
                raise ConfigError("data.samples must be >= 2")
        elif not (self.train_images and self.train_labels):
            raise ConfigError("data.train_images and data.train_labels are required for idx_files")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must be in [0, 1)")
        if not 0.0 <= self.stats_fraction < 1.0:
            raise ConfigError("data.stats_fraction must be in [0, 1)")


@dataclass(frozen=True)
class PruneOptions:
    criterion: str = "correlation"
    lam: float = 0.75
    any_order: bool = False
    l1_coeff: float = 1e-4
    check_every: int = 200
    brp_steps: int = 2000

    def policy_overrides(self) -> dict:
        return {"l1_coeff": self.l1_coeff, "check_every": self.check_every, "brp_steps": self.brp_steps}


@dataclass(frozen=True)
class ExperimentConfig:
    spec: NetworkSpec
    train: TrainConfig
    plan: SparsityPlan
    data: DatasetSource
    prune: PruneOptions = field(default_factory=PruneOptions)
    seed: int = 0
    output_dir: str = "runs"
    preset: str | None = None

    def with_plan(self, text: str) -> "ExperimentConfig":
        plan = SparsityPlan.parse(text, self.prune.criterion, self.prune.lam, self.prune.any_order)
        try:
            plan.validate(self.spec)
        except PlanError as exc:
            raise ConfigError(f"plan.stages: {exc}") from None
        return replace(self, plan=plan)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


# --- value parsing -----------------------------------------------------------


def _as_bool(text, where):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {text!r}")


def _as_int(text, where):
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {text!r}") from None


def _as_float(text, where):
    try:
        return float(Fraction(text.strip())) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{where}: expected a number, got {text!r}") from None


def _as_ints(text, where):
    try:
        return tuple(int(p) for p in text.replace("x", ",").split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{where}: expected comma-separated integers, got {text!r}") from None


def _convert(kind, text, where):
    if kind is bool:
        return _as_bool(text, where)
    if kind is int:
        return _as_int(text, where)
    if kind is float:
        return _as_float(text, where)
    if kind is tuple:
        return _as_ints(text, where)
    return text.strip()


def _fill(cls, section, name, skip=(), rename=None):
    """Build ``cls`` from a config section, rejecting unknown keys."""
    rename = rename or {}
    known = {rename.get(f.name, f.name): f for f in fields(cls) if f.name not in skip}
    kwargs = {}
    for key, text in section.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        f = known[key]
        default = f.default
        kind = type(default) if default is not None else str
        kwargs[f.name] = _convert(kind, text, f"{name}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{name}] {exc}") from None


_LAYER_KEYS = {"kind": str, "kernel": tuple, "stride": int, "padding": int, "out_channels": int,
               "dropout_rate": float}


def _layer_from_section(name, section):
    kwargs = {}
    for key, text in section.items():
        if key not in _LAYER_KEYS:
            raise ConfigError(f"[layer {name}] unknown key {key!r}")
        kwargs[key] = _convert(_LAYER_KEYS[key], text, f"layer {name}.{key}")
    if "kind" not in kwargs:
        raise ConfigError(f"[layer {name}] missing key 'kind'")
    if "kernel" in kwargs:
        k = kwargs["kernel"]
        kwargs["kernel"] = (k[0], k[0]) if len(k) == 1 else k
    try:
        return LayerSpec(name, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[layer {name}] {exc}") from None


def _network(parser):
    if not parser.has_section("network"):
        raise ConfigError("missing [network] section")
    sec = dict(parser["network"])
    layer_sections = [s for s in parser.sections() if s.startswith("layer ")]
    allowed = {"preset", "input_shape", "classes", "layers"}
    for key in sec:
        if key not in allowed:
            raise ConfigError(f"[network] unknown key {key!r}")
    preset = sec.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"network.preset: unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        if layer_sections or "layers" in sec:
            raise ConfigError("network.preset cannot be combined with explicit layers")
        kwargs = {}
        if "input_shape" in sec:
            h, w, c = _as_ints(sec["input_shape"], "network.input_shape")
            kwargs.update(input_hw=(h, w), channels=c)
        if "classes" in sec:
            kwargs["classes"] = _as_int(sec["classes"], "network.classes")
        try:
            return PRESETS[preset](**kwargs), preset
        except ValueError as exc:
            raise ConfigError(f"[network] {exc}") from None
    for key in ("input_shape", "classes", "layers"):
        if key not in sec:
            raise ConfigError(f"[network] missing key {key!r} (or set a preset)")
    names = [n.strip() for n in sec["layers"].split(",") if n.strip()]
    declared = {s[len("layer "):].strip() for s in layer_sections}
    if set(names) != declared:
        raise ConfigError(f"network.layers and [layer ...] sections disagree: {sorted(set(names) ^ declared)}")
    layers = [_layer_from_section(n, parser[f"layer {n}"]) for n in names]
    try:
        spec = NetworkSpec(_as_ints(sec["input_shape"], "network.input_shape"), layers,
                           _as_int(sec["classes"], "network.classes"))
    except ValueError as exc:
        raise ConfigError(f"[network] {exc}") from None
    return spec, None


_SECTIONS = {"experiment", "network", "train", "plan", "data"}


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="\x00unused", inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    for s in parser.sections():
        if s not in _SECTIONS and not s.startswith("layer "):
            raise ConfigError(f"unknown section [{s}]")
    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    for key in exp:
        if key not in ("seed", "output_dir"):
            raise ConfigError(f"[experiment] unknown key {key!r}")
    seed = _as_int(exp.get("seed", "0"), "experiment.seed")
    output_dir = exp.get("output_dir", "runs").strip()
    spec, preset = _network(parser)
    train = _fill(TrainConfig, parser["train"] if parser.has_section("train") else {}, "train", skip=("seed",))
    train = replace(train, seed=seed)
    plan_sec = dict(parser["plan"]) if parser.has_section("plan") else {}
    stages = plan_sec.pop("stages", "")
    prune = _fill(PruneOptions, plan_sec, "plan", rename={"lam": "lambda"})
    try:
        plan = SparsityPlan.parse(stages, prune.criterion, prune.lam, prune.any_order).validate(spec)
        # policy checks (criterion names, lambda range) happen when the stages are built
    except PlanError as exc:
        raise ConfigError(f"plan.stages: {exc}") from None
    except ValueError as exc:  # NotPrunableError and friends
        raise ConfigError(f"plan.stages: {exc}") from None
    data_sec = dict(parser["data"]) if parser.has_section("data") else {}
    data = _fill(DatasetSource, data_sec, "data")
    inferred = {"image_hw": spec.input_shape[:2], "channels": spec.input_shape[2], "classes": spec.classes}
    data = replace(data, **{k: v for k, v in inferred.items() if k not in data_sec})
    if data.kind == "synthetic" and (data.image_hw, data.channels) != (spec.input_shape[:2], spec.input_shape[2]):
        raise ConfigError(f"data.image_hw/channels {data.image_hw}/{data.channels} do not match "
                          f"network input {spec.input_shape}")
    return ExperimentConfig(spec, train, plan, data, prune, seed, output_dir, preset)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Fully explicit INI text for ``cfg``."""
    lines = ["[experiment]", f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}", "", "[network]"]
    spec = cfg.spec
    if cfg.preset is not None:
        lines += [f"preset = {cfg.preset}", f"input_shape = {_fmt(spec.input_shape)}", f"classes = {spec.classes}"]
    else:
        lines += [f"input_shape = {_fmt(spec.input_shape)}", f"classes = {spec.classes}",
                  "layers = " + ",".join(layer.name for layer in spec.layers)]
        for layer in spec.layers:
            lines += ["", f"[layer {layer.name}]", f"kind = {layer.kind}"]
            if layer.kind in ("conv", "local", "pool"):
                lines += [f"kernel = {_fmt(layer.kernel)}", f"stride = {layer.stride}", f"padding = {layer.padding}"]
            if layer.kind in ("conv", "local", "fc"):
                lines.append(f"out_channels = {layer.out_channels}")
            if layer.kind == "dropout":
                lines.append(f"dropout_rate = {_fmt(layer.dropout_rate)}")
    lines += ["", "[train]"]
    for f in fields(TrainConfig):
        if f.name != "seed":
            lines.append(f"{f.name} = {_fmt(getattr(cfg.train, f.name))}")
    p = cfg.prune
    lines += ["", "[plan]", f"stages = {cfg.plan.to_string(p.criterion, p.lam)}", f"criterion = {p.criterion}",
              f"lambda = {_fmt(p.lam)}", f"any_order = {_fmt(p.any_order)}", f"l1_coeff = {p.l1_coeff!r}",
              f"check_every = {p.check_every}", f"brp_steps = {p.brp_steps}", "", "[data]"]
    for f in fields(DatasetSource):
        lines.append(f"{f.name} = {_fmt(getattr(cfg.data, f.name))}")
    return "\n".join(lines) + "\n"
