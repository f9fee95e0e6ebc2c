"""Experiment configuration: sectioned ``key = value`` text or the same shape in JSON.

Every section maps onto a frozen dataclass. Unknown sections or keys, bad
values and inconsistent scenario/method pairs all raise
:class:`~fuia_lab.errors.ConfigError`, which the CLI turns into exit code 2.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, get_type_hints

from .defense import DefenseConfig
from .errors import ConfigError
from .fed import FLConfig
from .unlearn import METHOD_SCENARIOS, METHODS, SCENARIOS


@dataclass(frozen=True)
class ExperimentSection:
    id: str = "fuia"
    seed: int = 0
    trials: int = 1
    workers: int = 1
    out: str = "runs"


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # synthetic | pnm | idx
    path: str = ""
    labels_path: str = ""
    classes: int = 10
    per_class: int = 40
    shape: tuple[int, ...] = (1, 8, 8)
    heldout_per_class: int = 20
    pretrain_fraction: float = 0.8  # 0 disables central pretraining
    pretrain_epochs: int = 30
    pretrain_lr: float = 0.5
    pretrain_batch: int = 32
    partition: str = "count"  # iid | count | dirichlet
    per_client: int = 8
    dirichlet_alpha: float = 0.5


@dataclass(frozen=True)
class ModelSection:
    hidden: tuple[int, ...] = (32,)
    conv_channels: tuple[int, ...] = ()
    conv_kernel: int = 3
    conv_stride: int = 1
    activation: str = "sigmoid"


@dataclass(frozen=True)
class FLSection:
    clients: int = 10
    participation: float = 0.5
    local_epochs: int = 3
    rounds: int = 10
    lr: float = 0.1
    aggregation: str = "fedavg"
    batch_size: int = 0


@dataclass(frozen=True)
class UnlearnSection:
    scenario: str = "sample"
    method: str = "approx"
    target_clients: int = 1  # sample scenario: clients that file a request
    forget_samples: int = 1  # per target client
    forget_clients: int = 1
    forget_classes: int = 1
    ascent_epochs: int = 2
    finetune_rounds: int = -1  # -1 = method default
    rounds: int = -1  # retraining rounds; -1 = training round count
    calibration_epochs: int = 1
    prune_fraction: float = 0.1


@dataclass(frozen=True)
class AttackSection:
    iterations: int = 300
    lr: float = 0.1
    alpha: float = 1e-2
    gamma: float = 0.1
    restarts: int = 1
    label_mode: str = "known"
    beta: float = 0.5
    muia: bool = True
    baseline: bool = True


@dataclass(frozen=True)
class DefenseSection:
    kind: str = "none"
    p: float = 0.0
    std: float = 0.0
    phases: tuple[str, ...] = ("training", "unlearning")


@dataclass(frozen=True)
class ReportSection:
    plots: bool = True
    timings: bool = False  # fill runtime_s with wall-clock seconds (breaks byte-identical reruns)
    images: bool = True


SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "model": ModelSection,
    "fl": FLSection,
    "unlearn": UnlearnSection,
    "attack": AttackSection,
    "defense": DefenseSection,
    "report": ReportSection,
}

# Sections whose values reach each stage's artifacts; used for stale checks.
STAGE_SECTIONS = {
    "train": ("data", "model", "fl", "defense"),
    "unlearn": ("data", "model", "fl", "defense", "unlearn"),
    "attack": ("data", "model", "fl", "defense", "unlearn", "attack"),
}


@dataclass(frozen=True)
class Config:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    fl: FLSection = field(default_factory=FLSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    report: ReportSection = field(default_factory=ReportSection)

    def __post_init__(self):
        _validate(self)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: _jsonable(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def stage_hash(self, stage: str) -> str:
        """Digest of the sections that feed ``stage`` (the experiment seed included)."""
        payload = {name: self.to_dict()[name] for name in STAGE_SECTIONS[stage]}
        payload["seed"] = self.experiment.seed
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def updated(self, changes: dict[str, dict[str, Any]]) -> "Config":
        """A copy with ``{section: {key: value}}`` applied and revalidated."""
        data = self.to_dict()
        for section, values in changes.items():
            if section not in data:
                raise ConfigError(f"unknown section {section!r}")
            data[section].update(values)
        return from_dict(data)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "Config":
        exp = self.experiment
        if seed is not None:
            exp = replace(exp, seed=int(seed))
        if out is not None:
            exp = replace(exp, out=str(out))
        return replace(self, experiment=exp)

    def fl_config(self, seed: int) -> FLConfig:
        f = self.fl
        return FLConfig(
            n_clients=f.clients, participation=f.participation, local_epochs=f.local_epochs,
            rounds=f.rounds, lr=f.lr, aggregation=f.aggregation, batch_size=f.batch_size, seed=seed,
        )

    def defense_config(self) -> DefenseConfig:
        d = self.defense
        return DefenseConfig(kind=d.kind, p=d.p, std=d.std, phases=d.phases)

    def to_ini(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format_value(value)}")
            lines.append("")
        return "\n".join(lines)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def _convert(section: str, key: str, raw, kind):
    where = f"[{section}] {key}"
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError(raw)
            return int(str(raw).strip()) if isinstance(raw, str) else int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return str(raw).strip()
        # tuple[int, ...] or tuple[str, ...]
        item = kind.__args__[0]
        items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).replace(" ", "").split(",") if s]
        return tuple(item(v) for v in items)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}") from None


def _build_section(name: str, values: dict) -> Any:
    cls = SECTIONS[name]
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{name}]: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _convert(name, k, v, hints[k]) for k, v in values.items()}
    return cls(**kwargs)


def from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of sections")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    sections = {}
    for name, values in data.items():
        if not isinstance(values, dict):
            raise ConfigError(f"section [{name}] must be a mapping")
        sections[name] = _build_section(name, values)
    return Config(**sections)


def parse_text(text: str, fmt: str = "auto") -> Config:
    """Parse configuration text; ``fmt`` is ``ini``, ``json`` or ``auto``."""
    if fmt == "auto":
        fmt = "json" if text.lstrip().startswith("{") else "ini"
    if fmt == "json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON configuration: {exc}") from None
        return from_dict(data)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"invalid configuration text: {exc}") from None
    return from_dict({s: dict(parser.items(s)) for s in parser.sections()})


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    return parse_text(text, "json" if path.suffix == ".json" else "auto")


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate(cfg: Config) -> None:
    e, d, m, f, u, a, df = cfg.experiment, cfg.data, cfg.model, cfg.fl, cfg.unlearn, cfg.attack, cfg.defense
    _check(e.trials >= 1, "[experiment] trials must be at least 1")
    _check(e.workers >= 1, "[experiment] workers must be at least 1")
    _check(d.source in ("synthetic", "pnm", "idx"), f"[data] unknown source {d.source!r}")
    _check(d.source == "synthetic" or bool(d.path), "[data] path is required for file sources")
    if d.source != "synthetic":
        _check(Path(d.path).exists(), f"[data] path {d.path!r} does not exist")
        _check(not d.labels_path or Path(d.labels_path).exists(), f"[data] labels_path {d.labels_path!r} does not exist")
    _check(d.classes >= 2, "[data] classes must be at least 2")
    _check(d.per_class >= 1 and d.heldout_per_class >= 0, "[data] per_class must be positive")
    _check(len(d.shape) == 3 and all(s >= 1 for s in d.shape), "[data] shape must be C,H,W")
    _check(0.0 <= d.pretrain_fraction < 1.0, "[data] pretrain_fraction must lie in [0, 1)")
    _check(d.partition in ("iid", "count", "dirichlet"), f"[data] unknown partition {d.partition!r}")
    _check(d.per_client >= 1 and d.dirichlet_alpha > 0, "[data] per_client and dirichlet_alpha must be positive")
    _check(m.activation in ("sigmoid", "tanh", "softplus"), "[model] activation must be smooth (sigmoid, tanh, softplus)")
    _check(all(w >= 1 for w in m.hidden + m.conv_channels), "[model] layer widths must be positive")
    _check(f.clients >= 1 and f.rounds >= 1 and f.local_epochs >= 0 and f.batch_size >= 0, "[fl] bad sizes")
    _check(0.0 < f.participation <= 1.0, "[fl] participation must lie in (0, 1]")
    _check(f.aggregation in ("fedavg", "fedsgd"), f"[fl] unknown aggregation {f.aggregation!r}")
    _check(f.lr > 0, "[fl] lr must be positive")
    _check(u.scenario in SCENARIOS, f"[unlearn] unknown scenario {u.scenario!r}")
    _check(u.method in METHODS, f"[unlearn] unknown method {u.method!r}")
    _check(
        u.scenario in METHOD_SCENARIOS[u.method],
        f"[unlearn] method {u.method!r} does not handle the {u.scenario!r} scenario",
    )
    _check(1 <= u.target_clients <= f.clients, "[unlearn] target_clients out of range")
    _check(u.forget_samples >= 1, "[unlearn] forget_samples must be at least 1")
    _check(1 <= u.forget_clients < f.clients, "[unlearn] forget_clients must leave at least one client")
    _check(1 <= u.forget_classes < d.classes, "[unlearn] forget_classes must satisfy 1 <= k < classes")
    _check(u.finetune_rounds >= -1 and u.rounds >= -1 and u.rounds != 0, "[unlearn] bad round override")
    _check(0.0 <= u.prune_fraction <= 1.0, "[unlearn] prune_fraction must lie in [0, 1]")
    if u.scenario == "sample" and d.partition == "count":
        _check(u.forget_samples <= d.per_client, "[unlearn] forget_samples exceeds per_client")
    _check(a.iterations >= 0 and a.restarts >= 1 and a.lr > 0, "[attack] bad optimizer settings")
    _check(a.alpha >= 0, "[attack] alpha must be non-negative")
    _check(0.0 <= a.gamma <= 1.0 and 0.0 <= a.beta <= 1.0, "[attack] gamma and beta must lie in [0, 1]")
    _check(a.label_mode in ("known", "inferred"), f"[attack] unknown label_mode {a.label_mode!r}")
    _check(df.kind in ("none", "prune", "perturb"), f"[defense] unknown kind {df.kind!r}")
    _check(0.0 <= df.p <= 1.0 and df.std >= 0, "[defense] p must lie in [0, 1] and std >= 0")
    _check(set(df.phases) <= {"training", "unlearning"}, "[defense] phases must be training and/or unlearning")
