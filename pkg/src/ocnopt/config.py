"""Run configuration: one JSON document, overridable by dotted keys."""
import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import List, Optional

from .errors import ConfigError


@dataclass
class OptimizerConfig:
    mode: str = "ocnopt-adaptive"
    lr: float = 0.01
    gamma: float = 0.0
    beta: float = 0.1
    feedback: Optional[bool] = None


@dataclass
class CurvatureConfig:
    kind: Optional[str] = None
    eps: float = 1e-8
    ema: Optional[float] = None
    refresh: int = 20
    gamma_mode: str = "additive"
    damping: Optional[float] = None
    pinv_tol: float = 1e-12


@dataclass
class DataConfig:
    kind: str = "spirals"
    n: int = 500
    noise: float = 0.1
    path: Optional[str] = None
    label_column: str = "label"
    task: str = "classification"
    split: List[float] = field(default_factory=lambda: [0.7, 0.15, 0.15])


@dataclass
class NetworkConfig:
    hidden: List[int] = field(default_factory=lambda: [32, 32])
    act: str = "tanh"
    out_act: str = "identity"
    loss: Optional[str] = None
    residual_blocks: int = 0
    residual_width: int = 16
    residual_depth: int = 3
    paths: int = 1
    layers: Optional[list] = None


@dataclass
class TrainLoopConfig:
    epochs: int = 10
    batch_size: int = 32
    eval_every: int = 0
    checkpoint_every: int = 0


@dataclass
class OdeConfig:
    enabled: bool = False
    steps: int = 20
    horizon: float = 1.0
    horizon_opt: bool = False
    penalty_c: float = 0.1
    lr_T: float = 0.1
    t_min: float = 0.05
    t_max: float = 4.0
    hidden: List[int] = field(default_factory=lambda: [16])
    act: str = "tanh"
    augment: int = 0
    horizon_rule: str = "second-order"


@dataclass
class GameConfig:
    players: int = 1
    alignment: str = "fixed:0"
    reward_period: int = 10
    explore: float = 0.05


@dataclass
class TrainConfig:
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    curvature: CurvatureConfig = field(default_factory=CurvatureConfig)
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainLoopConfig = field(default_factory=TrainLoopConfig)
    ode: OdeConfig = field(default_factory=OdeConfig)
    game: GameConfig = field(default_factory=GameConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        o = self.optimizer
        if not o.lr > 0:
            raise ConfigError("optimizer.lr must be > 0")
        if not 0 < o.beta <= 1:
            raise ConfigError("optimizer.beta must lie in (0, 1]")
        if o.gamma < 0:
            raise ConfigError("optimizer.gamma must be >= 0")
        if self.curvature.eps <= 0:
            raise ConfigError("curvature.eps must be > 0")
        if self.train.batch_size < 1 or self.train.epochs < 0:
            raise ConfigError("train.batch_size must be >= 1 and train.epochs >= 0")
        if self.game.players < 1:
            raise ConfigError("game.players must be >= 1")
        if self.ode.enabled and self.ode.steps < 4:
            raise ConfigError("ode.steps must be >= 4")

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d or {}, "")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)

    def with_overrides(self, assignments):
        """Apply ``["a.b=value", ...]``; values parse as JSON, else as strings."""
        d = copy.deepcopy(self.to_dict())
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return TrainConfig.from_dict(d)


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {}
    for name, f in known.items():
        if name not in d:
            continue
        default = f.default_factory() if callable(f.default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), d[name], prefix + name + ".")
        else:
            kwargs[name] = d[name]
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
