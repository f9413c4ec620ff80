"""Experiment configuration in a line-oriented ``dotted.key = value`` format.

Example::

    # two-block toy run
    data.block_sizes = [50, 50]
    round.strategy = fedavg
    train.learning_rate = 0.0004

Values are JSON literals (numbers, ``true``/``false``, quoted strings, nested
arrays); bare words such as ``fedavg`` are read as strings.  ``#`` starts a
comment.  Unknown keys and invalid values raise :class:`ConfigError` naming
the key and line.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from hfgnn.errors import ConfigError, HfgnnError
from hfgnn.federation import ModelConfig, RoundConfig
from hfgnn.gnn import TrainConfig
from hfgnn.graph import SbmSpec
from hfgnn.hmm import HmmModel, default_drift_model

_BARE_WORD = re.compile(r"^[A-Za-z_][\w.\-/]*$")
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class DataConfig:
    block_sizes: tuple[int, ...] = (60,) * 10
    p_in: float = 0.2
    p_out: float = 0.02
    feature_dim: int | None = None
    feature_noise: float = 0.5
    num_clients: int = 10
    alpha: float = 0.3
    client_names: tuple[str, ...] = ()

    def sbm_spec(self, seed: int) -> SbmSpec:
        return SbmSpec(
            tuple(self.block_sizes), self.p_in, self.p_out, self.feature_dim, self.feature_noise, seed
        )

    def validate(self) -> None:
        self.sbm_spec(0).validate()
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1", key="data.num_clients")
        if self.num_clients > sum(self.block_sizes):
            raise ConfigError("num_clients exceeds the number of nodes", key="data.num_clients")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive", key="data.alpha")
        if self.client_names and len(self.client_names) != self.num_clients:
            raise ConfigError("need one client name per client", key="data.client_names")


@dataclass(frozen=True)
class HmmConfig:
    enabled: bool = False
    drift_scale: float = 0.1
    initial: tuple = ()
    transition: tuple = ()
    emission: tuple = ()

    def model(self) -> HmmModel | None:
        if not self.enabled:
            return None
        default = default_drift_model()
        return HmmModel(
            self.initial or default.initial,
            self.transition or default.transition,
            self.emission or default.emission,
        )

    def resolved(self) -> "HmmConfig":
        """Materialise the default drift model's matrices."""
        d = default_drift_model().to_dict()
        return replace(
            self,
            initial=self.initial or _freeze(d["initial"]),
            transition=self.transition or _freeze(d["transition"]),
            emission=self.emission or _freeze(d["emission"]),
        )

    def validate(self) -> None:
        if not self.drift_scale >= 0:
            raise ConfigError("drift_scale must be >= 0", key="hmm.drift_scale")
        if self.enabled:
            try:
                self.model()
            except HfgnnError as exc:
                raise ConfigError(str(exc), key="hmm") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    round: RoundConfig = RoundConfig()
    hmm: HmmConfig = HmmConfig()
    seed: int = 0
    output_dir: str = "runs"
    repetitions: int = 1
    suite_client_counts: tuple[int, ...] = (5, 10, 30)
    suite_strategies: tuple[str, ...] = ("local", "global", "fedavg", "fedprox", "hfgnn")

    @property
    def train(self) -> TrainConfig:
        return self.round.train

    def validate(self) -> None:
        self.data.validate()
        self.round.validate(self.data.num_clients)
        self.hmm.validate()
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1", key="repetitions")
        if not 0 <= self.seed <= _MASK64:
            raise ConfigError("seed must be an unsigned 64-bit integer", key="seed")
        if not self.suite_client_counts or any(k < 1 for k in self.suite_client_counts):
            raise ConfigError("suite client counts must be >= 1", key="suite.client_counts")
        if self.round.train.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive", key="train.learning_rate")
        for s in self.suite_strategies:
            if s not in ("local", "global", "fedavg", "fedprox", "hfgnn"):
                raise ConfigError(f"unknown strategy {s!r}", key="suite.strategies")

    def repetition_seed(self, rep: int) -> int:
        return (self.seed + rep) & _MASK64


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


# key -> (section, field name, kind)
_SCHEMA: dict[str, tuple[str, str, str]] = {
    "seed": ("", "seed", "int"),
    "output_dir": ("", "output_dir", "str"),
    "repetitions": ("", "repetitions", "int"),
    "suite.client_counts": ("", "suite_client_counts", "int_list"),
    "suite.strategies": ("", "suite_strategies", "str_list"),
    "data.block_sizes": ("data", "block_sizes", "int_list"),
    "data.p_in": ("data", "p_in", "float"),
    "data.p_out": ("data", "p_out", "float"),
    "data.feature_dim": ("data", "feature_dim", "opt_int"),
    "data.feature_noise": ("data", "feature_noise", "float"),
    "data.num_clients": ("data", "num_clients", "int"),
    "data.alpha": ("data", "alpha", "float"),
    "data.client_names": ("data", "client_names", "str_list"),
    "round.strategy": ("round", "strategy", "str"),
    "round.num_rounds": ("round", "num_rounds", "int"),
    "round.clients_per_round": ("round", "clients_per_round", "int"),
    "round.propagation_depth": ("round", "propagation_depth", "int"),
    "round.temperature": ("round", "temperature", "float"),
    "round.self_floor": ("round", "self_floor", "float"),
    "round.feature_mix": ("round", "feature_mix", "float"),
    "round.topology_scope": ("round", "topology_scope", "str"),
    "round.weighting": ("round", "weighting", "str"),
    "train.learning_rate": ("train", "learning_rate", "float"),
    "train.batch_size": ("train", "batch_size", "int"),
    "train.local_epochs": ("train", "local_epochs", "int"),
    "train.weight_decay": ("train", "weight_decay", "float"),
    "train.optimizer": ("train", "optimizer", "str"),
    "train.prox_coefficient": ("train", "prox_coefficient", "float"),
    "model.hidden_dim": ("model", "hidden_dim", "int"),
    "model.num_layers": ("model", "num_layers", "int"),
    "hmm.enabled": ("hmm", "enabled", "bool"),
    "hmm.drift_scale": ("hmm", "drift_scale", "float"),
    "hmm.initial": ("hmm", "initial", "matrix"),
    "hmm.transition": ("hmm", "transition", "matrix"),
    "hmm.emission": ("hmm", "emission", "matrix"),
}


def _coerce(key: str, kind: str, raw: Any, line: int | None) -> Any:
    def bad(expected: str) -> ConfigError:
        return ConfigError(f"expected {expected}, got {raw!r}", key=key, line=line)

    is_int = isinstance(raw, int) and not isinstance(raw, bool)
    if kind == "int":
        if not is_int:
            raise bad("an integer")
        return raw
    if kind == "opt_int":
        if raw is None:
            return None
        if not is_int:
            raise bad("an integer or null")
        return raw
    if kind == "float":
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise bad("a number")
        return float(raw)
    if kind == "bool":
        if not isinstance(raw, bool):
            raise bad("true or false")
        return raw
    if kind == "str":
        if not isinstance(raw, str):
            raise bad("a string")
        return raw
    if kind == "int_list":
        if not isinstance(raw, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw):
            raise bad("a list of integers")
        return tuple(raw)
    if kind == "str_list":
        if not isinstance(raw, list) or not all(isinstance(v, str) for v in raw):
            raise bad("a list of strings")
        return tuple(raw)
    if kind == "matrix":
        def numeric(v: Any) -> bool:
            if isinstance(v, list):
                return all(numeric(x) for x in v)
            return isinstance(v, (int, float)) and not isinstance(v, bool)

        if not isinstance(raw, list) or not numeric(raw):
            raise bad("a (nested) array of numbers")
        return _freeze(raw)
    raise AssertionError(kind)


def _parse_value(text: str, key: str, line: int) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        if _BARE_WORD.match(text):
            return text
        raise ConfigError(f"cannot parse value {text!r}", key=key, line=line) from None


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def parse_text(text: str) -> ExperimentConfig:
    """Parse config text into a validated :class:`ExperimentConfig`."""
    values: dict[str, tuple[Any, int]] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", line=lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _SCHEMA:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in values:
            raise ConfigError("duplicate key", key=key, line=lineno)
        kind = _SCHEMA[key][2]
        values[key] = (_coerce(key, kind, _parse_value(value, key, lineno), lineno), lineno)

    sections: dict[str, dict[str, Any]] = {s: {} for s in ("", "data", "round", "train", "model", "hmm")}
    for key, (value, _) in values.items():
        section, name, _ = _SCHEMA[key]
        sections[section][name] = value

    train = TrainConfig(**sections["train"])
    model = ModelConfig(**sections["model"])
    cfg = ExperimentConfig(
        data=DataConfig(**sections["data"]),
        round=RoundConfig(train=train, model=model, **sections["round"]),
        hmm=HmmConfig(**sections["hmm"]),
        **sections[""],
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        if exc.key in values and exc.line is None:
            raise ConfigError(exc.message, key=exc.key, line=values[exc.key][1]) from None
        raise
    return cfg


def parse_config(path: str | Path, resolved_out: str | Path | None = None) -> ExperimentConfig:
    """Read and validate a config file; optionally echo the resolved config."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    cfg = parse_text(text)
    if resolved_out is not None:
        Path(resolved_out).write_text(emit_config(cfg), encoding="utf-8")
    return cfg


def _format(value: Any) -> str:
    if isinstance(value, str):
        return value if _BARE_WORD.match(value) and value not in ("true", "false", "null") else json.dumps(value)
    if isinstance(value, float):
        return repr(value)
    return json.dumps(_thaw(value))


def emit_config(cfg: ExperimentConfig) -> str:
    """Every key with its resolved value, in schema order."""
    cfg = replace(cfg, hmm=cfg.hmm.resolved())
    objs = {
        "": cfg,
        "data": cfg.data,
        "round": cfg.round,
        "train": cfg.round.train,
        "model": cfg.round.model,
        "hmm": cfg.hmm,
    }
    lines = []
    for key, (section, name, _) in _SCHEMA.items():
        lines.append(f"{key} = {_format(getattr(objs[section], name))}")
    return "\n".join(lines) + "\n"


def config_keys() -> list[str]:
    return list(_SCHEMA)


__all__ = [
    "DataConfig",
    "ExperimentConfig",
    "HmmConfig",
    "config_keys",
    "emit_config",
    "parse_config",
    "parse_text",
]
