"""Run configuration: a flat ``key = value`` text format with ``#`` comments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .ssl import DEFAULT_ZOO, hidden_dims

MODES = ("fedfoa", "local-only", "fedavg")
DATASETS = ("synthetic", "cifar10")

# file key -> attribute name, where they differ
_KEY_ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "fedfoa"
    num_clients: int = 4
    archs: tuple[str, ...] = DEFAULT_ZOO
    rounds: int = 30
    batches_per_round: int = 25
    batch_size: int = 64
    projection_dim: int = 16
    lr: float = 0.05
    tau: float = 0.5
    lam: float = 0.01
    t_warm: int = 5
    seed: int = 0
    dataset: str = "synthetic"
    data_path: str = ""
    num_classes: int = 8
    input_dim: int = 32
    samples_per_class: int = 200
    test_per_class: int = 100
    noise_scale: float = 0.3
    aug_noise: float = 0.1
    aug_dropout: float = 0.1
    normalize_before_qr: bool = False
    squared_residual: bool = True
    peers_per_batch: int = 0
    probe_every: int = 5
    probe_epochs: int = 100
    probe_lr: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.archs, str):
            self.archs = tuple(a.strip() for a in self.archs.split(",") if a.strip())
        else:
            self.archs = tuple(self.archs)

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        for name in ("num_clients", "batches_per_round", "batch_size", "projection_dim",
                     "num_classes", "input_dim", "samples_per_class", "probe_every", "probe_epochs",
                     "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.test_per_class < 1:
            raise ConfigError("test_per_class must be positive")
        if self.batch_size < self.projection_dim:
            raise ConfigError(
                f"batch_size ({self.batch_size}) must be >= projection_dim ({self.projection_dim})"
                " for the QR factorization"
            )
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.t_warm < 0:
            raise ConfigError("t_warm must be >= 0")
        if self.lr <= 0 or self.tau <= 0 or self.probe_lr <= 0:
            raise ConfigError("lr, tau and probe_lr must be positive")
        if self.peers_per_batch < 0:
            raise ConfigError("peers_per_batch must be >= 0 (0 means all peers)")
        if not 0 <= self.aug_dropout <= 1 or self.aug_noise < 0 or self.noise_scale < 0:
            raise ConfigError("augmentation/noise settings out of range")
        if not self.archs:
            raise ConfigError("archs must list at least one architecture")
        for a in self.archs:
            try:
                hidden_dims(a)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.dataset == "cifar10" and not self.data_path:
            raise ConfigError("dataset = cifar10 needs data_path")
        return self

    def arch_for(self, client_id: int) -> str:
        return self.archs[client_id % len(self.archs)]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # --- text format ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            key = next((k for k, v in _KEY_ALIASES.items() if v == f.name), f.name)
            lines.append(f"{key} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        return apply_overrides(cls(), values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(kind, key: str, value: str):
    try:
        if kind is bool:
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


_FIELD_TYPES = {
    f.name: {"int": int, "float": float, "bool": bool}.get(f.type, str)
    for f in dataclasses.fields(RunConfig)
}


def config_keys() -> list[str]:
    return [next((k for k, v in _KEY_ALIASES.items() if v == name), name) for name in _FIELD_TYPES]


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    """Return a copy of ``cfg`` with textual ``values`` (file keys) applied."""
    changes = {}
    for key, value in values.items():
        name = _KEY_ALIASES.get(key, key).replace("-", "_")
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        changes[name] = _parse(_FIELD_TYPES[name], key, value) if isinstance(value, str) else value
    return dataclasses.replace(cfg, **changes)
