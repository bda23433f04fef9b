"""System and run configuration, named profiles, and JSON loading."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration value or file.  ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


def _split_ratio(ratio: int) -> tuple[int, int]:
    """Split an oversampling ratio into per-axis factors, x axis first and larger."""
    ry = int(math.isqrt(ratio))
    while ratio % ry:
        ry -= 1
    return ratio // ry, ry


@dataclass
class SystemConfig:
    """Array sizes, channel statistics and grid sizes of one scenario.

    ``seed`` fixes the sensing design (IRS phases, combiners, sensor
    placement), so training and test sets drawn with different data seeds
    still share the same measurement matrix.
    """

    n_b: int = 8
    n_ix: int = 4
    n_iy: int = 4
    k: int = 4
    u: int = 1
    t: int = 8
    t_i: int = 8
    carrier_hz: float = 100e9
    tau_max: float = 100e-9
    l_pf: int = 2
    l_pg: int = 1
    g_b: int = 16
    g_i: int = 64
    g_u: int = 1
    snr_db: float = 15.0
    seed: int = 2024
    mode: str = "passive"
    on_grid: bool = True
    rolloff: float = 0.8
    pulse_half: int = 4

    @property
    def n_i(self) -> int:
        return self.n_ix * self.n_iy

    @property
    def n_s(self) -> int:
        # one RF chain per UE
        return self.u

    @property
    def m(self) -> int:
        return self.t * self.n_s if self.mode == "passive" else self.t_i

    @property
    def g_split(self) -> tuple[int, int]:
        rx, ry = _split_ratio(self.g_i // self.n_i)
        return self.n_ix * rx, self.n_iy * ry

    @property
    def g(self) -> int:
        return self.g_i * self.g_b * self.g_u if self.mode == "passive" else self.g_u * self.g_i

    @property
    def ts(self) -> float:
        return self.tau_max / max(self.k - 1, 1)

    def validate(self) -> None:
        for name in ("n_b", "n_ix", "n_iy", "k", "u", "t", "t_i", "g_b", "g_i", "g_u"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.l_pf <= 0 or self.l_pg <= 0:
            raise ConfigError("path counts l_pf and l_pg must be positive")
        if self.mode not in ("passive", "hybrid"):
            raise ConfigError(f"mode must be 'passive' or 'hybrid', got {self.mode!r}")
        if self.g_u != 1:
            raise ConfigError("only g_u = 1 is supported")
        if self.g_i % self.n_i:
            raise ConfigError(f"g_i={self.g_i} must be a multiple of n_i={self.n_i}")
        if self.tau_max <= 0 or self.carrier_hz <= 0:
            raise ConfigError("tau_max and carrier_hz must be positive")
        if not 0.0 <= self.rolloff <= 1.0:
            raise ConfigError("rolloff must lie in [0, 1]")
        if self.mode == "hybrid" and self.t_i > self.n_i:
            raise ConfigError(f"t_i={self.t_i} exceeds the number of IRS elements {self.n_i}")
        if self.t * self.n_s < 1:
            raise ConfigError("at least one pilot measurement is required")


@dataclass
class NetConfig:
    """Unrolled-network hyperparameters."""

    layers: int = 3
    l_d: int = 2
    l_di: int = 2
    onsager_norm: str = "sqrtM"
    shrinkage: str = "entry"
    residual: bool = True
    use_da: bool = True

    def validate(self) -> None:
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        if self.l_d < 1 or self.l_di < 1:
            raise ConfigError("l_d and l_di must be >= 1")
        if self.onsager_norm not in ("sqrtM", "M"):
            raise ConfigError("onsager_norm must be 'sqrtM' or 'M'")
        if self.shrinkage not in ("entry", "row"):
            raise ConfigError("shrinkage must be 'entry' or 'row'")


@dataclass
class TrainConfig:
    """Optimizer, epoch budgets and dataset sizes."""

    epochs: int = 8
    refine_epochs: int | None = None
    batch: int = 32
    lr: float = 1e-3
    lr_lambda: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    train_count: int = 2000
    test_count: int = 200
    val_fraction: float = 0.1
    amp_iters: int = 10
    swomp_max_iter: int = 100

    @property
    def refine(self) -> int:
        return self.epochs if self.refine_epochs is None else self.refine_epochs

    def validate(self) -> None:
        if self.epochs < 0 or self.refine < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if not self.lr > 0 or not self.lr_lambda > 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        self.betas = tuple(self.betas)
        if len(self.betas) != 2:
            raise ConfigError("betas must have two entries")


@dataclass
class RunConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    network: NetConfig = field(default_factory=NetConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    profile: str = "desk"
    seed: int = 7

    def validate(self) -> "RunConfig":
        self.system.validate()
        self.network.validate()
        self.training.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "desk": {
        "system": {},
        "network": {},
        "training": {},
    },
    "paper": {
        "system": dict(n_b=16, n_ix=8, n_iy=8, k=16, u=4, t=32, t_i=32, l_pf=5, l_pg=5,
                       g_b=32, g_i=256, on_grid=False),
        "network": dict(layers=6, l_d=3, l_di=3),
        "training": dict(epochs=10000, train_count=20000, test_count=2000),
    },
}

SECTIONS = {"system": SystemConfig, "network": NetConfig, "training": TrainConfig}


def profile_config(name: str = "desk") -> RunConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
    prof = PROFILES[name]
    cfg = RunConfig(system=SystemConfig(**prof["system"]), network=NetConfig(**prof["network"]),
                    training=TrainConfig(**prof["training"]), profile=name)
    return cfg.validate()


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def _coerce(cls, name: str, value):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    ftype = str(ftype)
    if "bool" in ftype:
        if not isinstance(value, bool):
            raise TypeError("expected true or false")
        return value
    if ftype.startswith("int") and "None" not in ftype:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    if ftype == "str" and not isinstance(value, str):
        raise TypeError("expected a string")
    if "None" in ftype and value is not None and (isinstance(value, bool) or not isinstance(value, int)):
        raise TypeError("expected an integer or null")
    return value


def config_from_dict(data: dict, text: str = "", path: str | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from parsed JSON, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object", 1, path)
    allowed = {"profile", "seed", *SECTIONS}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r}", _line_of(text, key), path)
    cfg = profile_config(data.get("profile", "desk"))
    if "seed" in data:
        try:
            cfg.seed = _coerce(RunConfig, "seed", data["seed"])
        except TypeError as exc:
            raise ConfigError(f"seed: {exc}", _line_of(text, "seed"), path) from None
    for section, cls in SECTIONS.items():
        block = data.get(section, {})
        if not isinstance(block, dict):
            raise ConfigError(f"{section} must be an object", _line_of(text, section), path)
        target = getattr(cfg, section)
        names = {f.name for f in fields(cls)}
        for key, value in block.items():
            if key not in names:
                raise ConfigError(f"unknown key {section}.{key}", _line_of(text, key), path)
            try:
                setattr(target, key, _coerce(cls, key, value))
            except TypeError as exc:
                raise ConfigError(f"{section}.{key}: {exc}", _line_of(text, key), path) from None
    try:
        cfg.validate()
    except ConfigError as exc:
        msg = str(exc)
        key = next((n for n in _all_field_names() if n in msg), None)
        raise ConfigError(msg, _line_of(text, key) if key else None, path) from None
    return cfg


def _all_field_names() -> list[str]:
    names = [f.name for cls in SECTIONS.values() for f in fields(cls)]
    return sorted(names, key=len, reverse=True)


def load_config(path: str | os.PathLike) -> RunConfig:
    path = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", exc.lineno, path) from None
    return config_from_dict(data, text, path)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
