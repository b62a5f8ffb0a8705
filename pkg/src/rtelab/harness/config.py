"""Experiment configuration with validation and lossless YAML/JSON round-trip."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..transport import EPS_MAX, AbsorptionField, TransportDiscretization
from ..entropy import AMPLITUDE_CAP

__all__ = ["ConfigError", "GridConfig", "AbsorptionConfig", "ExperimentConfig", "load_config", "COMMANDS"]

COMMANDS = ("solve", "matrix", "decay", "diffuse", "entropy", "omega", "probe", "sweep", "kernelcheck")
ABSORPTION_FAMILIES = ("zero", "constant", "radial_bump", "bump")
# keys that do not influence results and stay out of the config hash
_UNHASHED = ("out", "workers")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _as_float(name: str, v: Any) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a number, got {v!r}") from None


def _as_float_list(name: str, v: Any) -> list[float]:
    if isinstance(v, (int, float, str)):
        v = [v]
    return [_as_float(name, x) for x in v]


def _as_int(name: str, v: Any) -> int:
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ConfigError(f"{name}: expected an integer, got {v!r}")
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected an integer, got {v!r}") from None


@dataclass
class GridConfig:
    n_r: int = 48
    n_theta: int = 96
    n_dir: int = 64
    cluster: float = 0.0
    diffusion_n_r: int = 200

    def discretization(self) -> TransportDiscretization:
        return TransportDiscretization(n_r=self.n_r, n_theta=self.n_theta, n_dir=self.n_dir, cluster=self.cluster)

    def validate(self) -> None:
        for name in ("n_r", "n_theta", "n_dir", "diffusion_n_r"):
            if getattr(self, name) < 2:
                raise ConfigError(f"grid.{name} must be at least 2")
        if self.n_dir % 4:
            raise ConfigError("grid.n_dir must be a multiple of 4")
        if not 0 <= self.cluster < 1:
            raise ConfigError("grid.cluster must lie in [0, 1)")


@dataclass
class AbsorptionConfig:
    """Named absorption family: ``zero``, ``constant``, ``radial_bump`` or ``bump``."""

    family: str = "zero"
    amplitude: float = 0.5
    width: float = 0.45
    center: list[float] = field(default_factory=lambda: [0.0, 0.0])

    def field(self) -> AbsorptionField:
        if self.family == "zero":
            return AbsorptionField.zero()
        if self.family == "constant":
            return AbsorptionField.constant(self.amplitude)
        if self.family == "radial_bump":
            return AbsorptionField.radial_bump(self.amplitude, self.width)
        return AbsorptionField.off_center_bump(self.amplitude, self.width, tuple(self.center))

    def validate(self) -> None:
        if self.family not in ABSORPTION_FAMILIES:
            raise ConfigError(f"absorption.family must be one of {ABSORPTION_FAMILIES}, got {self.family!r}")
        if self.family == "zero":
            return
        if not 0 <= self.amplitude <= AMPLITUDE_CAP:
            raise ConfigError(f"absorption.amplitude must lie in [0, {AMPLITUDE_CAP}]")
        if self.family in ("radial_bump", "bump"):
            if not self.width > 0:
                raise ConfigError("absorption.width must be positive")
            if len(self.center) != 2:
                raise ConfigError("absorption.center must have two coordinates")
            if math.hypot(*self.center) + self.width > 1.0:
                raise ConfigError("absorption bump must lie inside the unit disk")


@dataclass
class ExperimentConfig:
    epsilon: list[float] = field(default_factory=lambda: [0.2, 0.1, 0.05])
    sigma_s: float = 1.0
    r0: float = 0.5
    absorption: AbsorptionConfig = field(default_factory=AbsorptionConfig)
    L: int = 6
    s: float = 4.0
    tau: float = -1.0
    grid: GridConfig = field(default_factory=GridConfig)
    modes: list[int] = field(default_factory=lambda: [0, 1, 2])
    interior_radius: float = 0.8
    theta: float = 0.1
    beta: float = 150.0
    q: float = 2.0
    d: int = 2
    c0r: float = 1.0
    delta: list[float] = field(default_factory=lambda: [1e-2, 1e-3, 1e-4, 1e-6])
    omega_t: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0, 5.0, 10.0, 30.0])
    omega_epsilon: list[float] = field(default_factory=lambda: [0.0, 1e-3, 1e-2, 0.1])
    kernel_points: int = 101
    sweep: list[str] = field(default_factory=lambda: ["kernelcheck", "omega", "entropy", "matrix"])
    seed: int = 0
    workers: int = 1
    out: str = "results"

    # ---- validation --------------------------------------------------
    def validate(self) -> ExperimentConfig:
        if not self.epsilon:
            raise ConfigError("epsilon must not be empty")
        for e in self.epsilon:
            if not 0 < e <= EPS_MAX:
                raise ConfigError(f"epsilon values must lie in (0, {EPS_MAX}], got {e}")
        if not self.sigma_s > 0:
            raise ConfigError("sigma_s must be positive")
        if not 0 < self.r0 < 1:
            raise ConfigError("r0 must lie in (0, 1)")
        if self.L < 0:
            raise ConfigError("L must be nonnegative")
        if not self.s > 1:
            raise ConfigError("s must exceed 1")
        if not self.tau < 0:
            raise ConfigError("tau must be negative")
        if any(m < 0 for m in self.modes):
            raise ConfigError("modes must be nonnegative")
        if not 0 < self.interior_radius < 1:
            raise ConfigError("interior_radius must lie in (0, 1)")
        if not 0 < self.theta < 1:
            raise ConfigError("theta must lie in (0, 1)")
        if not self.beta > 0 or not self.q > 0:
            raise ConfigError("beta and q must be positive")
        if self.d != 2:
            raise ConfigError("only d = 2 is supported")
        if not self.c0r > 0:
            raise ConfigError("c0r must be positive")
        for dl in self.delta:
            if not 0 < dl < math.exp(-1):
                raise ConfigError(f"delta values must lie in (0, 1/e), got {dl}")
        if any(t <= 0 for t in self.omega_t):
            raise ConfigError("omega_t values must be positive")
        if any(e < 0 for e in self.omega_epsilon):
            raise ConfigError("omega_epsilon values must be nonnegative")
        if self.kernel_points < 2:
            raise ConfigError("kernel_points must be at least 2")
        for c in self.sweep:
            if c not in COMMANDS or c == "sweep":
                raise ConfigError(f"sweep entries must be commands other than sweep, got {c!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        self.grid.validate()
        self.absorption.validate()
        return self

    # ---- serialization -----------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> ExperimentConfig:
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for k, v in data.items():
            if k == "grid":
                kw[k] = _grid_from(v)
            elif k == "absorption":
                kw[k] = _absorption_from(v)
            elif k in ("epsilon", "delta", "omega_t", "omega_epsilon"):
                kw[k] = _as_float_list(k, v)
            elif k == "modes":
                kw[k] = [_as_int(k, x) for x in (v if isinstance(v, list) else [v])]
            elif k in ("L", "d", "kernel_points", "seed", "workers"):
                kw[k] = _as_int(k, v)
            elif k in ("out",):
                kw[k] = str(v)
            elif k == "sweep":
                kw[k] = [str(x) for x in (v if isinstance(v, list) else [v])]
            else:
                kw[k] = _as_float(k, v)
        return cls(**kw).validate()

    def dumps(self, fmt: str = "yaml") -> str:
        if fmt == "json":
            return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(self.dumps("json" if path.suffix == ".json" else "yaml"))

    def config_hash(self) -> str:
        """Hash of every result-relevant field (output location and worker count excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **kw) -> ExperimentConfig:
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_dict(d)


def _grid_from(v: Any) -> GridConfig:
    if not isinstance(v, dict):
        raise ConfigError("grid must be a mapping")
    known = {f.name for f in fields(GridConfig)}
    if set(v) - known:
        raise ConfigError(f"unknown grid keys: {sorted(set(v) - known)}")
    return GridConfig(**{k: (_as_float(f"grid.{k}", x) if k == "cluster" else _as_int(f"grid.{k}", x)) for k, x in v.items()})


def _absorption_from(v: Any) -> AbsorptionConfig:
    if isinstance(v, str):
        v = {"family": v}
    if not isinstance(v, dict):
        raise ConfigError("absorption must be a mapping or a family name")
    known = {f.name for f in fields(AbsorptionConfig)}
    if set(v) - known:
        raise ConfigError(f"unknown absorption keys: {sorted(set(v) - known)}")
    kw: dict[str, Any] = {}
    for k, x in v.items():
        if k == "family":
            kw[k] = str(x)
        elif k == "center":
            kw[k] = _as_float_list("absorption.center", x)
        else:
            kw[k] = _as_float(f"absorption.{k}", x)
    return AbsorptionConfig(**kw)


def load_config(path=None) -> ExperimentConfig:
    """Read a YAML or JSON config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig().validate()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}".replace("\n", " ")) from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return ExperimentConfig.from_dict(data)
