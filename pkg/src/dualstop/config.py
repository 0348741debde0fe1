"""Run configuration: a flat ``section.key = value`` text format.

Lines hold one assignment each; ``#`` starts a comment.  Vectors are
comma-separated and matrix rows are separated by ``;``.  Every key must be
known, every model key must be present, and each block is validated by the
type it configures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dual import SolverConfig
from .model import ModelParams, ParameterError
from .montecarlo import SimConfig


class ConfigError(ValueError):
    """Malformed or invalid configuration, with line and key diagnostics."""

    def __init__(self, message: str, line: Optional[int] = None, key: Optional[str] = None):
        self.line = line
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key '{key}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class GridSpec:
    n_space: int = 400
    n_time: int = 400
    n_x: int = 400
    y_min: Optional[float] = None
    y_max: Optional[float] = None

    def __post_init__(self):
        if self.n_space < 50 or self.n_time < 50:
            raise ValueError("n_space and n_time must be at least 50")
        if self.n_x < 10:
            raise ValueError("n_x must be at least 10")
        for name in ("y_min", "y_max"):
            val = getattr(self, name)
            if val is not None and not val > 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class McSpec:
    sim: SimConfig = SimConfig()
    x0: float = 1.0
    pi_cap: float = 50.0
    bang_N: tuple = (5.0, 20.0, 100.0)
    bang_horizon: float = 0.1

    def __post_init__(self):
        if not self.x0 > 0.0:
            raise ValueError("x0 must be positive")
        if not self.pi_cap > 0.0:
            raise ValueError("pi_cap must be positive")
        if not self.bang_horizon > 0.0:
            raise ValueError("bang_horizon must be positive")
        if not self.bang_N or any(not n > 0.0 for n in self.bang_N):
            raise ValueError("bang_N must list positive intensities")


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    include_timings: bool = False


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    grid: GridSpec = GridSpec()
    solver: SolverConfig = SolverConfig()
    mc: McSpec = McSpec()
    outputs: OutputSpec = OutputSpec()
    name: str = ""


def _float(text: str) -> float:
    val = float(text)
    if not math.isfinite(val):
        raise ValueError(f"non-finite number '{text}'")
    return val


def _int(text: str) -> int:
    val = _float(text)
    if val != int(val):
        raise ValueError(f"expected an integer, got '{text}'")
    return int(val)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _opt_float(text: str) -> Optional[float]:
    return None if text.lower() in ("none", "auto", "") else _float(text)


def _vector(text: str) -> np.ndarray:
    return np.array([_float(s) for s in text.split(",")])


def _matrix(text: str) -> np.ndarray:
    rows = [_vector(r) for r in text.split(";")]
    if len({r.size for r in rows}) != 1:
        raise ValueError("matrix rows differ in length")
    return np.vstack(rows)


def _floats(text: str) -> tuple:
    return tuple(_float(s) for s in text.split(","))


SCHEMA = {
    "model": {"r": _float, "mu": _vector, "sigma": _matrix, "gamma": _float,
              "b": _float, "K": _float, "beta": _float, "T": _float},
    "grid": {"n_space": _int, "n_time": _int, "n_x": _int,
             "y_min": _opt_float, "y_max": _opt_float},
    "solver": {"theta": _float, "psor_omega": _float, "psor_tol": _float,
               "psor_max_iter": _int, "exercise_tol": _float, "floor_bc": str},
    "mc": {"n_paths": _int, "dt_sim": _float, "seed": _int, "antithetic": _bool,
           "x0": _float, "pi_cap": _float, "bang_N": _floats, "bang_horizon": _float},
    "outputs": {"dir": str, "include_timings": _bool},
    "run": {"name": str},
}
SIM_KEYS = {f.name for f in fields(SimConfig)}


def parse_config(text: str) -> RunConfig:
    values: dict[str, dict] = {s: {} for s in SCHEMA}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'section.key = value'", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError("keys take the form section.key", lineno, key)
        section, name = key.split(".")
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError("unknown key", lineno, key)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", lineno, key)
        try:
            values[section][name] = SCHEMA[section][name](val)
        except ValueError as exc:
            raise ConfigError(str(exc), lineno, key) from None
        lines[key] = lineno

    missing = [k for k in SCHEMA["model"] if k not in values["model"]]
    if missing:
        raise ConfigError(f"missing required key(s): "
                          + ", ".join(f"model.{k}" for k in missing))

    def build(section, factory, data):
        try:
            return factory(**data)
        except (ValueError, ParameterError) as exc:
            msg = str(exc)
            name = msg.split()[0] if msg else ""
            key = f"{section}.{name}" if name in SCHEMA[section] else None
            raise ConfigError(msg, lines.get(key), key) from None

    model = build("model", ModelParams, values["model"])
    grid = build("grid", GridSpec, values["grid"])
    solver = build("solver", SolverConfig, values["solver"])
    mc_vals = values["mc"]
    sim = build("mc", SimConfig, {k: v for k, v in mc_vals.items() if k in SIM_KEYS})
    try:
        sim.check_horizon(model.T)
    except ValueError as exc:
        raise ConfigError(str(exc), lines.get("mc.dt_sim"), "mc.dt_sim") from None
    mc = build("mc", McSpec, {"sim": sim, **{k: v for k, v in mc_vals.items()
                                            if k not in SIM_KEYS}})
    outputs = OutputSpec(**values["outputs"])
    return RunConfig(model=model, grid=grid, solver=solver, mc=mc, outputs=outputs,
                     name=values["run"].get("name", ""))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def reference_config_path(case_id: str) -> Path:
    """Path of a shipped reference configuration (case I, II_strict, ...)."""
    path = Path(__file__).parent / "configs" / f"case_{case_id}.cfg"
    if not path.exists():
        raise FileNotFoundError(f"no reference config for case {case_id}")
    return path
