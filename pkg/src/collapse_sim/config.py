"""Run configuration: a single flat JSON document.

Example::

    {
      "levels": [{"energy": -1.0, "re": 0.7071, "im": 0.0},
                 {"energy":  1.0, "re": 0.7071, "im": 0.0}],
      "sigma": 1.0,
      "time_unit": "tau_r",
      "t_max": 20, "dt": 0.005,
      "seed": 42,
      "n_paths": 10000,
      "checkpoints": [1, 5, 20]
    }

With ``"time_unit": "tau_r"`` every time field (``t_max``, ``dt``,
``checkpoints``, ``mid_time``) is a multiple of the reduction timescale
1/(sigma^2 V0); with ``"time"`` (the default) they are absolute.  Amplitudes
need not be normalised.  ``amplitude_re``/``amplitude_im`` are accepted as
aliases of ``re``/``im``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

from .closedform import TimeGrid
from .ensemble import DEFAULT_MAX_PATH_STEPS, EnsembleConfig, dense_checkpoints
from .model import (
    DEFAULT_MAX_STEPS,
    InvalidModelError,
    LevelInput,
    ReductionParams,
    SpectralModel,
    build_spectral_model,
    reduction_timescale,
)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


TIME_UNITS = ("time", "tau_r")
CRITERIA = ("probability", "energy")


@dataclass(frozen=True)
class RunConfig:
    levels: tuple = ()
    sigma: float = 1.0
    t_max: float = 20.0
    dt: float = 0.005
    seed: int = 0
    reduction_epsilon: float = 1e-4
    reduction_criterion: str = "probability"
    n_paths: int = 1000
    checkpoints: tuple = ()
    time_unit: str = "time"
    quadrature_per_tau: int = 20
    mid_time: float | None = None
    reduction_n: tuple = (10.0,)
    workers: int | str = 1
    merge_tol: float | None = None
    max_steps: int = DEFAULT_MAX_STEPS
    max_path_steps: int = DEFAULT_MAX_PATH_STEPS
    validation_seeds: int = 200
    refine_factor: int = 2
    trajectory_csv: str = "trajectory.csv"
    summary_json: str = "summary.json"
    validation_json: str = "validation.json"

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = [{"energy": e, "re": re, "im": im} for e, re, im in self.levels]
        d["checkpoints"] = list(self.checkpoints)
        d["reduction_n"] = list(self.reduction_n)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"config: unknown field(s) {', '.join(unknown)}")
        kw = {}
        for name, value in data.items():
            kw[name] = _coerce(name, value)
        if "levels" not in kw:
            raise ConfigError("levels: required field missing")
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        return cls.from_json(text)

    def override(self, **values) -> "RunConfig":
        kw = {k: _coerce(k, v) for k, v in values.items() if v is not None}
        known = {f.name for f in fields(self)}
        bad = sorted(set(kw) - known)
        if bad:
            raise ConfigError(f"unknown field(s) {', '.join(bad)}")
        cfg = replace(self, **kw)
        cfg.validate()
        return cfg

    # -- resolution --------------------------------------------------------

    def validate(self) -> None:
        """Check every field; raises ConfigError naming the first bad one."""
        if self.n_paths < 1:
            raise ConfigError("n_paths: must be at least 1")
        if self.time_unit not in TIME_UNITS:
            raise ConfigError(f"time_unit: must be one of {TIME_UNITS}")
        if self.reduction_criterion not in CRITERIA:
            raise ConfigError(f"reduction_criterion: must be one of {CRITERIA}")
        if self.quadrature_per_tau < 1:
            raise ConfigError("quadrature_per_tau: must be at least 1")
        if self.validation_seeds < 1:
            raise ConfigError("validation_seeds: must be at least 1")
        if self.refine_factor < 2:
            raise ConfigError("refine_factor: must be at least 2")
        if self.workers != "auto" and (not isinstance(self.workers, int) or self.workers < 1):
            raise ConfigError("workers: must be a positive integer or 'auto'")
        model = self.model()
        params = self.params(model)
        grid = TimeGrid.from_params(params)
        for i, t in enumerate(self.abs_checkpoints(model)):
            if not 0 <= t <= params.t_max * (1 + 1e-12):
                raise ConfigError(f"checkpoints[{i}]: {t!r} lies outside [0, t_max]")
            try:
                grid.index_of(t)
            except ValueError:
                raise ConfigError(f"checkpoints[{i}]: {t!r} is not a multiple of dt") from None
        if self.mid_time is not None:
            t = self._scale(model) * self.mid_time
            if t not in self.abs_checkpoints(model):
                raise ConfigError("mid_time: must be one of the checkpoints")

    def model(self) -> SpectralModel:
        levels = [LevelInput(e, complex(re, im)) for e, re, im in self.levels]
        try:
            return build_spectral_model(levels, self.merge_tol)
        except InvalidModelError as exc:
            raise ConfigError(f"levels: {exc}") from None

    def tau_r(self, model: SpectralModel | None = None) -> float:
        return reduction_timescale(model or self.model(), self.sigma)

    def _scale(self, model: SpectralModel) -> float:
        if self.time_unit == "time":
            return 1.0
        tau = self.tau_r(model)
        if math.isinf(tau):
            raise ConfigError("time_unit: 'tau_r' needs a finite reduction timescale "
                              "(more than one level and sigma > 0)")
        return tau

    def params(self, model: SpectralModel | None = None) -> ReductionParams:
        model = model or self.model()
        scale = self._scale(model)
        try:
            return ReductionParams(
                sigma=self.sigma,
                t_max=self.t_max * scale,
                dt=self.dt * scale,
                reduction_epsilon=self.reduction_epsilon,
                seed=self.seed,
                max_steps=self.max_steps,
            )
        except ValueError as exc:
            raise ConfigError(f"params: {exc}") from None

    def abs_checkpoints(self, model: SpectralModel | None = None) -> list[float]:
        model = model or self.model()
        scale = self._scale(model)
        params = self.params(model)
        grid = TimeGrid.from_params(params)
        # snap onto the grid so that tau_r multiples match grid times exactly
        out = []
        for t in self.checkpoints:
            t = t * scale
            k = int(round(t / grid.dt))
            if 0 <= k <= grid.n_steps and math.isclose(grid.times[k], t, rel_tol=1e-9, abs_tol=1e-12):
                t = float(grid.times[k])
            out.append(t)
        return out

    def ensemble_config(self, workers=None, with_t_max: bool = True) -> EnsembleConfig:
        model = self.model()
        params = self.params(model)
        tests = sorted(set(self.abs_checkpoints(model)))
        if with_t_max and params.t_max not in tests:
            tests.append(float(TimeGrid.from_params(params).times[-1]))
        dense = dense_checkpoints(params, self.tau_r(model), self.quadrature_per_tau, tests)
        return EnsembleConfig(
            n_paths=self.n_paths,
            model=model,
            params=params,
            checkpoint_times=dense,
            test_times=tests,
            worker_count=self.workers if workers is None else workers,
            criterion=self.reduction_criterion,
            max_path_steps=self.max_path_steps,
        )


_FLOATS = {"sigma", "t_max", "dt", "reduction_epsilon", "mid_time", "merge_tol"}
_INTS = {"seed", "n_paths", "quadrature_per_tau", "max_steps", "max_path_steps",
         "validation_seeds", "refine_factor"}
_STRS = {"reduction_criterion", "time_unit", "trajectory_csv", "summary_json", "validation_json"}
_NULLABLE = {"mid_time", "merge_tol"}


def _number(name, value, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if integer:
        if isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{name}: expected an integer, got {value!r}")
            value = int(value)
        return int(value)
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"{name}: must be finite")
    return value


def _coerce(name, value):
    if name in _NULLABLE and value is None:
        return None
    if name in _FLOATS:
        return _number(name, value)
    if name in _INTS:
        return _number(name, value, integer=True)
    if name in _STRS:
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if name == "workers":
        if value == "auto":
            return value
        return _number(name, value, integer=True)
    if name in ("checkpoints", "reduction_n"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list of numbers")
        return tuple(_number(f"{name}[{i}]", v) for i, v in enumerate(value))
    if name == "levels":
        return _levels(value)
    return value


def _levels(value):
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError("levels: expected a non-empty list")
    out = []
    for i, item in enumerate(value):
        where = f"levels[{i}]"
        if isinstance(item, (list, tuple)) and len(item) == 3:
            item = {"energy": item[0], "re": item[1], "im": item[2]}
        if not isinstance(item, dict):
            raise ConfigError(f"{where}: expected an object with energy, re, im")
        item = dict(item)
        for alias, key in (("amplitude_re", "re"), ("amplitude_im", "im")):
            if alias in item:
                if key in item:
                    raise ConfigError(f"{where}: both {alias} and {key} given")
                item[key] = item.pop(alias)
        extra = sorted(set(item) - {"energy", "re", "im"})
        if extra:
            raise ConfigError(f"{where}: unknown key(s) {', '.join(extra)}")
        if "energy" not in item:
            raise ConfigError(f"{where}.energy: required")
        out.append((
            _number(f"{where}.energy", item["energy"]),
            _number(f"{where}.re", item.get("re", 0.0)),
            _number(f"{where}.im", item.get("im", 0.0)),
        ))
    return tuple(out)
