"""JSON run/bench configuration, validated with pydantic.

Every CLI flag overrides the config key of the same name; keys left unset
fall back to the selected scenario's defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Type, TypeVar, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    ValidationError,
)

from .exceptions import ConfigError, FilterError
from .filter import FilterConfig
from .interpolation import ShepardConfig
from .scenarios import Scenario, build_scenario
from .solvers import SolveConfig

ScenarioName = Literal["tumor", "bearing", "linear_gaussian"]
MethodName = Literal["implicit", "pf", "ekf"]


class MethodParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: MethodName = "implicit"
    points: Optional[PositiveInt] = None
    samples: Optional[PositiveInt] = None
    particles: Optional[PositiveInt] = None
    neighbors: Optional[PositiveInt] = None
    epsilon: Optional[PositiveFloat] = None
    tau: float = Field(0.2, ge=0.0, le=1.0)
    jitter_scale: NonNegativeFloat = 1.0
    weight_mode: Literal["inverse_distance", "paper_literal"] = "inverse_distance"
    idw_exponent: PositiveFloat = 2.0
    noise_mode: Literal["per_node", "shared"] = "per_node"
    residual_tol: PositiveFloat = 1e-10
    max_iters: PositiveInt = 50
    damping: float = Field(1.0, gt=0.0, le=1.0)
    prediction_workers: PositiveInt = 1

    def settings(self, scenario: Scenario, label: Optional[str] = None) -> "MethodSettings":
        points = self.points or scenario.points
        samples = self.samples or scenario.samples
        particles = self.particles or scenario.particles
        filter_config = None
        if self.method == "implicit":
            try:
                filter_config = FilterConfig(
                    points=points,
                    samples=samples,
                    shepard=ShepardConfig(
                        neighbors=self.neighbors,
                        weight_mode=self.weight_mode,
                        idw_exponent=self.idw_exponent,
                    ),
                    solve=SolveConfig(
                        residual_tol=self.residual_tol,
                        max_iters=self.max_iters,
                        damping=self.damping,
                    ),
                    epsilon=self.epsilon,
                    tau=self.tau,
                    jitter_scale=self.jitter_scale,
                    noise_mode=self.noise_mode,
                    workers=self.prediction_workers,
                )
            except FilterError as exc:
                raise ConfigError(str(exc)) from exc
        if label is None:
            label = {
                "implicit": f"implicit_N{points}_M{samples}",
                "pf": f"pf_P{particles}",
                "ekf": "ekf",
            }[self.method]
        return MethodSettings(
            method=self.method,
            label=label,
            filter_config=filter_config,
            particles=particles if self.method == "pf" else None,
        )

    def method_echo(self, scenario: Scenario) -> Dict[str, Any]:
        """Parameters of this method with scenario defaults filled in."""
        echo = self.model_dump(mode="json")
        echo["points"] = self.points or scenario.points
        echo["samples"] = self.samples or scenario.samples
        echo["particles"] = self.particles or scenario.particles
        return echo


class CellConfig(MethodParams):
    label: Optional[str] = Field(None, pattern=r"^[A-Za-z0-9_.-]+$")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioName
    discretization: Optional[Literal["euler", "paper_literal"]] = None
    scenario_params: Dict[str, Any] = Field(default_factory=dict)
    seed: NonNegativeInt = 0
    out: str = "results"
    threads: Optional[PositiveInt] = None
    verbose: bool = False

    def build_scenario(self) -> Scenario:
        return build_scenario(self.scenario, self.scenario_params, discretization=self.discretization)


class RunConfig(ExperimentConfig, MethodParams):
    reps: PositiveInt = 1
    dump_clouds: List[NonNegativeInt] = Field(default_factory=list)


class BenchConfig(ExperimentConfig):
    reps: PositiveInt = 20
    cells: List[CellConfig] = Field(min_length=1)


@dataclass(frozen=True)
class MethodSettings:
    """Resolved, picklable method parameters handed to the realization workers."""

    method: str
    label: str
    filter_config: Optional[FilterConfig] = None
    particles: Optional[int] = None


ConfigModel = TypeVar("ConfigModel", RunConfig, BenchConfig)
CONFIG_KINDS: Dict[str, Type[BaseModel]] = {"run": RunConfig, "bench": BenchConfig}


def _format_validation_error(exc: ValidationError) -> str:
    lines = []
    for error in exc.errors():
        where = ".".join(str(part) for part in error["loc"]) or "<root>"
        lines.append(f"{where}: {error['msg']}")
    return "; ".join(lines)


def load_config(
    model: Type[ConfigModel],
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ConfigModel:
    """Read ``path`` (if any), apply non-``None`` overrides and validate."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must contain a JSON object")
    data.update({key: value for key, value in (overrides or {}).items() if value is not None})
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation_error(exc)) from exc


def schema_json(kind: str) -> str:
    try:
        model = CONFIG_KINDS[kind]
    except KeyError as exc:
        raise ConfigError(f"unknown config kind {kind!r}; choose from {sorted(CONFIG_KINDS)}") from exc
    return json.dumps(model.model_json_schema(), indent=2, sort_keys=True)
