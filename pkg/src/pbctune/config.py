"""Strict JSON run configuration and its translation into toolkit objects."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .canonical import GyroGenerator, generator_for_constant_j2
from .closedloop import ControllerGains, TargetDynamics, build_target
from .model import MechanicalModel, Region, build_model
from .sim import Disturbance, SimConfig

GainValue = Union[float, list[float], list[list[float]]]


class ConfigError(ValueError):
    """Config file unreadable, malformed or inconsistent; carries field diagnostics."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class ModelSpec(_Strict):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)


class GainsSpec(_Strict):
    kes: GainValue
    kdi: GainValue
    kint: Optional[GainValue] = None
    feedforward: Literal["none", "gravity_compensation"] = "none"


class QdSpec(_Strict):
    # "auto" builds the linear Qd that reproduces the constant J2 of a built-in closed loop
    kind: Literal["auto", "zero", "constant", "linear"] = "auto"
    value: Optional[Union[list[float], list[list[float]]]] = None

    @model_validator(mode="after")
    def _value_matches_kind(self):
        if self.kind in ("constant", "linear") and self.value is None:
            raise ValueError(f"qd_generator kind {self.kind!r} needs a value")
        if self.kind in ("auto", "zero") and self.value is not None:
            raise ValueError(f"qd_generator kind {self.kind!r} takes no value")
        return self


class RegionSpec(_Strict):
    half_widths: list[float]
    center: Optional[list[float]] = None
    samples_per_axis: int = Field(default=7, ge=1)
    p_radius: Optional[float] = Field(default=None, gt=0)


class DisturbanceSpec(_Strict):
    kind: Literal["none", "constant", "sinusoid"] = "none"
    vector: list[float] = Field(default_factory=list)
    frequency: float = 0.0


class SimSpec(_Strict):
    t_final: float = Field(default=10.0, gt=0)
    dt: float = Field(default=1e-3, gt=0)
    method: Literal["rk4_fixed", "rk45_adaptive"] = "rk4_fixed"
    abs_tol: float = Field(default=1e-9, gt=0)
    rel_tol: float = Field(default=1e-7, gt=0)
    disturbance: DisturbanceSpec = Field(default_factory=DisturbanceSpec)
    x0: Optional[list[float]] = None


class OutputsSpec(_Strict):
    dir: str = "."


class RunConfig(_Strict):
    model: ModelSpec
    q_star: list[float]
    gains: GainsSpec
    qd_generator: QdSpec = Field(default_factory=QdSpec)
    region: RegionSpec
    theta: float = Field(default=0.5, gt=0, lt=1)
    sim: SimSpec = Field(default_factory=SimSpec)
    outputs: OutputsSpec = Field(default_factory=OutputsSpec)
    seed: int = 0

    @model_validator(mode="after")
    def _dimensions(self):
        n = len(self.q_star)
        if len(self.region.half_widths) != n:
            raise ValueError(f"region.half_widths has length {len(self.region.half_widths)}, q_star has {n}")
        if self.region.center is not None and len(self.region.center) != n:
            raise ValueError(f"region.center has length {len(self.region.center)}, q_star has {n}")
        if self.sim.x0 is not None and len(self.sim.x0) != 2 * n:
            raise ValueError(f"sim.x0 must have length {2 * n}, got {len(self.sim.x0)}")
        d = self.sim.disturbance
        if d.kind != "none" and len(d.vector) not in (n, 2 * n):
            raise ValueError(f"sim.disturbance.vector must have length {n} or {2 * n}, got {len(d.vector)}")
        return self


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(part) for part in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def parse_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def apply_overrides(cfg: RunConfig, region_samples: int | None = None, theta: float | None = None, seed: int | None = None) -> RunConfig:
    """Command-line flags take precedence over file values."""
    data = cfg.model_dump()
    if region_samples is not None:
        data["region"]["samples_per_axis"] = region_samples
    if theta is not None:
        data["theta"] = theta
    if seed is not None:
        data["seed"] = seed
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def make_model(cfg: RunConfig) -> MechanicalModel:
    try:
        model = build_model(cfg.model.name, cfg.model.params)
    except TypeError as exc:
        raise ConfigError(f"model.params: {exc}") from None
    if model.n != len(cfg.q_star):
        raise ConfigError(f"q_star has length {len(cfg.q_star)} but model {cfg.model.name!r} has n = {model.n}")
    return model


def make_gains(cfg: RunConfig, model: MechanicalModel) -> ControllerGains:
    g = cfg.gains
    return ControllerGains.from_values(model, g.kes, g.kdi, g.kint, g.feedforward)


def make_target(cfg: RunConfig, model: MechanicalModel, gains: ControllerGains) -> TargetDynamics:
    return build_target(model, gains, cfg.q_star)


def make_region(cfg: RunConfig) -> Region:
    center = cfg.q_star if cfg.region.center is None else cfg.region.center
    return Region(np.array(center), np.array(cfg.region.half_widths), cfg.region.samples_per_axis)


def make_generator(cfg: RunConfig, target: TargetDynamics) -> GyroGenerator:
    spec = cfg.qd_generator
    if spec.kind == "auto":
        return generator_for_constant_j2(target.at_equilibrium()["j2"])
    if spec.kind == "zero":
        return GyroGenerator.zero(target.n)
    if spec.kind == "constant":
        return GyroGenerator.constant(spec.value)
    return GyroGenerator.linear(spec.value)


def make_sim_config(cfg: RunConfig) -> SimConfig:
    s = cfg.sim
    dist = Disturbance(s.disturbance.kind, tuple(s.disturbance.vector), s.disturbance.frequency)
    return SimConfig(s.t_final, s.dt, s.method, s.abs_tol, s.rel_tol, dist)


def initial_state(cfg: RunConfig) -> np.ndarray:
    """``sim.x0`` if given, else the origin of the ``(q, p)`` space."""
    n = len(cfg.q_star)
    return np.zeros(2 * n) if cfg.sim.x0 is None else np.array(cfg.sim.x0, dtype=float)
