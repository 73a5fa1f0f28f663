"""Time-domain simulation of the closed loop and the metrics the tuning rules bound."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp, trapezoid

from ._linalg import as_vector
from .closedloop import TargetDynamics, disturbance_vector
from .errors import DivergenceError, ParameterError
from .lyap import build_hat_system
from .model import Region

DIVERGENCE_NORM = 1e8
METHODS = ("rk4_fixed", "rk45_adaptive")
DISTURBANCES = ("none", "constant", "sinusoid")


@dataclass(frozen=True)
class Disturbance:
    """``none``, ``constant`` (vector) or ``sinusoid`` (amplitude * sin(2 pi f t)).

    Vectors of length ``n`` act on the momentum equation; length ``2n`` acts
    on the full state.
    """

    kind: str = "none"
    vector: tuple = ()
    frequency: float = 0.0

    def __post_init__(self):
        if self.kind not in DISTURBANCES:
            raise ParameterError(f"disturbance kind must be one of {DISTURBANCES}, got {self.kind!r}")
        if self.kind != "none" and len(self.vector) == 0:
            raise ParameterError(f"{self.kind} disturbance needs a vector")
        if self.kind == "sinusoid" and self.frequency <= 0:
            raise ParameterError("sinusoid disturbance needs a positive frequency")

    def function(self, n: int) -> Callable[[float], np.ndarray] | None:
        if self.kind == "none":
            return None
        d = disturbance_vector(self.vector, n)
        if self.kind == "constant":
            return lambda t: d
        w = 2.0 * np.pi * self.frequency
        return lambda t: d * np.sin(w * t)

    def full_vector(self, n: int) -> np.ndarray | None:
        return None if self.kind == "none" else disturbance_vector(self.vector, n)


@dataclass(frozen=True)
class SimConfig:
    t_final: float = 10.0
    dt: float = 1e-3
    method: str = "rk4_fixed"
    abs_tol: float = 1e-9
    rel_tol: float = 1e-7
    disturbance: Disturbance = field(default_factory=Disturbance)

    def __post_init__(self):
        if self.t_final <= 0 or self.dt <= 0:
            raise ParameterError("t_final and dt must be positive")
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ParameterError("tolerances must be positive")
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}, got {self.method!r}")


def _check(x: np.ndarray, t: float) -> None:
    if not np.all(np.isfinite(x)) or np.linalg.norm(x) > DIVERGENCE_NORM:
        raise DivergenceError(
            f"state norm exceeded {DIVERGENCE_NORM:g} at t={t:.6g}; gains may be infeasible or dt too large"
        )


def rk4(f: Callable, x0: np.ndarray, t_final: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    steps = int(np.ceil(t_final / dt - 1e-9))
    times = np.empty(steps + 1)
    xs = np.empty((steps + 1, x0.size))
    t, x = 0.0, x0.copy()
    times[0], xs[0] = t, x
    for k in range(1, steps + 1):
        h = min(dt, t_final - t)
        k1 = f(t, x)
        k2 = f(t + h / 2, x + h / 2 * k1)
        k3 = f(t + h / 2, x + h / 2 * k2)
        k4 = f(t + h, x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t = k * dt if k < steps else t_final
        _check(x, t)
        times[k], xs[k] = t, x
    return times, xs


def integrate(f: Callable, x0, cfg: SimConfig, t_eval=None) -> tuple[np.ndarray, np.ndarray]:
    """Integrate ``x_dot = f(t, x)``; returns ``(times, states)``.

    ``t_eval`` only applies to the adaptive method; without it every accepted
    step is returned.
    """
    x0 = as_vector(x0, name="x0")
    _check(x0, 0.0)
    if cfg.method == "rk4_fixed":
        return rk4(f, x0, cfg.t_final, cfg.dt)

    def blowup(t, x):
        return DIVERGENCE_NORM - np.linalg.norm(x)

    blowup.terminal = True
    sol = solve_ivp(f, (0.0, cfg.t_final), x0, method="RK45", rtol=cfg.rel_tol, atol=cfg.abs_tol, events=blowup, t_eval=t_eval)
    if sol.status == 1 or not sol.success:
        raise DivergenceError(f"adaptive integration failed: {sol.message}")
    return sol.t, sol.y.T


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    hat_norms: np.ndarray
    hat_states: np.ndarray
    energies: np.ndarray
    hat_outputs: np.ndarray

    @property
    def n(self) -> int:
        return self.states.shape[1] // 2

    def positions(self) -> np.ndarray:
        return self.states[:, : self.n]


def closed_loop_rhs(target: TargetDynamics, disturbance: Disturbance | None = None) -> Callable:
    dfun = None if disturbance is None else disturbance.function(target.n)
    if dfun is None:
        return lambda t, x: target.field(x)
    return lambda t, x: target.field(x, dfun(t))


def simulate(target: TargetDynamics, x0, cfg: SimConfig | None = None, hat=None) -> Trajectory:
    """Closed-loop run recording ``y = G' M^-1 p``, ``|x_hat|``, ``Hd`` and ``y_hat = G' Md^-1 p``.

    ``y`` and ``y_hat`` coincide when ``Md = M``.
    """
    cfg = SimConfig() if cfg is None else cfg
    n = target.n
    x0 = as_vector(x0, 2 * n, "x0")
    times, xs = integrate(closed_loop_rhs(target, cfg.disturbance), x0, cfg)
    hat = build_hat_system(target) if hat is None else hat
    g = hat.input_matrix
    ys = np.array([g.T @ np.linalg.solve(target.mass(x[:n]), x[n:]) for x in xs])
    xh = np.array([hat.to_hat(x) for x in xs])
    energies = np.array([target.hamiltonian(x) for x in xs])
    yh = np.array([hat.output(v) for v in xh])
    return Trajectory(times, xs, ys, np.linalg.norm(xh, axis=1), xh, energies, yh)


@dataclass
class TrajectoryMetrics:
    overshoot_per_coord: list
    rise_time_98: list
    reached: list
    l2_energy_per_coord: list
    max_output_norm: float
    final_offset_norm: float
    partial: bool
    envelope_violations: int | None = None

    def as_dict(self) -> dict:
        return {
            "overshoot_per_coord": self.overshoot_per_coord,
            "rise_time_98": self.rise_time_98,
            "reached": self.reached,
            "l2_energy_per_coord": self.l2_energy_per_coord,
            "max_output_norm": self.max_output_norm,
            "final_offset_norm": self.final_offset_norm,
            "partial": self.partial,
            "envelope_violations": self.envelope_violations,
        }


def rise_time(times: np.ndarray, err: np.ndarray, band: float) -> float | None:
    """First time after which ``|err| <= band`` holds for every later sample.

    The entry instant is refined by linear interpolation between samples.
    """
    outside = np.nonzero(np.abs(err) > band)[0]
    if outside.size == 0:
        return 0.0
    k = outside[-1]
    if k == err.size - 1:
        return None
    e0, e1 = abs(err[k]), abs(err[k + 1])
    frac = (e0 - band) / (e0 - e1) if e0 != e1 else 1.0
    return float(times[k] + frac * (times[k + 1] - times[k]))


def metrics(traj: Trajectory, q_star) -> TrajectoryMetrics:
    n = traj.n
    q_star = as_vector(q_star, n, "q_star")
    err = traj.positions() - q_star
    travel = err[0]
    over, rise, reached = [], [], []
    for i in range(n):
        e = err[:, i]
        if travel[i] == 0.0:
            over.append(float(np.max(np.abs(e))))
            rise.append(0.0)
            reached.append(True)
            continue
        # positive overshoot means crossing past q* away from the start
        over.append(float(max(0.0, np.max(-np.sign(travel[i]) * e))))
        r = rise_time(traj.times, e, 0.02 * abs(travel[i]))
        rise.append(r)
        reached.append(r is not None)
    energy = [float(trapezoid(err[:, i] ** 2, traj.times)) for i in range(n)]
    start, final = float(np.linalg.norm(travel)), float(np.linalg.norm(err[-1]))
    partial = bool(final > 0.02 * start) if start > 0 else bool(final > 0.0)
    return TrajectoryMetrics(
        overshoot_per_coord=over,
        rise_time_98=rise,
        reached=reached,
        l2_energy_per_coord=energy,
        max_output_norm=float(np.max(np.linalg.norm(traj.outputs, axis=1))),
        final_offset_norm=final,
        partial=partial,
    )


@dataclass
class EnvelopeResult:
    violations: int
    inconclusive: bool
    worst_ratio: float
    output_violations: int

    def as_dict(self) -> dict:
        return {
            "violations": self.violations,
            "inconclusive": self.inconclusive,
            "worst_ratio": self.worst_ratio,
            "output_violations": self.output_violations,
        }


def envelope_check(traj: Trajectory, report, region: Region | None = None, rate: float | None = None) -> EnvelopeResult:
    """Count samples with ``|x_hat(t)| > sqrt(k2/k1) |x_hat0| exp(-rate t) (1 + 1e-6)``.

    ``output_violations`` counts samples with ``|y_hat(t)| > xi``.

    The rate defaults to the sound one in ``report``.  Leaving the analysis
    region or the sampled momentum ball makes the verdict inconclusive.
    """
    rate = report.rate_sound if rate is None else rate
    x0n = float(traj.hat_norms[0])
    bound = np.sqrt(report.k2 / report.k1) * x0n * np.exp(-rate * traj.times) * (1.0 + 1e-6)
    viol = int(np.sum(traj.hat_norms > bound))
    ratio = float(np.max(traj.hat_norms / np.maximum(bound, 1e-300))) if x0n > 0 else 0.0
    n = traj.n
    outside = False
    if region is not None:
        outside = any(not region.contains(q) for q in traj.positions())
    if np.max(np.linalg.norm(traj.hat_states[:, n:], axis=1)) > report.p_radius * (1.0 + 1e-9):
        outside = True
    yviol = int(np.sum(np.linalg.norm(traj.hat_outputs, axis=1) > report.xi * (1.0 + 1e-6) + 1e-15))
    return EnvelopeResult(viol, outside, ratio, yviol)


def energy_audit(traj: Trajectory) -> float:
    """Largest one-step increase of ``Hd`` (<= 0 means monotone)."""
    if traj.energies.size < 2:
        return 0.0
    return float(np.max(np.diff(traj.energies)))


def steady_state_offset(traj: Trajectory, q_star, window: float = 1.0) -> float:
    """Mean ``|q - q*|`` over the last ``window`` seconds."""
    q_star = as_vector(q_star, traj.n, "q_star")
    mask = traj.times >= traj.times[-1] - window
    return float(np.mean(np.linalg.norm(traj.positions()[mask] - q_star, axis=1)))


def trajectory_csv(traj: Trajectory) -> str:
    n, m = traj.n, traj.outputs.shape[1]
    header = ["t"] + [f"q{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)] + [f"y{i + 1}" for i in range(m)] + ["hat_norm"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for t, x, y, h in zip(traj.times, traj.states, traj.outputs, traj.hat_norms):
        w.writerow([repr(float(v)) for v in (t, *x, *y, h)])
    return buf.getvalue()
