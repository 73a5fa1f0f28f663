"""Open-loop standard mechanical systems in port-Hamiltonian form.

A model is a bundle of evaluators for the mass matrix ``M(q)``, the
potential ``U(q)``, the natural damping ``D(q, p)`` and the constant
input matrix ``G = [0; G1]``.  The Hamiltonian is
``H(q, p) = 1/2 p' M(q)^-1 p + U(q)`` and the passive output is
``y = G' M^-1 p``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from ._linalg import (
    as_square,
    as_vector,
    fd_gradient,
    fd_jacobian,
    fd_matrix_partials,
    lam_max,
    lam_min,
    sym,
)
from .errors import DimensionError, ModelInvariantError

TOL_PSD = 1e-10
TOL_EQ = 1e-9
MAX_REGION_POINTS = 1_000_000

# Flexible-joint planar manipulator (links q1, q2; motors q3, q4).
MANIPULATOR_PARAMS = {
    "a1": 0.1547,
    "a2": 0.0111,
    "b": 0.0168,
    "Ks": [8.43, 16.86],
    "Du": [0.0331, 0.0077],
    "Da": [2.9758, 2.8064],
    "Mm": [0.0628, 0.0026],
    "G1": [1.0, 1.67],
}


@dataclass(frozen=True)
class MechanicalModel:
    """Evaluatable open-loop plant.

    ``mass_partials`` returns the stack ``dM/dq_i`` with shape ``(n, n, n)``;
    when omitted it falls back to central differences.  ``input_gain`` is the
    lower block ``G1`` of the input matrix and defaults to the identity.
    """

    name: str
    n: int
    m: int
    mass: Callable[[np.ndarray], np.ndarray]
    potential: Callable[[np.ndarray], float]
    potential_grad_fn: Callable[[np.ndarray], np.ndarray] | None = None
    potential_hess_fn: Callable[[np.ndarray], np.ndarray] | None = None
    damping_fn: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    mass_partials_fn: Callable[[np.ndarray], np.ndarray] | None = None
    input_gain: np.ndarray | None = None
    damping_depends_on_p: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1 or not 1 <= self.m <= self.n:
            raise DimensionError(f"need n >= 1 and 1 <= m <= n, got n={self.n}, m={self.m}")
        g1 = np.eye(self.m) if self.input_gain is None else as_square(self.input_gain, self.m, "G1")
        if np.linalg.matrix_rank(g1) < self.m:
            raise ModelInvariantError("input gain G1 must be invertible so that rank(G) = m")
        object.__setattr__(self, "input_gain", g1)

    @property
    def ell(self) -> int:
        return self.n - self.m

    @property
    def input_matrix(self) -> np.ndarray:
        """``G = [0_{l x m}; G1]``."""
        return np.vstack([np.zeros((self.ell, self.m)), self.input_gain])

    @property
    def annihilator(self) -> np.ndarray:
        """``G_perp = [I_l 0_{l x m}]``."""
        return np.hstack([np.eye(self.ell), np.zeros((self.ell, self.m))])

    def mass_matrix(self, q) -> np.ndarray:
        return np.asarray(self.mass(as_vector(q, self.n, "q")), dtype=float)

    def mass_partials(self, q) -> np.ndarray:
        q = as_vector(q, self.n, "q")
        if self.mass_partials_fn is not None:
            return np.asarray(self.mass_partials_fn(q), dtype=float)
        return fd_matrix_partials(self.mass, q)

    def mass_partial(self, q, i: int) -> np.ndarray:
        return self.mass_partials(q)[i]

    def potential_grad(self, q) -> np.ndarray:
        q = as_vector(q, self.n, "q")
        if self.potential_grad_fn is not None:
            return np.asarray(self.potential_grad_fn(q), dtype=float)
        return fd_gradient(self.potential, q)

    def potential_hess(self, q) -> np.ndarray:
        q = as_vector(q, self.n, "q")
        if self.potential_hess_fn is not None:
            return np.asarray(self.potential_hess_fn(q), dtype=float)
        return sym(fd_jacobian(self.potential_grad, q))

    def damping(self, q, p) -> np.ndarray:
        if self.damping_fn is None:
            return np.zeros((self.n, self.n))
        return np.asarray(self.damping_fn(as_vector(q, self.n, "q"), as_vector(p, self.n, "p")), dtype=float)


class EquilibriumCheck(NamedTuple):
    ok: bool
    residual: float


@dataclass(frozen=True)
class Region:
    """Box of configurations sampled on a uniform grid."""

    center: np.ndarray
    half_widths: np.ndarray
    samples_per_axis: int = 7
    max_points: int = MAX_REGION_POINTS

    def __post_init__(self):
        c = as_vector(self.center, name="region center")
        h = as_vector(self.half_widths, c.size, "region half_widths")
        if np.any(h < 0):
            raise ValueError("region half_widths must be non-negative")
        if self.samples_per_axis < 1:
            raise ValueError("samples_per_axis must be >= 1")
        if self.samples_per_axis ** c.size > self.max_points:
            raise ValueError(
                f"region has {self.samples_per_axis}^{c.size} points, above the cap {self.max_points}"
            )
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_widths", h)

    @property
    def dim(self) -> int:
        return self.center.size

    def grid(self) -> np.ndarray:
        """All grid points, shape ``(samples_per_axis**n, n)``."""
        s = self.samples_per_axis
        axes = [
            np.array([c]) if s == 1 or h == 0.0 else np.linspace(c - h, c + h, s)
            for c, h in zip(self.center, self.half_widths)
        ]
        return np.array(list(itertools.product(*axes)), dtype=float)

    def random(self, rng: np.random.Generator, count: int) -> np.ndarray:
        u = rng.uniform(-1.0, 1.0, size=(count, self.dim))
        return self.center + u * self.half_widths

    def contains(self, q, tol: float = 1e-12) -> bool:
        return bool(np.all(np.abs(np.asarray(q) - self.center) <= self.half_widths + tol))


def _check_spd(model: MechanicalModel, q: np.ndarray) -> np.ndarray:
    mq = model.mass_matrix(q)
    if np.max(np.abs(mq - mq.T)) > 1e-12 * max(1.0, np.max(np.abs(mq))):
        raise ModelInvariantError(f"mass matrix of {model.name} is not symmetric at q={q.tolist()}")
    try:
        np.linalg.cholesky(mq)
    except np.linalg.LinAlgError as exc:
        raise ModelInvariantError(f"mass matrix of {model.name} is not SPD at q={q.tolist()}") from exc
    return mq


def eval_hamiltonian(model: MechanicalModel, q, p) -> float:
    q = as_vector(q, model.n, "q")
    p = as_vector(p, model.n, "p")
    mq = _check_spd(model, q)
    return float(0.5 * p @ np.linalg.solve(mq, p) + model.potential(q))


def passive_output(model: MechanicalModel, q, p) -> np.ndarray:
    q = as_vector(q, model.n, "q")
    p = as_vector(p, model.n, "p")
    return model.input_matrix.T @ np.linalg.solve(model.mass_matrix(q), p)


def open_loop_field(model: MechanicalModel, x, u=None) -> np.ndarray:
    """``(q_dot, p_dot)`` of the open-loop plant under input ``u``."""
    x = as_vector(x, 2 * model.n, "state")
    n = model.n
    q, p = x[:n], x[n:]
    v = np.linalg.solve(model.mass_matrix(q), p)
    dm = model.mass_partials(q)
    grad_kin = -0.5 * np.einsum("j,ijk,k->i", v, dm, v)
    pdot = -(model.potential_grad(q) + grad_kin) - model.damping(q, p) @ v
    if u is not None:
        pdot = pdot + model.input_matrix @ as_vector(u, model.m, "u")
    return np.concatenate([v, pdot])


def check_equilibrium(model: MechanicalModel, q_star, tol: float = TOL_EQ) -> EquilibriumCheck:
    q_star = as_vector(q_star, model.n, "q_star")
    if model.ell == 0:
        return EquilibriumCheck(True, 0.0)
    res = float(np.linalg.norm(model.annihilator @ model.potential_grad(q_star)))
    return EquilibriumCheck(res <= tol, res)


def mass_bounds(model: MechanicalModel, region: Region) -> tuple[float, float]:
    if region.dim != model.n:
        raise DimensionError(f"region dimension {region.dim} does not match n={model.n}")
    lo, hi = np.inf, -np.inf
    for q in region.grid():
        mq = _check_spd(model, q)
        lo = min(lo, lam_min(mq))
        hi = max(hi, lam_max(mq))
    return float(lo), float(hi)


# ---------------------------------------------------------------------------
# built-in models


def point_mass(mass: float = 1.0) -> MechanicalModel:
    mm = np.array([[float(mass)]])
    return MechanicalModel(
        name="point_mass",
        n=1,
        m=1,
        mass=lambda q: mm,
        potential=lambda q: 0.0,
        potential_grad_fn=lambda q: np.zeros(1),
        potential_hess_fn=lambda q: np.zeros((1, 1)),
        mass_partials_fn=lambda q: np.zeros((1, 1, 1)),
        params={"mass": float(mass)},
    )


def mass_spring_damper(mass: float = 1.0, stiffness: float = 1.0, damping: float = 0.0) -> MechanicalModel:
    mm = np.array([[float(mass)]])
    dd = np.array([[float(damping)]])
    k = float(stiffness)
    return MechanicalModel(
        name="mass_spring_damper",
        n=1,
        m=1,
        mass=lambda q: mm,
        potential=lambda q: 0.5 * k * float(q[0]) ** 2,
        potential_grad_fn=lambda q: np.array([k * q[0]]),
        potential_hess_fn=lambda q: np.array([[k]]),
        damping_fn=lambda q, p: dd,
        mass_partials_fn=lambda q: np.zeros((1, 1, 1)),
        params={"mass": float(mass), "stiffness": k, "damping": float(damping)},
    )


def _link_inertia(a1: float, a2: float, b: float, q2: float) -> np.ndarray:
    c = np.cos(q2)
    return np.array([[a1 + a2 + 2.0 * b * c, a2 + b * c], [a2 + b * c, a2]])


def _link_inertia_dq2(b: float, q2: float) -> np.ndarray:
    s = np.sin(q2)
    return np.array([[-2.0 * b * s, -b * s], [-b * s, 0.0]])


def planar_manipulator(**overrides) -> MechanicalModel:
    """Two-link planar arm with flexible joints, n = 4 and m = 2.

    Coordinates are (link 1, link 2, motor 1, motor 2); the link pair is
    unactuated and couples to the motors through joint springs ``Ks``.
    """
    prm = {**MANIPULATOR_PARAMS, **overrides}
    unknown = set(overrides) - set(MANIPULATOR_PARAMS)
    if unknown:
        raise ValueError(f"unknown planar_manipulator parameters: {sorted(unknown)}")
    a1, a2, b = float(prm["a1"]), float(prm["a2"]), float(prm["b"])
    ks = np.diag(as_vector(prm["Ks"], 2, "Ks"))
    mm = np.diag(as_vector(prm["Mm"], 2, "Mm"))
    dmat = np.diag(np.concatenate([as_vector(prm["Du"], 2, "Du"), as_vector(prm["Da"], 2, "Da")]))
    g1 = np.diag(as_vector(prm["G1"], 2, "G1"))
    hess = np.block([[ks, -ks], [-ks, ks]])

    def mass(q):
        out = np.zeros((4, 4))
        out[:2, :2] = _link_inertia(a1, a2, b, q[1])
        out[2:, 2:] = mm
        return out

    def partials(q):
        out = np.zeros((4, 4, 4))
        out[1, :2, :2] = _link_inertia_dq2(b, q[1])
        return out

    def potential(q):
        e = q[:2] - q[2:]
        return 0.5 * float(e @ ks @ e)

    return MechanicalModel(
        name="planar_manipulator",
        n=4,
        m=2,
        mass=mass,
        potential=potential,
        potential_grad_fn=lambda q: hess @ q,
        potential_hess_fn=lambda q: hess,
        damping_fn=lambda q, p: dmat,
        mass_partials_fn=partials,
        input_gain=g1,
        params={k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v) for k, v in prm.items()},
    )


def two_link_arm(a1: float = 0.1547, a2: float = 0.0111, b: float = 0.0168, damping=(0.0331, 0.0077)) -> MechanicalModel:
    """Rigid, fully actuated two-link planar arm moving in a horizontal plane."""
    dmat = np.diag(as_vector(damping, 2, "damping"))

    def partials(q):
        out = np.zeros((2, 2, 2))
        out[1] = _link_inertia_dq2(b, q[1])
        return out

    return MechanicalModel(
        name="two_link_arm",
        n=2,
        m=2,
        mass=lambda q: _link_inertia(a1, a2, b, q[1]),
        potential=lambda q: 0.0,
        potential_grad_fn=lambda q: np.zeros(2),
        potential_hess_fn=lambda q: np.zeros((2, 2)),
        damping_fn=lambda q, p: dmat,
        mass_partials_fn=partials,
        params={"a1": a1, "a2": a2, "b": b, "damping": list(map(float, dmat.diagonal()))},
    )


def mass_chain(n: int = 3, masses=None, springs=None, dampers=None, m: int | None = None) -> MechanicalModel:
    """``n`` masses in a line, the first tied to a wall; the last ``m`` are actuated."""
    masses = np.ones(n) if masses is None else as_vector(masses, n, "masses")
    springs = np.ones(n) if springs is None else as_vector(springs, n, "springs")
    dampers = np.zeros(n) if dampers is None else as_vector(dampers, n, "dampers")
    m = n if m is None else int(m)
    # incidence matrix: spring i stretches by q_i - q_{i-1}, q_0 = wall
    inc = np.eye(n) - np.eye(n, k=-1)
    kmat = inc.T @ np.diag(springs) @ inc
    dmat = inc.T @ np.diag(dampers) @ inc
    mm = np.diag(masses)
    zeros = np.zeros((n, n, n))
    return MechanicalModel(
        name="mass_chain",
        n=n,
        m=m,
        mass=lambda q: mm,
        potential=lambda q: 0.5 * float(q @ kmat @ q),
        potential_grad_fn=lambda q: kmat @ q,
        potential_hess_fn=lambda q: kmat,
        damping_fn=lambda q, p: dmat,
        mass_partials_fn=lambda q: zeros,
        params={
            "n": n,
            "m": m,
            "masses": masses.tolist(),
            "springs": springs.tolist(),
            "dampers": dampers.tolist(),
        },
    )


BUILTIN_MODELS: dict[str, Callable[..., MechanicalModel]] = {
    "point_mass": point_mass,
    "mass_spring_damper": mass_spring_damper,
    "planar_manipulator": planar_manipulator,
    "two_link_arm": two_link_arm,
    "mass_chain": mass_chain,
}


def build_model(name: str, params: dict | None = None) -> MechanicalModel:
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    return factory(**(params or {}))
