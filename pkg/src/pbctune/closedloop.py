"""PBC control law and the closed-loop target dynamics it produces.

The controller has the structure

    u = -Kes G'(q - q*) - Kdi G' qdot - Kint G_perp qdot + kappa(q)

and, with ``Md = M``, closes the loop into

    [qdot; pdot] = (Jd - Rd) grad Hd,   Hd = 1/2 p' Md^-1 p + Ud(q)

with ``Jd = [[0, M^-1 Md], [-Md M^-1, J2]]`` and ``Rd = blockdiag(0, Dd)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from ._linalg import as_square, as_vector, fd_gradient, fd_jacobian, fd_matrix_partials, lam_min, sym
from .errors import AdmissibilityError, DimensionError, UnsupportedConfigurationError
from .model import TOL_EQ, TOL_PSD, MechanicalModel, Region, check_equilibrium

FEEDFORWARDS = ("gravity_compensation", "none")
PROVENANCES = ("fully_actuated_case", "underactuated_case", "custom")


def _gain_matrix(value, rows: int, cols: int, name: str) -> np.ndarray:
    """Accept a scalar (times identity), a diagonal list, or a full matrix."""
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        if rows != cols:
            raise DimensionError(f"{name}: a scalar gain needs a square block, got {rows}x{cols}")
        return float(a) * np.eye(rows)
    if a.ndim == 1:
        if rows != cols or a.size != rows:
            raise DimensionError(f"{name}: diagonal of length {a.size} does not fit {rows}x{cols}")
        return np.diag(a)
    if a.shape != (rows, cols):
        raise DimensionError(f"{name} must be {rows}x{cols}, got {a.shape}")
    return a


@dataclass(frozen=True)
class ControllerGains:
    kes: np.ndarray
    kdi: np.ndarray
    kint: np.ndarray | None = None
    feedforward: str = "none"

    @classmethod
    def from_values(cls, model: MechanicalModel, kes, kdi, kint=None, feedforward: str = "none") -> "ControllerGains":
        m, ell = model.m, model.ell
        if kint is None or (np.size(kint) == 0):
            kint_m = np.zeros((m, ell))
        elif m == ell:
            kint_m = _gain_matrix(kint, m, ell, "Kint")
        else:
            kint_m = np.asarray(kint, dtype=float).reshape(m, ell)
        gains = cls(_gain_matrix(kes, m, m, "Kes"), _gain_matrix(kdi, m, m, "Kdi"), kint_m, feedforward)
        gains.validate(model)
        return gains

    def validate(self, model: MechanicalModel) -> None:
        m, ell = model.m, model.ell
        kes = as_square(self.kes, m, "Kes")
        kdi = as_square(self.kdi, m, "Kdi")
        for name, k in (("Kes", kes), ("Kdi", kdi)):
            if np.max(np.abs(k - k.T)) > 1e-12 * max(1.0, np.max(np.abs(k))):
                raise DimensionError(f"{name} must be symmetric")
            if lam_min(k) <= 0.0:
                raise AdmissibilityError(f"{name} must be positive definite (min eigenvalue {lam_min(k):.3g})")
        if self.kint_matrix(model).shape != (m, ell):
            raise DimensionError(f"Kint must be {m}x{ell}")
        if self.feedforward not in FEEDFORWARDS:
            raise ValueError(f"feedforward must be one of {FEEDFORWARDS}, got {self.feedforward!r}")

    def kint_matrix(self, model: MechanicalModel) -> np.ndarray:
        if self.kint is None:
            return np.zeros((model.m, model.ell))
        return np.asarray(self.kint, dtype=float).reshape(model.m, model.ell)

    def scaled(self, kint_factor: float = 1.0, kes_factor: float = 1.0, kdi_factor: float = 1.0) -> "ControllerGains":
        kint = None if self.kint is None else kint_factor * np.asarray(self.kint)
        return ControllerGains(kes_factor * self.kes, kdi_factor * self.kdi, kint, self.feedforward)


@dataclass(frozen=True)
class TargetDynamics:
    """Closed-loop pH mechanical system.

    Matrix-derivative evaluators return stacks with shape ``(n, n, n)``.
    ``p_independent`` promises that ``dd`` and ``j2`` ignore ``p``, which lets
    samplers evaluate them once per configuration.
    """

    n: int
    mass: Callable[[np.ndarray], np.ndarray]
    mass_partials: Callable[[np.ndarray], np.ndarray]
    md: Callable[[np.ndarray], np.ndarray]
    md_partials: Callable[[np.ndarray], np.ndarray]
    ud: Callable[[np.ndarray], float]
    ud_grad: Callable[[np.ndarray], np.ndarray]
    ud_hess: Callable[[np.ndarray], np.ndarray]
    dd: Callable[[np.ndarray, np.ndarray], np.ndarray]
    j2: Callable[[np.ndarray, np.ndarray], np.ndarray]
    q_star: np.ndarray
    provenance: str = "custom"
    p_independent: bool = False
    md_is_mass: bool = False
    input_matrix: np.ndarray | None = None

    def hamiltonian(self, x) -> float:
        x = np.asarray(x, dtype=float)
        q, p = x[: self.n], x[self.n :]
        return float(0.5 * p @ np.linalg.solve(self.md(q), p) + self.ud(q))

    def grad_hd(self, q, p) -> tuple[np.ndarray, np.ndarray]:
        w = np.linalg.solve(self.md(q), p)
        dmd = self.md_partials(q)
        gq = self.ud_grad(q) - 0.5 * np.einsum("j,ijk,k->i", w, dmd, w)
        return gq, w

    def field(self, x, d=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = self.n
        q, p = x[:n], x[n:]
        gq, w = self.grad_hd(q, p)
        mq = self.mass(q)
        qdot = np.linalg.solve(mq, p)
        if self.md_is_mass:
            force = gq
        else:
            force = self.md(q) @ np.linalg.solve(mq, gq)
        pdot = -force + (self.j2(q, p) - self.dd(q, p)) @ w
        out = np.concatenate([qdot, pdot])
        if d is not None:
            out = out + d
        return out

    def at_equilibrium(self) -> dict:
        """Equilibrium-evaluated matrices (Md*, M*, hess Ud*, Dd*, J2*)."""
        q = self.q_star
        z = np.zeros(self.n)
        return {
            "md": np.asarray(self.md(q), dtype=float),
            "m": np.asarray(self.mass(q), dtype=float),
            "hess_ud": sym(np.asarray(self.ud_hess(q), dtype=float)),
            "dd": np.asarray(self.dd(q, z), dtype=float),
            "j2": np.asarray(self.j2(q, z), dtype=float),
        }

    def with_j2(self, j2: Callable, p_independent: bool | None = None) -> "TargetDynamics":
        changes = {"j2": j2, "provenance": "custom"}
        if p_independent is not None:
            changes["p_independent"] = p_independent
        return replace(self, **changes)


def kappa(model: MechanicalModel, gains: ControllerGains, q) -> np.ndarray:
    if gains.feedforward == "none":
        return np.zeros(model.m)
    if model.m < model.n:
        raise UnsupportedConfigurationError(
            "gravity_compensation needs a fully actuated model (m = n); use feedforward 'none'"
        )
    # G is square and invertible here, so G kappa cancels grad U exactly
    return np.linalg.solve(model.input_matrix, model.potential_grad(q))


def control_law(model: MechanicalModel, gains: ControllerGains, q_star, q, p) -> np.ndarray:
    q_star = as_vector(q_star, model.n, "q_star")
    q = as_vector(q, model.n, "q")
    p = as_vector(p, model.n, "p")
    if not check_equilibrium(model, q_star).ok:
        raise AdmissibilityError(f"q_star={q_star.tolist()} is not an assignable equilibrium")
    g, gperp = model.input_matrix, model.annihilator
    qdot = np.linalg.solve(model.mass_matrix(q), p)
    u = -gains.kes @ g.T @ (q - q_star) - gains.kdi @ g.T @ qdot
    if model.ell:
        u = u - gains.kint_matrix(model) @ gperp @ qdot
    return u + kappa(model, gains, q)


def dd_at(model: MechanicalModel, gains: ControllerGains, q, p) -> np.ndarray:
    g = model.input_matrix
    coupling = g @ gains.kint_matrix(model) @ model.annihilator
    return model.damping(q, p) + g @ gains.kdi @ g.T + sym(coupling)


def build_target(model: MechanicalModel, gains: ControllerGains, q_star, strict: bool = True) -> TargetDynamics:
    """Closed loop of ``model`` under the PBC law.

    With ``strict=False`` a non-PSD ``Dd`` at the equilibrium is tolerated so
    that analysis can report it instead of stopping.
    """
    q_star = as_vector(q_star, model.n, "q_star")
    gains.validate(model)
    eq = check_equilibrium(model, q_star)
    if not eq.ok:
        raise AdmissibilityError(
            f"q_star={q_star.tolist()} is not an assignable equilibrium (residual {eq.residual:.3g})"
        )
    g = model.input_matrix
    kshape = g @ gains.kes @ g.T
    if gains.feedforward == "gravity_compensation":
        kappa(model, gains, q_star)  # raises for underactuated models
        base_u = lambda q: 0.0
        base_grad = lambda q: np.zeros(model.n)
        base_hess = lambda q: np.zeros((model.n, model.n))
        provenance = "fully_actuated_case"
    else:
        base_u, base_grad, base_hess = model.potential, model.potential_grad, model.potential_hess
        provenance = "underactuated_case"

    def ud(q):
        e = q - q_star
        return float(base_u(q)) + 0.5 * float(e @ kshape @ e)

    coupling = g @ gains.kint_matrix(model) @ model.annihilator
    j2_const = -0.5 * (coupling - coupling.T)
    extra_d = g @ gains.kdi @ g.T + sym(coupling)

    target = TargetDynamics(
        n=model.n,
        mass=model.mass_matrix,
        mass_partials=model.mass_partials,
        md=model.mass_matrix,
        md_partials=model.mass_partials,
        ud=ud,
        ud_grad=lambda q: base_grad(q) + kshape @ (q - q_star),
        ud_hess=lambda q: base_hess(q) + kshape,
        dd=lambda q, p: model.damping(q, p) + extra_d,
        j2=lambda q, p: j2_const,
        q_star=q_star,
        provenance=provenance,
        p_independent=not model.damping_depends_on_p,
        md_is_mass=True,
        input_matrix=g,
    )
    dmin = lam_min(target.dd(q_star, np.zeros(model.n)))
    if strict and dmin < -TOL_PSD:
        raise AdmissibilityError(
            f"closed-loop damping Dd is not PSD at the equilibrium (min eigenvalue {dmin:.4g}); "
            "check Kint with kint_admissible"
        )
    return target


def custom_target(
    mass: Callable,
    md: Callable,
    ud: Callable,
    dd: Callable,
    j2: Callable,
    q_star,
    ud_grad: Callable | None = None,
    ud_hess: Callable | None = None,
    mass_partials: Callable | None = None,
    md_partials: Callable | None = None,
    p_independent: bool = False,
    input_matrix=None,
) -> TargetDynamics:
    """Target supplied directly (e.g. from an IDA-PBC design); missing derivatives use finite differences."""
    q_star = as_vector(q_star, name="q_star")
    n = q_star.size
    if ud_grad is None:
        ud_grad = lambda q: fd_gradient(ud, q)
    if ud_hess is None:
        ud_hess = lambda q: sym(fd_jacobian(ud_grad, q))
    if mass_partials is None:
        mass_partials = lambda q: fd_matrix_partials(mass, q)
    if md_partials is None:
        md_partials = lambda q: fd_matrix_partials(md, q)
    return TargetDynamics(
        n=n,
        mass=mass,
        mass_partials=mass_partials,
        md=md,
        md_partials=md_partials,
        ud=ud,
        ud_grad=ud_grad,
        ud_hess=ud_hess,
        dd=dd,
        j2=j2,
        q_star=q_star,
        provenance="custom",
        p_independent=p_independent,
        md_is_mass=md is mass,
        input_matrix=None if input_matrix is None else np.asarray(input_matrix, dtype=float),
    )


def disturbance_vector(d, n: int) -> np.ndarray:
    """Full ``2n`` disturbance; a length-``n`` vector is a force on the momentum channel."""
    d = as_vector(d, name="disturbance")
    if d.size == n:
        return np.concatenate([np.zeros(n), d])
    if d.size != 2 * n:
        raise DimensionError(f"disturbance must have length {n} or {2 * n}, got {d.size}")
    return d


def closedloop_vector_field(target: TargetDynamics, x, d=None) -> np.ndarray:
    x = as_vector(x, 2 * target.n, "state")
    if d is not None:
        d = disturbance_vector(d, target.n)
    return target.field(x, d)


class KintCheck(NamedTuple):
    ok: bool
    margin: float
    schur: np.ndarray


def kint_admissible(model: MechanicalModel, gains: ControllerGains, q=None) -> KintCheck:
    """Schur-complement test that ``Dd`` stays positive definite with ``Kint``.

    For block-diagonal ``D`` this is
    ``Da + G1 Kdi G1' - 1/4 G1 Kint Du^-1 Kint' G1' > 0``.
    """
    q = np.zeros(model.n) if q is None else as_vector(q, model.n, "q")
    dd = dd_at(model, gains, q, np.zeros(model.n))
    ell = model.ell
    if ell == 0:
        margin = lam_min(dd)
        return KintCheck(margin > 0.0, margin, dd)
    duu = dd[:ell, :ell]
    if np.linalg.cond(duu) > 1e12:
        raise AdmissibilityError(
            "unactuated damping block Du is singular; the Schur test does not apply, check Dd directly"
        )
    schur = dd[ell:, ell:] - dd[ell:, :ell] @ np.linalg.solve(duu, dd[:ell, ell:])
    margin = lam_min(schur)
    return KintCheck(margin > 0.0, margin, sym(schur))


@dataclass
class ConditionResult:
    ok: bool
    value: float
    witness: list

    def as_dict(self) -> dict:
        return {"ok": self.ok, "value": self.value, "witness": self.witness}


def check_assumption2(target: TargetDynamics, region: Region, momenta=None) -> dict[str, ConditionResult]:
    """Sampled check of strong convexity (c1), bounded Md (c2) and Dd > 0 (c3)."""
    qs = region.grid()
    ps = [np.zeros(target.n)] if momenta is None else list(momenta)
    c1 = (np.inf, None)
    c2 = (0.0, None)
    c3 = (np.inf, None)
    for q in qs:
        h = lam_min(target.ud_hess(q))
        if h < c1[0]:
            c1 = (h, q)
        nm = float(np.linalg.norm(target.md(q), 2))
        if nm > c2[0]:
            c2 = (nm, q)
        for p in ps:
            dmin = lam_min(target.dd(q, p))
            if dmin < c3[0]:
                c3 = (dmin, np.concatenate([q, p]))
            if target.p_independent:
                break
    return {
        "c1": ConditionResult(bool(c1[0] > 0.0), float(c1[0]), np.asarray(c1[1]).tolist()),
        "c2": ConditionResult(bool(np.isfinite(c2[0])), float(c2[0]), np.asarray(c2[1]).tolist()),
        "c3": ConditionResult(bool(c3[0] > 0.0), float(c3[0]), np.asarray(c3[1]).tolist()),
    }


def stationarity_residual(target: TargetDynamics) -> float:
    return float(np.linalg.norm(target.ud_grad(target.q_star)))


__all__ = [
    "ControllerGains",
    "TargetDynamics",
    "KintCheck",
    "build_target",
    "custom_target",
    "control_law",
    "closedloop_vector_field",
    "disturbance_vector",
    "kint_admissible",
    "check_assumption2",
    "stationarity_residual",
    "TOL_EQ",
]
