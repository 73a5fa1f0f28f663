"""Canonical Hamiltonian form of a target and the intrinsic-gyroscopic test.

With ``p_c = M Md^-1 p + Qd(q)`` the target becomes a system with the
symplectic interconnection ``[[0, I], [-I, 0]]`` exactly when

    J2 = Md M^-1 [X' - X] M^-1 Md  +  Md M^-1 [S' - S] M^-1 Md,

where ``X = d(M Md^-1 p)/dq`` and ``S = dQd/dq``.  The second term
vanishes iff ``S`` is symmetric; otherwise the gyroscopic terms are
intrinsic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._linalg import as_square, as_vector, fd_jacobian, skew
from .closedloop import TargetDynamics
from .errors import NotCanonicalizableError
from .model import Region

INTRINSIC_TOL = 1e-9


@dataclass(frozen=True)
class GyroGenerator:
    """Smooth ``Qd(q)`` with Jacobian ``qd_jac[i, j] = dQd_i/dq_j``."""

    qd: Callable[[np.ndarray], np.ndarray]
    qd_jac: Callable[[np.ndarray], np.ndarray]
    kind: str = "custom"
    data: np.ndarray | None = None

    @classmethod
    def zero(cls, n: int) -> "GyroGenerator":
        return cls(lambda q: np.zeros(n), lambda q: np.zeros((n, n)), "zero", None)

    @classmethod
    def constant(cls, c) -> "GyroGenerator":
        c = as_vector(c, name="Qd constant")
        n = c.size
        return cls(lambda q: c.copy(), lambda q: np.zeros((n, n)), "constant", c)

    @classmethod
    def linear(cls, s) -> "GyroGenerator":
        s = as_square(s, name="Qd linear map")
        return cls(lambda q: s @ q, lambda q: s, "linear", s)

    @classmethod
    def from_function(cls, qd: Callable) -> "GyroGenerator":
        return cls(qd, lambda q: fd_jacobian(qd, q), "custom", None)

    def describe(self) -> dict:
        return {"kind": self.kind, "value": None if self.data is None else self.data.tolist()}


def canonical_momentum(target: TargetDynamics, gen: GyroGenerator, q, p) -> np.ndarray:
    q = as_vector(q, target.n, "q")
    p = as_vector(p, target.n, "p")
    return target.mass(q) @ np.linalg.solve(target.md(q), p) + gen.qd(q)


def momentum_from_canonical(target: TargetDynamics, gen: GyroGenerator, q, pc) -> np.ndarray:
    q = as_vector(q, target.n, "q")
    pc = as_vector(pc, target.n, "p_c")
    return target.md(q) @ np.linalg.solve(target.mass(q), pc - gen.qd(q))


def _momentum_map_jacobian(target: TargetDynamics, q, p) -> np.ndarray:
    """``X[:, i] = d(M Md^-1 p)/dq_i`` by the product rule."""
    mq, mdq = target.mass(q), target.md(q)
    w = np.linalg.solve(mdq, p)
    dm = target.mass_partials(q)
    if target.md_is_mass:
        return np.zeros((target.n, target.n))
    dmd = target.md_partials(q)
    cols = [dm[i] @ w - mq @ np.linalg.solve(mdq, dmd[i] @ w) for i in range(target.n)]
    return np.stack(cols, axis=1)


def gyro_matrix(target: TargetDynamics, gen: GyroGenerator, q) -> np.ndarray:
    """``Jg(q) = Md M^-1 [S' - S] M^-1 Md``."""
    s = gen.qd_jac(q)
    left = target.md(q) @ np.linalg.inv(target.mass(q))
    return left @ (s.T - s) @ left.T


def build_j2_from_generator(target: TargetDynamics, gen: GyroGenerator) -> Callable:
    """``J2(q, p) = Jhat(q, p) + Jg(q)`` for the given ``Qd``."""

    def j2(q, p):
        left = target.md(q) @ np.linalg.inv(target.mass(q))
        x = _momentum_map_jacobian(target, q, p)
        s = gen.qd_jac(q)
        return left @ ((x.T - x) + (s.T - s)) @ left.T

    return j2


def generated_target(target: TargetDynamics, gen: GyroGenerator) -> TargetDynamics:
    """Copy of ``target`` whose ``J2`` is the one generated by ``Qd``."""
    return target.with_j2(build_j2_from_generator(target, gen), p_independent=target.p_independent and target.md_is_mass)


@dataclass(frozen=True)
class CanonicalForm:
    target: TargetDynamics
    gen: GyroGenerator
    intrinsic: bool

    @property
    def n(self) -> int:
        return self.target.n

    def mc(self, q) -> np.ndarray:
        mq = self.target.mass(q)
        return mq @ np.linalg.solve(self.target.md(q), mq)

    def mc_partials(self, q) -> np.ndarray:
        t = self.target
        mq, mdq = t.mass(q), t.md(q)
        dm, dmd = t.mass_partials(q), t.md_partials(q)
        a = np.linalg.solve(mdq, mq)  # Md^-1 M
        out = []
        for i in range(self.n):
            out.append(dm[i] @ a - a.T @ dmd[i] @ a + a.T @ dm[i])
        return np.stack(out)

    def dc(self, q, p) -> np.ndarray:
        t = self.target
        a = np.linalg.solve(t.md(q), t.mass(q))
        return a.T @ t.dd(q, p) @ a

    def jg(self, q) -> np.ndarray:
        return gyro_matrix(self.target, self.gen, q)

    def hc(self, q, pc) -> float:
        r = pc - self.gen.qd(q)
        return float(0.5 * r @ np.linalg.solve(self.mc(q), r) + self.target.ud(q))

    def to_canonical_state(self, x) -> np.ndarray:
        n = self.n
        return np.concatenate([x[:n], canonical_momentum(self.target, self.gen, x[:n], x[n:])])

    def from_canonical_state(self, xc) -> np.ndarray:
        n = self.n
        return np.concatenate([xc[:n], momentum_from_canonical(self.target, self.gen, xc[:n], xc[n:])])

    def field(self, xc) -> np.ndarray:
        """``(q_dot, pc_dot) = (Jc - Rc) grad Hc``."""
        n = self.n
        q, pc = xc[:n], xc[n:]
        r = pc - self.gen.qd(q)
        v = np.linalg.solve(self.mc(q), r)
        s = self.gen.qd_jac(q)
        dmc = self.mc_partials(q)
        grad_q = self.target.ud_grad(q) - s.T @ v - 0.5 * np.einsum("j,ijk,k->i", v, dmc, v)
        p = momentum_from_canonical(self.target, self.gen, q, pc)
        return np.concatenate([v, -grad_q - self.dc(q, p) @ v])


def _probe_states(target: TargetDynamics, region: Region | None, count: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    if region is None:
        qs = target.q_star + rng.uniform(-0.5, 0.5, size=(count, target.n))
    else:
        qs = region.random(rng, count)
    ps = rng.normal(size=(count, target.n))
    return list(zip(qs, ps))


def is_intrinsic(gen: GyroGenerator, region: Region) -> bool:
    for q in region.grid():
        s = gen.qd_jac(q)
        if np.linalg.norm(s - s.T) > INTRINSIC_TOL:
            return True
    return False


def j2_mismatch(target: TargetDynamics, gen: GyroGenerator, region: Region | None = None, count: int = 20, seed: int = 0) -> float:
    """Largest relative deviation between the target ``J2`` and the generated one."""
    j2gen = build_j2_from_generator(target, gen)
    worst = 0.0
    for q, p in _probe_states(target, region, count, seed):
        a, b = target.j2(q, p), j2gen(q, p)
        worst = max(worst, float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))))
    return worst


def to_canonical(target: TargetDynamics, gen: GyroGenerator, region: Region | None = None, rtol: float = 1e-8, seed: int = 0) -> CanonicalForm:
    dev = j2_mismatch(target, gen, region, seed=seed)
    if dev > rtol:
        raise NotCanonicalizableError(
            f"target J2 is not generated by this Qd (max relative deviation {dev:.3e} > {rtol:g})"
        )
    if region is None:
        region = Region(target.q_star, np.full(target.n, 0.5), samples_per_axis=3 if target.n <= 4 else 2)
    return CanonicalForm(target, gen, is_intrinsic(gen, region))


def generator_for_constant_j2(j2_star) -> GyroGenerator:
    """Linear ``Qd = S q`` reproducing a constant skew ``J2`` when ``Md = M``.

    Then ``J2 = S' - S``, which ``S = -J2 / 2`` satisfies.
    """
    # adding 0.0 turns -0.0 entries into 0.0 for clean serialization
    return GyroGenerator.linear(-0.5 * skew(as_square(j2_star, name="J2")) + 0.0)
