"""Exponential and input-to-state stability estimates for a target system.

Everything here lives in hatted coordinates

    q_hat = q - q*,   p_hat = Td(q)' p,   Td Td' = Md^-1  (Td upper-triangular)

where the closed loop reads

    q_hat_dot = A_hat p_hat
    p_hat_dot = -A_hat' grad U_hat + (J_hat - D_hat) p_hat

with ``A_hat = M^-1 Td^-T``.  The Lyapunov candidate is
``S = H_hat + eps p_hat' A_hat' grad U_hat`` and ``S_dot = -z' Ups z`` with
``z = (grad U_hat, p_hat)``.

Bounds are taken over a sampled region, so they are heuristic rather than
certified.  Two flavours are reported side by side: formulas that assume
``|grad H_hat| >= beta_max |x_hat|`` and sound ones that only use
``|grad H_hat| >= beta_min |x_hat|``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from scipy.optimize import minimize_scalar

from ._linalg import as_vector, fd_matrix_partials, reverse_cholesky, sigma_max, sym
from .closedloop import TargetDynamics, disturbance_vector
from .errors import InfeasibleError, ModelInvariantError, ParameterError
from .model import Region

EPS_HI = 1.0
EPS_FLOOR = 1e-12
BISECT_RTOL = 1e-6
MOMENTUM_RADII = 5
MOMENTUM_DIRECTIONS = 8
CHUNK = 20000


@dataclass(frozen=True)
class HatSystem:
    """Hatted coordinates of a target; all methods take hatted arguments."""

    target: TargetDynamics
    fd_rel: float = 1e-6

    @property
    def n(self) -> int:
        return self.target.n

    @property
    def q_star(self) -> np.ndarray:
        return self.target.q_star

    def _q(self, qh) -> np.ndarray:
        return self.q_star + as_vector(qh, self.n, "q_hat")

    def _split(self, xh) -> tuple[np.ndarray, np.ndarray]:
        xh = as_vector(xh, 2 * self.n, "x_hat")
        return xh[: self.n], xh[self.n :]

    @property
    def input_matrix(self) -> np.ndarray:
        g = self.target.input_matrix
        return np.eye(self.n) if g is None else g

    def td(self, qh) -> np.ndarray:
        q = self._q(qh)
        try:
            return reverse_cholesky(np.linalg.inv(self.target.md(q)), "Md^-1")
        except (ModelInvariantError, np.linalg.LinAlgError) as exc:
            raise ModelInvariantError(f"Md is not SPD at q={q.tolist()}") from exc

    def td_partials(self, qh) -> np.ndarray:
        return fd_matrix_partials(self.td, as_vector(qh, self.n), self.fd_rel)

    def a_hat(self, qh) -> np.ndarray:
        return np.linalg.solve(self.target.mass(self._q(qh)), np.linalg.inv(self.td(qh)).T)

    def a_hat_partials(self, qh) -> np.ndarray:
        return fd_matrix_partials(self.a_hat, as_vector(qh, self.n), self.fd_rel)

    def u_hat(self, qh) -> float:
        return float(self.target.ud(self._q(qh)) - self.target.ud(self.q_star))

    def u_grad(self, qh) -> np.ndarray:
        return np.asarray(self.target.ud_grad(self._q(qh)), dtype=float)

    def u_hess(self, qh) -> np.ndarray:
        return sym(np.asarray(self.target.ud_hess(self._q(qh)), dtype=float))

    def to_hat(self, x) -> np.ndarray:
        x = as_vector(x, 2 * self.n, "state")
        qh = x[: self.n] - self.q_star
        return np.concatenate([qh, self.td(qh).T @ x[self.n :]])

    def from_hat(self, xh) -> np.ndarray:
        qh, ph = self._split(xh)
        return np.concatenate([self._q(qh), np.linalg.solve(self.td(qh).T, ph)])

    def _p(self, qh, ph, td=None) -> np.ndarray:
        td = self.td(qh) if td is None else td
        return np.linalg.solve(td.T, ph)

    def d_hat(self, xh) -> np.ndarray:
        qh, ph = self._split(xh)
        td = self.td(qh)
        return td.T @ self.target.dd(self._q(qh), self._p(qh, ph, td)) @ td

    def _z(self, td, dtd, ph) -> np.ndarray:
        """``Z[:, i] = d(Td')/dq_i p`` with ``p = Td^-T p_hat``."""
        b = np.linalg.solve(td, dtd).transpose(0, 2, 1)  # b[i] = (Td^-1 dTd_i)'
        return np.einsum("ijl,l->ji", b, ph)

    def j_hat(self, xh) -> np.ndarray:
        qh, ph = self._split(xh)
        td, dtd, a = self.td(qh), self.td_partials(qh), self.a_hat(qh)
        za = self._z(td, dtd, ph) @ a
        j0 = td.T @ self.target.j2(self._q(qh), self._p(qh, ph, td)) @ td
        return j0 + za - za.T

    def a_hat_dot(self, xh) -> np.ndarray:
        """Time derivative of ``A_hat`` along ``q_hat_dot = A_hat p_hat``."""
        qh, ph = self._split(xh)
        return np.einsum("i,ijk->jk", self.a_hat(qh) @ ph, self.a_hat_partials(qh))

    def field(self, xh, d_hat=None) -> np.ndarray:
        qh, ph = self._split(xh)
        a = self.a_hat(qh)
        out = np.concatenate([a @ ph, -a.T @ self.u_grad(qh) + (self.j_hat(xh) - self.d_hat(xh)) @ ph])
        return out if d_hat is None else out + d_hat

    def output(self, xh) -> np.ndarray:
        qh, ph = self._split(xh)
        return self.input_matrix.T @ self.td(qh) @ ph

    def output_gain(self, qh) -> float:
        return sigma_max(self.input_matrix.T @ self.td(qh))

    def hamiltonian(self, xh) -> float:
        qh, ph = self._split(xh)
        return float(0.5 * ph @ ph + self.u_hat(qh))

    def lyapunov(self, xh, epsilon: float) -> float:
        qh, ph = self._split(xh)
        return self.hamiltonian(xh) + float(epsilon * ph @ self.a_hat(qh).T @ self.u_grad(qh))


def build_hat_system(target: TargetDynamics) -> HatSystem:
    hat = HatSystem(target)
    hat.td(np.zeros(target.n))  # fail early on a non-SPD Md at the equilibrium
    return hat


def upsilon_d(hat: HatSystem, epsilon: float, qh) -> np.ndarray:
    """Disturbance coupling ``[[I, eps Hess A], [eps A', I]]``."""
    a, h = hat.a_hat(qh), hat.u_hess(qh)
    eye = np.eye(hat.n)
    return np.block([[eye, epsilon * h @ a], [epsilon * a.T, eye]])


def upsilon_sym(hat: HatSystem, epsilon: float, xh, exact: bool = False) -> np.ndarray:
    """Symmetric matrix with ``S_dot = -z' Ups z``.

    ``exact=False`` uses ``Ups11 = eps (A A' + A' A)``; ``exact=True`` uses
    ``eps A A'``, which is what differentiating ``S`` actually yields.
    """
    qh, ph = hat._split(xh)
    a = hat.a_hat(qh)
    u11 = a @ a.T if exact else a @ a.T + a.T @ a
    u12 = 0.5 * (a @ (hat.d_hat(xh) - hat.j_hat(xh)) - hat.a_hat_dot(xh))
    u22 = hat.d_hat(xh) - epsilon * a.T @ hat.u_hess(qh) @ a
    out = np.block([[epsilon * u11, epsilon * u12], [epsilon * u12.T, u22]])
    return sym(out)


def momentum_samples(n: int, radius: float) -> np.ndarray:
    """Origin plus rings of radius ``radius * k / 5`` in every coordinate plane."""
    radii = radius * np.arange(1, MOMENTUM_RADII + 1) / MOMENTUM_RADII
    pts = [np.zeros(n)]
    if n == 1:
        for r in radii:
            pts.extend([np.array([r]), np.array([-r])])
        return np.array(pts)
    angles = 2.0 * np.pi * np.arange(MOMENTUM_DIRECTIONS) / MOMENTUM_DIRECTIONS
    for i in range(n):
        for j in range(i + 1, n):
            for r in radii:
                for th in angles:
                    v = np.zeros(n)
                    v[i], v[j] = r * np.cos(th), r * np.sin(th)
                    pts.append(v)
    return np.array(pts)


@dataclass
class _Bank:
    """Sample stacks so that ``Ups(eps) = eps X + Y`` is cheap to re-evaluate."""

    aat: np.ndarray  # (N, n, n) A A'
    ata: np.ndarray  # (N, n, n) A' A
    x12: np.ndarray  # (N, n, n)
    x22: np.ndarray  # (N, n, n)
    y22: np.ndarray  # (N, n, n)
    states: np.ndarray  # (N, 2n) hatted witnesses

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def chunks(self) -> Iterator[slice]:
        for s in range(0, self.size, CHUNK):
            yield slice(s, min(s + CHUNK, self.size))

    def assemble(self, epsilon: float, sl: slice, exact: bool = True) -> np.ndarray:
        u11 = self.aat[sl] if exact else self.aat[sl] + self.ata[sl]
        top = np.concatenate([epsilon * u11, epsilon * self.x12[sl]], axis=2)
        bot = np.concatenate([epsilon * self.x12[sl].transpose(0, 2, 1), self.y22[sl] + epsilon * self.x22[sl]], axis=2)
        return sym(np.concatenate([top, bot], axis=1))

    def lam_mins(self, epsilon: float, exact: bool = True) -> np.ndarray:
        return np.concatenate([np.linalg.eigvalsh(self.assemble(epsilon, sl, exact))[:, 0] for sl in self.chunks()])

    def positive_definite(self, epsilon: float) -> bool:
        for sl in self.chunks():
            try:
                np.linalg.cholesky(self.assemble(epsilon, sl))
            except np.linalg.LinAlgError:
                return False
        return True


@dataclass
class _QData:
    qh: np.ndarray
    td: np.ndarray
    a: np.ndarray
    hess: np.ndarray
    out_gain: float


class StabilityAnalysis:
    """Sampled ingredients shared by the epsilon search, mu and the bounds."""

    def __init__(self, target: TargetDynamics, region: Region, p_radius: float = 1.0):
        if not region.contains(target.q_star):
            raise ParameterError("the analysis region must contain the equilibrium")
        if p_radius <= 0:
            raise ParameterError("momentum sampling radius must be positive")
        self.target = target
        self.hat = build_hat_system(target)
        self.region = region
        self.p_radius = float(p_radius)
        self.momenta = momentum_samples(target.n, self.p_radius)
        self.qdata = [self._qdata(q - target.q_star) for q in region.grid()]
        self._bank: _Bank | None = None

    def _qdata(self, qh) -> _QData:
        hat = self.hat
        td = hat.td(qh)
        a = np.linalg.solve(self.target.mass(hat._q(qh)), np.linalg.inv(td).T)
        return _QData(qh, td, a, hat.u_hess(qh), sigma_max(hat.input_matrix.T @ td))

    @property
    def sigma_a(self) -> float:
        return max(sigma_max(d.a) for d in self.qdata)

    @property
    def output_gain(self) -> float:
        return max(d.out_gain for d in self.qdata)

    def bank(self) -> _Bank:
        if self._bank is None:
            self._bank = self._build_bank()
        return self._bank

    def _build_bank(self) -> _Bank:
        hat, t = self.hat, self.target
        n, P = t.n, self.momenta
        k = P.shape[0]
        parts = {key: [] for key in ("aat", "ata", "x12", "x22", "y22", "states")}
        for d in self.qdata:
            q = hat._q(d.qh)
            a = d.a
            dtd = hat.td_partials(d.qh)
            da = hat.a_hat_partials(d.qh)
            b = np.linalg.solve(d.td, dtd).transpose(0, 2, 1)
            z = np.einsum("ijl,kl->kji", b, P)
            za = z @ a
            adot = np.einsum("ki,ijl->kjl", P @ a.T, da)
            ps = np.linalg.solve(d.td.T, P.T).T
            if t.p_independent:
                dd0 = d.td.T @ t.dd(q, ps[0]) @ d.td
                dh = np.broadcast_to(dd0, (k, n, n))
                j0 = np.broadcast_to(d.td.T @ t.j2(q, ps[0]) @ d.td, (k, n, n))
            else:
                dh = np.stack([d.td.T @ t.dd(q, p) @ d.td for p in ps])
                j0 = np.stack([d.td.T @ t.j2(q, p) @ d.td for p in ps])
            jh = j0 + za - za.transpose(0, 2, 1)
            parts["aat"].append(np.broadcast_to(a @ a.T, (k, n, n)))
            parts["ata"].append(np.broadcast_to(a.T @ a, (k, n, n)))
            parts["x12"].append(0.5 * (a @ (dh - jh) - adot))
            parts["x22"].append(np.broadcast_to(-a.T @ d.hess @ a, (k, n, n)))
            parts["y22"].append(np.array(dh))
            parts["states"].append(np.hstack([np.broadcast_to(d.qh, (k, n)), P]))
        return _Bank(**{key: np.concatenate(v) for key, v in parts.items()})


def compute_betas(analysis: StabilityAnalysis) -> tuple[float, float]:
    lo, hi, witness = np.inf, -np.inf, None
    for d in analysis.qdata:
        ev = np.linalg.eigvalsh(d.hess)
        if ev[0] < lo:
            lo, witness = ev[0], d.qh
        hi = max(hi, ev[-1])
    if lo <= 0.0:
        q = analysis.target.q_star + witness
        raise InfeasibleError(
            f"Ud is not strongly convex on the region: min Hessian eigenvalue {lo:.4g} at q={q.tolist()}"
        )
    return min(1.0, float(lo)), max(1.0, float(hi))


def _k1_cap(beta_min: float, beta_max: float, sigma_a: float) -> float:
    return beta_min / (sigma_a * beta_max**2) if sigma_a > 0 else np.inf


def _diagnose(analysis: StabilityAnalysis, epsilon: float) -> str:
    bank = analysis.bank()
    ev22 = np.concatenate(
        [np.linalg.eigvalsh(sym(bank.y22[sl] + epsilon * bank.x22[sl]))[:, 0] for sl in bank.chunks()]
    )
    if ev22.min() <= 0.0:
        which, ev = "Ups22 > 0", ev22
    else:
        which, ev = "Schur complement of Ups11 > 0", bank.lam_mins(epsilon)
    i = int(np.argmin(ev))
    xh = bank.states[i]
    return f"condition '{which}' fails (min eigenvalue {ev[i]:.3g}) at x_hat={np.round(xh, 6).tolist()}"


def find_epsilon(analysis: StabilityAnalysis, betas: tuple[float, float] | None = None, eps_hi: float = EPS_HI) -> float:
    """Largest eps in (0, eps_hi] with k1 > 0 and Ups > 0 at every sample."""
    beta_min, beta_max = compute_betas(analysis) if betas is None else betas
    cap = _k1_cap(beta_min, beta_max, analysis.sigma_a)
    hi = min(eps_hi, cap * (1.0 - 1e-9))
    bank = analysis.bank()
    if hi < EPS_FLOOR:
        raise InfeasibleError("condition 'k1 > 0' fails for every eps >= 1e-12")
    if not bank.positive_definite(EPS_FLOOR):
        raise InfeasibleError("no feasible eps: " + _diagnose(analysis, EPS_FLOOR))
    if bank.positive_definite(hi):
        return float(hi)
    lo = EPS_FLOOR
    while hi - lo > BISECT_RTOL * hi:
        mid = 0.5 * (lo + hi)
        if bank.positive_definite(mid):
            lo = mid
        else:
            hi = mid
    return float(lo)


def estimate_mu(analysis: StabilityAnalysis, epsilon: float, exact: bool = True) -> tuple[float, np.ndarray]:
    """Sampled ``min lambda_min(Ups)`` and the hatted state where it occurs."""
    bank = analysis.bank()
    lams = bank.lam_mins(epsilon, exact)
    i = int(np.argmin(lams))
    mu = float(lams[i])
    if mu <= 0.0 and exact:
        raise InfeasibleError(
            f"Ups is not positive definite at x_hat={np.round(bank.states[i], 6).tolist()} "
            f"(min eigenvalue {mu:.3g}); region and eps are inconsistent"
        )
    return mu, bank.states[i]


def rate_paper_formula(mu: float, epsilon: float, beta_max: float, sigma_a: float) -> float:
    return mu * beta_max / (1.0 + epsilon * sigma_a * beta_max)


def rate_sound_formula(mu: float, epsilon: float, beta_min: float, beta_max: float, sigma_a: float) -> float:
    return mu * beta_min**2 / (beta_max * (1.0 + epsilon * sigma_a * beta_max))


def choose_epsilon(analysis: StabilityAnalysis, eps_max: float, betas: tuple[float, float], active: int = 2000) -> float:
    """Operating eps maximizing the sound decay rate.

    The search runs over ``(0, min(eps_max, eps_k1 / 2)]`` where ``eps_k1``
    zeroes ``k1``; stopping at half keeps ``sqrt(k2 / k1)`` moderate.  It
    uses the samples that are tightest at a few probe values; the reported
    ``mu`` is always recomputed on the full sample set.
    """
    beta_min, beta_max = betas
    sa = analysis.sigma_a
    upper = min(eps_max, 0.5 * _k1_cap(beta_min, beta_max, sa))
    bank = analysis.bank()
    keep = set()
    for frac in (0.05, 0.5, 1.0):
        lams = bank.lam_mins(frac * upper)
        keep.update(np.argsort(lams)[:active].tolist())
    idx = np.array(sorted(keep))
    sub = _Bank(*(getattr(bank, f)[idx] for f in ("aat", "ata", "x12", "x22", "y22", "states")))

    def neg_rate(e):
        return -rate_sound_formula(float(np.min(sub.lam_mins(e))), e, beta_min, beta_max, sa)

    res = minimize_scalar(neg_rate, bounds=(0.0, upper), method="bounded", options={"xatol": 1e-4 * upper})
    best = float(res.x)
    # bounded search never probes the endpoint itself
    if neg_rate(upper) <= neg_rate(best):
        best = upper
    return best


def k_constants(epsilon: float, beta_min: float, beta_max: float, sigma_a: float) -> tuple[float, float]:
    k1 = 0.5 * (beta_min - epsilon * sigma_a * beta_max**2)
    k2 = 0.5 * (beta_max + epsilon * sigma_a * beta_max**2)
    return k1, k2


def es_bounds(mu, epsilon, beta_min, beta_max, sigma_a, output_gain, xh0_norm) -> dict:
    k1, k2 = k_constants(epsilon, beta_min, beta_max, sigma_a)
    if k1 <= 0.0:
        raise InfeasibleError(f"k1 = {k1:.4g} <= 0; eps = {epsilon:.4g} is too large")
    return {
        "rate_paper": rate_paper_formula(mu, epsilon, beta_max, sigma_a),
        "rate_sound": rate_sound_formula(mu, epsilon, beta_min, beta_max, sigma_a),
        "k1": k1,
        "k2": k2,
        "xi": output_gain * np.sqrt(k2 / k1) * xh0_norm,
    }


def iss_bounds(analysis: StabilityAnalysis, epsilon, mu, betas, theta, s0, rates, d_hat_norm=None) -> dict:
    if not 0.0 < theta < 1.0:
        raise ParameterError(f"theta must lie in (0, 1), got {theta}")
    beta_min, beta_max = betas
    varphi = max(sigma_max(upsilon_d(analysis.hat, epsilon, d.qh)) for d in analysis.qdata)
    g_r = mu * beta_max * theta / varphi
    g_sound = mu * beta_min * theta / varphi
    out = {
        "varphi": float(varphi),
        "gain_margin": float(g_r),
        "gain_margin_sound": float(g_sound),
        "rate2": rates["rate_paper"] * (1.0 - theta),
        "rate2_sound": rates["rate_sound"] * (1.0 - theta),
        "l2_state_bound": s0 / (mu * beta_max**2 * (1.0 - theta)),
        "l2_state_bound_sound": s0 / (mu * beta_min**2 * (1.0 - theta)),
        "l2_dist_bound": mu * theta**2 * s0 / (varphi**2 * (1.0 - theta)),
        "disturbance_hat_norm": None if d_hat_norm is None else float(d_hat_norm),
        "ultimate_radius": None if d_hat_norm is None else float(d_hat_norm / g_r),
        "ultimate_radius_sound": None if d_hat_norm is None else float(d_hat_norm / g_sound),
    }
    return out


def disturbance_hat_norm(analysis: StabilityAnalysis, d) -> float:
    """Largest ``|(d_q, Td' d_p)|`` over the sampled configurations."""
    n = analysis.target.n
    d = disturbance_vector(d, n)
    return max(float(np.linalg.norm(np.concatenate([d[:n], q.td.T @ d[n:]]))) for q in analysis.qdata)


@dataclass
class EsIssReport:
    epsilon: float
    epsilon_max: float
    mu: float
    mu_paper: float
    beta_min: float
    beta_max: float
    sigma_a: float
    k1: float
    k2: float
    rate_paper: float
    rate_sound: float
    xi: float
    theta: float
    varphi: float
    gain_margin: float
    gain_margin_sound: float
    rate2: float
    rate2_sound: float
    ultimate_radius: float | None
    ultimate_radius_sound: float | None
    disturbance_hat_norm: float | None
    l2_state_bound: float
    l2_state_bound_sound: float
    l2_dist_bound: float
    x_hat0: list = field(default_factory=list)
    x_hat0_norm: float = 0.0
    s0: float = 0.0
    output_gain: float = 0.0
    p_radius: float = 0.0
    samples: int = 0
    mu_witness: list = field(default_factory=list)

    def envelope(self, t) -> np.ndarray:
        """Sound bound on ``|x_hat(t)|``."""
        return np.sqrt(self.k2 / self.k1) * self.x_hat0_norm * np.exp(-self.rate_sound * np.asarray(t))

    def as_dict(self) -> dict:
        return asdict(self)


def es_iss_report(
    target: TargetDynamics,
    region: Region,
    x0,
    theta: float = 0.5,
    p_radius: float | None = None,
    disturbance=None,
    epsilon: float | None = None,
    analysis: StabilityAnalysis | None = None,
) -> EsIssReport:
    """Full pipeline: betas, eps search, mu, ES and ISS bounds for initial state ``x0``.

    ``p_radius`` is the momentum sampling radius; the effective radius is
    ``max(1.5 |p_hat0|, p_radius)``.  Passing ``epsilon`` skips the
    automatic choice (it is still checked against the feasible maximum).
    """
    if not 0.0 < theta < 1.0:
        raise ParameterError(f"theta must lie in (0, 1), got {theta}")
    n = target.n
    hat = build_hat_system(target)
    xh0 = hat.to_hat(as_vector(x0, 2 * n, "x0"))
    radius = max(1.5 * float(np.linalg.norm(xh0[n:])), 0.0 if p_radius is None else float(p_radius))
    if radius == 0.0:
        radius = 1.0
    if analysis is None or analysis.p_radius != radius:
        analysis = StabilityAnalysis(target, region, radius)
    betas = compute_betas(analysis)
    eps_max = find_epsilon(analysis, betas)
    if epsilon is None:
        eps = choose_epsilon(analysis, eps_max, betas)
    else:
        if not 0.0 < epsilon <= eps_max:
            raise InfeasibleError(f"eps = {epsilon:.4g} is outside the feasible range (0, {eps_max:.4g}]")
        eps = float(epsilon)
    mu, witness = estimate_mu(analysis, eps, exact=True)
    mu_paper, _ = estimate_mu(analysis, eps, exact=False)
    sa, og = analysis.sigma_a, analysis.output_gain
    xn = float(np.linalg.norm(xh0))
    es = es_bounds(mu, eps, betas[0], betas[1], sa, og, xn)
    s0 = hat.lyapunov(xh0, eps)
    dn = None if disturbance is None else disturbance_hat_norm(analysis, disturbance)
    iss = iss_bounds(analysis, eps, mu, betas, theta, s0, es, dn)
    return EsIssReport(
        epsilon=eps,
        epsilon_max=eps_max,
        mu=mu,
        mu_paper=mu_paper,
        beta_min=betas[0],
        beta_max=betas[1],
        sigma_a=sa,
        theta=theta,
        x_hat0=xh0.tolist(),
        x_hat0_norm=xn,
        s0=s0,
        output_gain=og,
        p_radius=radius,
        samples=analysis.bank().size,
        mu_witness=np.asarray(witness).tolist(),
        **es,
        **iss,
    )
