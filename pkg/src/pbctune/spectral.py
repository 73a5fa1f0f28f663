"""Spectral analysis of the closed loop linearized at the equilibrium.

With ``Md*^-1 = phi_M' phi_M`` and ``Hess Ud* = phi_P' phi_P`` (upper
Cholesky factors) the change ``z = (phi_M p~, phi_P q~)`` turns the
linearization into ``z_dot = -A z`` with the saddle-point matrix

    A = [[ phi_M (Dd* - J2*) phi_M' ,  phi_M^-T M*^-1 phi_P' ],
         [ -phi_P M*^-1 phi_M^-1    ,  0                     ]].
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from ._linalg import as_square, lam_max, lam_min, sym, upper_cholesky
from .canonical import GyroGenerator, to_canonical
from .closedloop import TargetDynamics
from .errors import ModelInvariantError, ScopeError
from .model import Region

J2_ZERO_TOL = 1e-12
V_NORM_TOL = 1e-12
DEFECTIVE_COND = 1e10


def linearize(target: TargetDynamics) -> np.ndarray:
    """``(Jd* - Rd*) Hess Hd*`` at ``(q*, 0)``.

    The kinetic cross terms of ``Hess Hd`` are linear or quadratic in ``p``
    and vanish at ``p = 0``, so the Hessian is block diagonal.
    """
    eq = target.at_equilibrium()
    n = target.n
    md, m, k = eq["md"], eq["m"], eq["hess_ud"]
    minv_md = np.linalg.solve(m, md)
    jr = np.block([[np.zeros((n, n)), minv_md], [-minv_md.T, eq["j2"] - eq["dd"]]])
    hess = np.block([[k, np.zeros((n, n))], [np.zeros((n, n)), np.linalg.inv(md)]])
    return jr @ hess


@dataclass
class SaddleForm:
    a_mat: np.ndarray
    phi_m: np.ndarray
    phi_p: np.ndarray
    psi: np.ndarray
    t_mat: np.ndarray
    dd: np.ndarray
    j2: np.ndarray
    m: np.ndarray
    md: np.ndarray
    hess_ud: np.ndarray

    @property
    def n(self) -> int:
        return self.phi_m.shape[0]

    @property
    def a12(self) -> np.ndarray:
        return self.a_mat[: self.n, self.n :]

    def block11_symmetric(self, tol: float = 1e-12) -> bool:
        b = self.a_mat[: self.n, : self.n]
        return bool(np.max(np.abs(b - b.T)) <= tol * max(1.0, np.max(np.abs(b))))


def _factors(md, hess, what_m="Md*^-1", what_p="Hess Ud*"):
    phi_m = upper_cholesky(np.linalg.inv(md), what_m)
    try:
        phi_p = upper_cholesky(hess, what_p)
    except ModelInvariantError as exc:
        raise ModelInvariantError("saddle form requires strong convexity of Ud at q* (Hessian not SPD)") from exc
    return phi_m, phi_p


def saddle_matrices(md, m, hess_ud, dd, j2) -> SaddleForm:
    md, m = as_square(md, name="Md*"), as_square(m, name="M*")
    n = md.shape[0]
    hess_ud = as_square(hess_ud, n, "Hess Ud*")
    dd, j2 = as_square(dd, n, "Dd*"), as_square(j2, n, "J2*")
    phi_m, phi_p = _factors(md, hess_ud)
    minv = np.linalg.inv(m)
    phi_m_inv = np.linalg.inv(phi_m)
    psi = phi_m @ (dd - j2) @ phi_m.T
    a12 = phi_m_inv.T @ minv @ phi_p.T
    a21 = -phi_p @ minv @ phi_m_inv
    a_mat = np.block([[psi, a12], [a21, np.zeros((n, n))]])
    t_mat = np.block([[np.zeros((n, n)), phi_m], [phi_p, np.zeros((n, n))]])
    return SaddleForm(a_mat, phi_m, phi_p, psi, t_mat, dd, j2, m, md, sym(hess_ud))


def saddle_form(target: TargetDynamics) -> SaddleForm:
    eq = target.at_equilibrium()
    return saddle_matrices(eq["md"], eq["m"], eq["hess_ud"], eq["dd"], eq["j2"])


@dataclass
class EigenCircle:
    eigenvalue: complex
    center_re: float
    center_im: float
    radius: float
    v: np.ndarray
    w: np.ndarray
    defined: bool = True
    note: str = ""

    def residual(self) -> float:
        """``| |lambda - c| - r |`` relative to ``max(1, r)``."""
        if not self.defined:
            return 0.0
        c = complex(self.center_re, self.center_im)
        return abs(abs(self.eigenvalue - c) - self.radius) / max(1.0, self.radius)


@dataclass
class CircleSet:
    circles: list
    defective: bool

    def defined(self) -> list:
        return [c for c in self.circles if c.defined]


def eigen_circles(sf: SaddleForm) -> CircleSet:
    n = sf.n
    lam, vecs = np.linalg.eig(sf.a_mat)
    defective = bool(np.linalg.cond(vecs) > DEFECTIVE_COND)
    dform = sf.phi_m @ sf.dd @ sf.phi_m.T
    jform = sf.phi_m @ sf.j2 @ sf.phi_m.T
    out = []
    for k in range(lam.size):
        v, w = vecs[:n, k], vecs[n:, k]
        nv2 = float(np.real(np.vdot(v, v)))
        if np.sqrt(nv2) < V_NORM_TOL:
            out.append(EigenCircle(complex(lam[k]), np.nan, np.nan, np.nan, v, w, False, "eigenvector concentrated in w"))
            continue
        pr = float(np.real(np.vdot(v, dform @ v))) / nv2
        pi_c = 1j * np.vdot(v, jform @ v) / nv2
        if abs(pi_c.imag) > 1e-10 * max(1.0, abs(pi_c)):
            raise ModelInvariantError("circle centre has a complex imaginary coordinate; J2* is not skew")
        pi = float(pi_c.real)
        a12w = sf.a12 @ w
        psiv = sf.psi @ v
        r2 = (float(np.real(np.vdot(a12w, a12w))) - float(np.real(np.vdot(psiv, psiv)))) / nv2 + pr**2 + pi**2
        note = "defective eigenvalue (Jordan block); eigenvector basis is ill-conditioned" if defective else ""
        out.append(EigenCircle(complex(lam[k]), pr, pi, float(np.sqrt(max(r2, 0.0))), v, w, True, note))
    return CircleSet(out, defective)


def gershgorin(mat) -> list[tuple[float, float]]:
    a = as_square(mat, name="matrix")
    off = np.sum(np.abs(a), axis=1) - np.abs(np.diag(a))
    return [(float(a[i, i]), float(off[i])) for i in range(a.shape[0])]


def _require_no_gyro(j2: np.ndarray) -> None:
    if np.max(np.abs(j2)) > J2_ZERO_TOL:
        raise ScopeError(
            "the oscillation-free rule covers J2* = 0 only; use canonical_saddle for non-intrinsic gyroscopic terms"
        )


@dataclass
class OscillationCheck:
    holds: bool
    lhs: float
    rhs: float
    margin: float
    conservative_holds: bool
    conservative_rhs: float
    conservative_margin: float

    def as_dict(self) -> dict:
        return asdict(self)


def p5_terms(md, m, hess_ud, dd) -> tuple[float, float, float]:
    """Left side, right side and the conservative right side of the damping condition."""
    minv = np.linalg.inv(m)
    lhs = lam_min(dd) ** 2
    rhs = 4.0 * lam_max(md @ minv @ hess_ud @ minv @ md) * lam_max(md)
    cons = 4.0 * lam_max(md) ** 3 * lam_max(hess_ud) / lam_min(m) ** 2
    return lhs, rhs, cons


def oscillation_free(target: TargetDynamics) -> OscillationCheck:
    eq = target.at_equilibrium()
    _require_no_gyro(eq["j2"])
    lhs, rhs, cons = p5_terms(eq["md"], eq["m"], eq["hess_ud"], eq["dd"])
    return OscillationCheck(lhs >= rhs, lhs, rhs, lhs - rhs, lhs >= cons, cons, lhs - cons)


def min_damping_for_p5(target: TargetDynamics) -> float:
    return float(np.sqrt(oscillation_free(target).rhs))


def min_damping_conservative(target: TargetDynamics) -> float:
    return float(np.sqrt(oscillation_free(target).conservative_rhs))


@dataclass
class RiseTimeBound:
    delta: float
    capital_delta: float
    lambda_tr: float
    t_rt: float

    def as_dict(self) -> dict:
        return asdict(self)


def rise_time_bound(sf: SaddleForm) -> RiseTimeBound:
    _require_no_gyro(sf.j2)
    lhs, rhs, _ = p5_terms(sf.md, sf.m, sf.hess_ud, sf.dd)
    if lhs < rhs:
        raise ScopeError("the rise-time bound needs the oscillation-free condition to hold")
    if lam_min(sf.dd) <= 0.0:
        raise ScopeError("the rise-time bound needs Dd* to be nonsingular")
    minv = np.linalg.inv(sf.m)
    x = sf.phi_p @ minv @ sf.md
    delta = lam_min(x @ np.linalg.solve(sf.dd, x.T))
    dform = sf.phi_m @ sf.dd @ sf.phi_m.T
    cap = 1.0 - 4.0 * delta / lam_max(dform)
    lo = lam_min(dform)
    lam_tr = min(lo, 2.0 * delta / (1.0 + np.sqrt(cap))) if cap >= 0.0 else lo
    return RiseTimeBound(float(delta), float(cap), float(lam_tr), float(4.0 / lam_tr))


@dataclass
class CanonicalSaddle:
    a_mat: np.ndarray
    t_mat: np.ndarray
    phi_mc: np.ndarray
    phi_pc: np.ndarray
    intrinsic: bool
    block11_symmetric: bool
    linearization: np.ndarray


def canonical_saddle(target: TargetDynamics, gen: GyroGenerator, region: Region | None = None) -> CanonicalSaddle:
    """Saddle form of the canonical system; block (1,1) symmetric iff ``dQd/dq*`` is symmetric.

    Coordinates are ``z = (phi_Mc (p_c~ - S q~), phi_Pc q~)`` with
    ``S = dQd/dq`` at ``q*``.
    """
    cf = to_canonical(target, gen, region)
    q = target.q_star
    n = target.n
    mc = cf.mc(q)
    dc = cf.dc(q, np.zeros(n))
    s = gen.qd_jac(q)
    k = sym(np.asarray(target.ud_hess(q), dtype=float))
    phi_mc, phi_pc = _factors(mc, k, "Mc*^-1")
    a11 = phi_mc @ (dc + s - s.T) @ phi_mc.T
    a_mat = np.block([[a11, phi_mc @ phi_pc.T], [-phi_pc @ phi_mc.T, np.zeros((n, n))]])
    t_mat = np.block([[-phi_mc @ s, phi_mc], [phi_pc, np.zeros((n, n))]])
    nmc = np.linalg.inv(mc)
    hess_c = np.block([[k + s.T @ nmc @ s, -s.T @ nmc], [-nmc @ s, nmc]])
    jr = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), -dc]])
    sym11 = bool(np.max(np.abs(a11 - a11.T)) <= 1e-12 * max(1.0, np.max(np.abs(a11))))
    return CanonicalSaddle(a_mat, t_mat, phi_mc, phi_pc, cf.intrinsic, sym11, jr @ hess_c)


def spectra_match(a: np.ndarray, b: np.ndarray) -> float:
    """Largest distance between the two eigenvalue multisets after optimal pairing."""
    la, lb = np.linalg.eigvals(a), np.linalg.eigvals(b)
    cost = np.abs(la[:, None] - lb[None, :])
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].max())


@dataclass
class SpectralReport:
    eigenvalues_closed_loop: list
    stable: bool
    similarity_error: float
    block11_symmetric: bool
    oscillation_free: dict | None
    min_damping_for_p5: float | None
    min_damping_conservative: float | None
    rise_time: dict | None
    circles_defective: bool
    min_circle_center_re: float | None
    scope_notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def spectral_report(target: TargetDynamics) -> tuple[SpectralReport, CircleSet, SaddleForm]:
    lin = linearize(target)
    sf = saddle_form(target)
    eig = np.linalg.eigvals(lin)
    eig = eig[np.lexsort((eig.imag, eig.real))]
    circles = eigen_circles(sf)
    notes = []
    osc = md = mdc = rt = None
    try:
        chk = oscillation_free(target)
        osc = chk.as_dict()
        md = float(np.sqrt(chk.rhs))
        mdc = float(np.sqrt(chk.conservative_rhs))
        try:
            rt = rise_time_bound(sf).as_dict()
        except ScopeError as exc:
            notes.append(f"rise_time: {exc}")
    except ScopeError as exc:
        notes.append(f"oscillation_free: {exc}")
    defined = circles.defined()
    return (
        SpectralReport(
            eigenvalues_closed_loop=[[float(z.real), float(z.imag)] for z in eig],
            stable=bool(np.all(eig.real < 0.0)),
            similarity_error=spectra_match(-sf.a_mat, lin),
            block11_symmetric=sf.block11_symmetric(),
            oscillation_free=osc,
            min_damping_for_p5=md,
            min_damping_conservative=mdc,
            rise_time=rt,
            circles_defective=circles.defective,
            min_circle_center_re=min(c.center_re for c in defined) if defined else None,
            scope_notes=notes,
        ),
        circles,
        sf,
    )


CIRCLE_COLUMNS = ("eig_re", "eig_im", "center_re", "center_im", "radius", "defined")


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else repr(float(x))


def circles_csv(circles: CircleSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CIRCLE_COLUMNS)
    for c in circles.circles:
        w.writerow([_fmt(c.eigenvalue.real), _fmt(c.eigenvalue.imag), _fmt(c.center_re), _fmt(c.center_im), _fmt(c.radius), int(c.defined)])
    return buf.getvalue()


def circles_svg(circles: CircleSet, size: int = 480) -> str:
    """Circles and eigenvalues of ``-A`` (left half-plane), as a standalone SVG."""
    pts = []
    for c in circles.circles:
        pts.append((-c.eigenvalue.real, -c.eigenvalue.imag))
        if c.defined:
            pts.extend([(-c.center_re - c.radius, -c.center_im - c.radius), (-c.center_re + c.radius, -c.center_im + c.radius)])
    xs = [p[0] for p in pts] + [0.0]
    ys = [p[1] for p in pts] + [0.0]
    span = max(max(xs) - min(xs), max(ys) - min(ys), 1e-9) * 1.1
    cx, cy = (max(xs) + min(xs)) / 2, (max(ys) + min(ys)) / 2
    scale = size / span

    def tx(x, y):
        return size / 2 + (x - cx) * scale, size / 2 - (y - cy) * scale

    ox, oy = tx(0.0, 0.0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="0" y1="{oy:.3f}" x2="{size}" y2="{oy:.3f}" stroke="#888" stroke-width="1"/>',
        f'<line x1="{ox:.3f}" y1="0" x2="{ox:.3f}" y2="{size}" stroke="#888" stroke-width="1"/>',
    ]
    for c in circles.defined():
        x, y = tx(-c.center_re, -c.center_im)
        parts.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="{c.radius * scale:.3f}" fill="none" stroke="#1f77b4" stroke-width="1"/>')
    for c in circles.circles:
        x, y = tx(-c.eigenvalue.real, -c.eigenvalue.imag)
        parts.append(f'<path d="M{x - 4:.3f},{y - 4:.3f} L{x + 4:.3f},{y + 4:.3f} M{x - 4:.3f},{y + 4:.3f} L{x + 4:.3f},{y - 4:.3f}" stroke="#d62728" stroke-width="1.5"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
