"""
multistop - closed-form solution classes.

Three classes of intensities admit explicit stopping curves:

    Case 1  G = H(y/v) |v'|/v on y > 0,  R^j(x) = x - int_x^inf H(Phi^{j-1})
    Case 2  G = H(y/v) |v'|/v on R,      R^j(x) = x + int_x^0   H(Phi^{j-1})
    Case 3  G = H(y - v) |v'|   on R,    R^j(x) = 1 - int_x^inf H(Phi^{j-1})

r_j is the zero of R^j above r_{j-1}. Phi^j(x) = x exp(-lambda^j(x)) in
Cases 1-2 and x - lambda^j(x) in Case 3 with lambda^j the integral of
1/R^j - 1/y (resp. 1/R^j - 1) from x to the far end. Both integrals are
solved as ODEs in x; the log singularity of lambda^j at r_j is handled
analytically from R^j'(r_j).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any
import logging
import math

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline

from .core import NEG_INF, ClassTag, StoppingCurveFamily, ThresholdFamily, check_guarantee, check_time
from .schema import ClassConditionError, DomainError, QuadratureError, QuadSpec

log = logging.getLogger(__name__)

EDGE_TOLERANCE = 1e-11


class _Identity:
    """Level 0: Phi^0 = phi^0 = identity."""

    def __init__(self, case: int):
        self.case = case
        self.r = 0.0 if case == 1 else NEG_INF

    def Phi(self, x):
        return np.asarray(x, float)

    def phi(self, y):
        return np.asarray(y, float)


@dataclass
class _Level:
    case: int
    r: float
    slope: float
    eta: float
    edge: float
    lam_near: float
    sol: Any
    spline: Any
    phi_range: tuple
    residual: float
    error_estimate: float

    def _g_integral(self, lo, hi):
        if self.case == 3:
            return hi - lo
        return np.log(hi / lo)

    def _lam(self, x):
        """lambda(x) on (r, edge]."""
        x = np.asarray(x, float)
        near = x < self.r + self.eta
        inside = np.clip(x, self.r + self.eta, self.edge)
        lam = self.sol(inside.ravel())[1].reshape(x.shape) if x.ndim else float(self.sol(float(inside))[1])
        gap = np.maximum(x - self.r, np.finfo(float).tiny)
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = np.log(self.eta / gap) / self.slope - self._g_integral(x, self.r + self.eta)
        return np.where(near, self.lam_near + extra, lam)

    def Phi(self, x):
        x = np.asarray(x, float)
        beyond = x >= self.edge
        below = x <= self.r
        safe = np.where(beyond | below, 0.5 * (self.r + self.edge), x)
        lam = self._lam(safe)
        val = safe - lam if self.case == 3 else safe * np.exp(-lam)
        floor = 0.0 if self.case == 1 else NEG_INF
        return np.where(beyond, x, np.where(below, floor, val))

    def phi(self, y):
        """Inverse of Phi: Hermite spline on the tabulation, analytic below it, identity above."""
        y = np.asarray(y, float)
        lo, hi = self.phi_range
        inside = np.clip(y, lo, hi)
        x = self.spline(inside)
        # near-root inversion of the logarithmic extension
        with np.errstate(divide="ignore", invalid="ignore"):
            base = self.r + self.eta
            if self.case == 3:
                w = math.log(self.eta) + self.slope * (y - base + self.lam_near)
            else:
                w = math.log(self.eta) + self.slope * np.log(y / (base * math.exp(-self.lam_near)))
            near = self.r + np.exp(w)
        out = np.where(y > hi, y, np.where(y < lo, near, x))
        if self.case == 1:
            out = np.where(y <= 0, self.r, out)
        else:
            out = np.where(np.isneginf(y), self.r, out)
        if self.case == 2:
            out = np.where(y >= 0, y, out)
        return np.maximum(out, self.r)


def _check_H(case: int, H) -> None:
    """Numerical grid checks of the case hypotheses on H."""
    if case == 1:
        xs = np.geomspace(1e-3, 1e3, 200)
    elif case == 2:
        xs = np.concatenate([-np.geomspace(1e3, 1e-3, 200), np.geomspace(1e-3, 1e3, 50)])
    else:
        xs = np.linspace(-20, 40, 300)
    h = np.asarray(H(xs), float)
    if np.any(h < 0) or np.any(np.diff(h) > 1e-12 * np.maximum(1, np.abs(h[:-1]))):
        raise ClassConditionError("H nonnegative and nonincreasing", "fails on the sample grid")
    if case == 1 and not float(H.tail(1e-3)) > 0:
        raise ClassConditionError("int_0^inf H > 0")
    if case == 2:
        if float(H.tail(0.0)) != 0.0 or np.any(np.asarray(H(xs[xs > 0])) != 0):
            raise ClassConditionError("int_0^inf H = 0")
        if not float(H.tail(-1.0)) > 0:
            raise ClassConditionError("int_-inf^0 H > 0")
        val, err = integrate.quad(lambda s: float(H(s)) / -s, -1.0, 0.0, limit=200)
        if not math.isfinite(val):
            raise ClassConditionError("int_y^0 H(x)/(-x) dx < inf", f"estimate {err:.3g}")
    if case == 3:
        if not float(H.tail(0.0)) > 0:
            raise ClassConditionError("int H > 0")
        val, err = integrate.quad(lambda s: float(H.tail(s)), 0.0, math.inf, limit=200)
        if not math.isfinite(val):
            raise ClassConditionError("double tail integrability", f"estimate {err:.3g}")


def _R(case: int, x, K):
    if case == 1:
        return x - K
    if case == 2:
        return x + K
    return 1.0 - K


def _excess(case: int, x, K, R):
    """1/R - 1/x (Cases 1-2) or 1/R - 1 (Case 3), written without cancellation."""
    if case == 1:
        return K / (R * x)
    if case == 2:
        return -K / (R * x)
    return K / R


def _edge_lambda(case: int, H, edge: float) -> float:
    """lambda at the edge with Phi^{j-1} taken as the identity beyond it."""

    def f(y):
        K = float(H.tail(y))
        return _excess(case, y, K, _R(case, y, K))

    val, err = integrate.quad(f, edge, 0.0 if case == 2 else math.inf, limit=500, epsabs=0.0, epsrel=1e-13)
    if not math.isfinite(val):
        raise QuadratureError("far-end integral of 1/R diverges", err)
    return val


def _root_residual(case: int, H, prev, r: float, edge: float) -> float:
    """|R^j(r)| with K recomputed by adaptive quadrature instead of the level ODE."""
    points = None
    if case != 2:
        points = [p for p in r + np.array([1.0, 10.0, 100.0, 1e3, 1e4, 1e5]) if p < edge] or None
    val, err = integrate.quad(lambda y: float(H(prev.Phi(y))), r, edge, points=points, limit=500,
                              epsabs=0.0, epsrel=1e-12)
    return abs(float(_R(case, r, val + float(H.tail(edge)))))


def _find_edge(case: int, H) -> float:
    """Point beyond which Phi^j is the identity within EDGE_TOLERANCE."""
    if case == 2:
        edge = -1e-3
        for _ in range(60):
            if abs(_edge_lambda(case, H, edge)) <= EDGE_TOLERANCE or edge > -1e-14:
                return edge
            edge *= 0.5
        return edge
    edge = 10.0
    for _ in range(80):
        if _R(case, edge, float(H.tail(edge))) > 0:
            if abs(_edge_lambda(case, H, edge)) <= EDGE_TOLERANCE or edge > 1e9:
                return edge
        edge *= 2.0
    return edge


def _build_level(case: int, H, prev, edge: float, lam_edge: float, rtol: float, nodes: int) -> _Level:
    """Integrate K (to locate r_j) and then [K, lambda] down from the far end."""
    atol = rtol * 1e-2

    def hphi(x):
        return float(H(prev.Phi(x)))

    def k_rhs(x, s):
        return [-hphi(x)]

    def root_event(x, s):
        return _R(case, x, s[0])

    root_event.terminal = True
    K_edge = float(H.tail(edge))
    if isinstance(prev, _Identity):
        lower = {1: edge * 1e-12, 2: -1e6, 3: -700.0}[case]
    else:
        lower = prev.r + 1.0001 * prev.eta

    first = integrate.solve_ivp(k_rhs, (edge, lower), [K_edge], method="DOP853", rtol=rtol, atol=atol,
                                events=root_event, dense_output=True)
    if first.status == -1:
        raise QuadratureError(f"integration of R failed: {first.message}")
    if not len(first.t_events[0]):
        raise ClassConditionError("R has a zero above the previous root",
                                  f"no sign change of R on ({lower:.6g}, {edge:.6g})")
    r = float(first.t_events[0][0])
    residual = _root_residual(case, H, prev, r, edge)

    h_r = float(H(prev.Phi(r)))
    slope = {1: 1.0 + h_r, 2: 1.0 - h_r, 3: h_r}[case]
    if slope == 0 or not math.isfinite(slope):
        raise ClassConditionError("simple zero of R", f"R'(r) = {slope}")
    eta = 1e-6 * max(1.0, abs(r))
    if case == 2:
        eta = min(eta, 0.25 * abs(edge - r))

    def full_rhs(x, s):
        R = _R(case, x, s[0])
        return [-hphi(x), -_excess(case, x, s[0], R)]

    second = integrate.solve_ivp(full_rhs, (edge, r + eta), [K_edge, lam_edge], method="DOP853", rtol=rtol,
                                 atol=atol, dense_output=True)
    if second.status != 0:
        raise QuadratureError(f"integration of Phi failed: {second.message}")
    lam_near = float(second.y[1, -1])
    error_estimate = abs(float(second.y[0, -1]) - float(first.sol(r + eta)[0]))

    if case == 2:
        xs = np.unique(np.concatenate([r + np.geomspace(eta, abs(r) / 2, nodes // 2),
                                       -np.geomspace(abs(r) / 2, abs(edge), nodes // 2)]))
        xs = xs[(xs >= r + eta) & (xs <= edge)]
    else:
        xs = r + np.geomspace(eta, edge - r, nodes)
        xs[-1] = edge
    K, lam = second.sol(xs)
    R = _R(case, xs, K)
    Phi = xs - lam if case == 3 else xs * np.exp(-lam)
    dPhi = 1.0 / R if case == 3 else Phi / R
    order = np.concatenate([[True], np.diff(Phi) > 0])
    spline = CubicHermiteSpline(Phi[order], xs[order], 1.0 / dPhi[order])
    level = _Level(case=case, r=r, slope=slope, eta=eta, edge=edge, lam_near=lam_near, sol=second.sol,
                   spline=spline, phi_range=(float(Phi[order][0]), float(Phi[order][-1])),
                   residual=residual, error_estimate=error_estimate)
    log.debug("case %d level root r=%.12g R'(r)=%.6g |R(r)|=%.2e", case, r, slope, residual)
    return level


@dataclass
class ClosedFormSolution:
    """Roots r_j and transforms Phi^j, phi^j for j = 0..m of one case."""
    case: int
    H: Any
    v: Any
    m: int
    levels: list = field(default_factory=list)

    @property
    def roots(self) -> list[float]:
        return [lv.r for lv in self.levels[1:]]

    @property
    def c(self) -> float:
        return 0.0 if self.case == 1 else NEG_INF

    def Phi(self, j: int, x):
        return self.levels[j].Phi(x)

    def phi(self, j: int, y):
        return self.levels[j].phi(y)

    def R(self, j: int, x: float) -> float:
        """R^j(x) from the solved level (for checks)."""
        lv = self.levels[j]
        x = float(x)
        if x >= lv.edge:
            K = float(self.H.tail(x))
        elif x >= lv.r + lv.eta:
            K = float(lv.sol(x)[0])
        else:
            raise DomainError(f"R^{j} only available above r_j + eta = {lv.r + lv.eta}")
        return _R(self.case, x, K)

    def diagnostics(self) -> dict:
        return {
            "case": self.case,
            "roots": self.roots,
            "residuals": [lv.residual for lv in self.levels[1:]],
            "error_estimates": [lv.error_estimate for lv in self.levels[1:]],
            "edges": [lv.edge for lv in self.levels[1:]],
        }

    def u_values(self, j: int, t, x) -> np.ndarray:
        """Vectorized u^j(t, x) without domain checks."""
        t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
        if j == 0:
            return x.copy()
        lv = self.levels[j]
        at_end = t >= 1.0
        ts = np.where(at_end, 0.0, t)
        vt = self.v(ts)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            if self.case == 3:
                free = lv.r + vt
                val = np.where(np.isneginf(x), free, lv.phi(x - vt) + vt)
            else:
                free = lv.r * vt
                scaled = np.where(np.isneginf(x), 0.0, x / vt)
                val = np.where(x == self.c, free, lv.phi(scaled) * vt)
                if self.case == 2:
                    val = np.where(np.isneginf(x), free, np.where(x >= 0, x, val))
        return np.where(at_end, x, np.maximum(val, x))

    def xi_values(self, j: int, t, y) -> np.ndarray:
        """Inverse of u^j(t, .) in the guarantee argument."""
        t, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(y, float))
        if j == 0:
            return y.copy()
        lv = self.levels[j]
        vt = self.v(t)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            if self.case == 3:
                return np.where(y <= lv.r + vt, NEG_INF, lv.Phi(y - vt) + vt)
            x = lv.Phi(y / vt) * vt
            if self.case == 1:
                return np.where(y <= lv.r * vt, 0.0, x)
            x = np.where(y >= 0, y, x)
            return np.where(y <= lv.r * vt, NEG_INF, x)

    def gamma_values(self, j: int, t, x) -> np.ndarray:
        u = self.u_values(j, t, x)
        return np.maximum(self.xi_values(j - 1, t, u), x)

    def tabulate(self, t_grid, x_grid, model_hash: str = "") -> StoppingCurveFamily:
        t_grid = np.asarray(t_grid, float)
        x_grid = np.asarray(x_grid, float)
        T, X = np.meshgrid(t_grid, x_grid, indexing="ij")
        levels = np.stack([self.u_values(j, T, X) for j in range(self.m + 1)])
        levels[:, -1, :] = x_grid
        return StoppingCurveFamily(m=self.m, c=self.c, t_grid=t_grid, x_grid=x_grid, levels=levels,
                                   model_hash=model_hash,
                                   metadata={"engine": "closed_form", **self.diagnostics()})

    def threshold_family(self, t_grid, x_grid, model_hash: str = "") -> ThresholdFamily:
        t_grid = np.asarray(t_grid, float)
        x_grid = np.asarray(x_grid, float)
        T, X = np.meshgrid(t_grid, x_grid, indexing="ij")
        gamma = np.stack([self.gamma_values(j, T, X) for j in range(1, self.m + 1)])
        gamma[:, -1, :] = np.nan
        return ThresholdFamily(m=self.m, c=self.c, t_grid=t_grid, x_grid=x_grid, gamma=gamma,
                               model_hash=model_hash)


def build_case(case: int, H, v, m: int, quad: QuadSpec | None = None) -> ClosedFormSolution:
    """Locate r_1 < ... < r_m and build Phi^j, phi^j level by level."""
    quad = quad or QuadSpec()
    if case not in (1, 2, 3):
        raise DomainError(f"unknown case {case}")
    if m < 1:
        raise DomainError("need m >= 1")
    _check_H(case, H)
    rtol = max(1e-13, min(1e-10, quad.tolerance * 1e-3))
    nodes = max(400, 4 * quad.grid_size)
    edge = _find_edge(case, H)
    lam_edge = _edge_lambda(case, H, edge)
    sol = ClosedFormSolution(case=case, H=H, v=v, m=m, levels=[_Identity(case)])
    for j in range(1, m + 1):
        level = _build_level(case, H, sol.levels[-1], edge, lam_edge, rtol, nodes)
        prev_r = sol.levels[-1].r
        if not level.r > prev_r:
            raise ClassConditionError("r_j increasing", f"r_{j}={level.r} <= r_{j - 1}={prev_r}")
        sol.levels.append(level)
    return sol


def build_from_tag(tag: ClassTag, m: int, quad: QuadSpec | None = None) -> ClosedFormSolution:
    return build_case(tag.case, tag.H, tag.v, m, quad)


def _check_level(sol: ClosedFormSolution, j: int) -> None:
    if not 0 <= j <= sol.m:
        raise DomainError(f"level {j} outside 0..{sol.m}")


def eval_u(sol: ClosedFormSolution, j: int, t: float, x: float) -> float:
    """u^j(t, x) from the case formula; u^j(t) at the lower boundary."""
    _check_level(sol, j)
    t = check_time(t)
    x = check_guarantee(x, sol.c)
    return float(sol.u_values(j, t, x))


def eval_gamma(sol: ClosedFormSolution, j: int, t: float, x: float) -> float:
    """gamma^j(t, x) = xi^{j-1}(t, u^j(t, x))."""
    if not 1 <= j <= sol.m:
        raise DomainError(f"threshold level {j} outside 1..{sol.m}")
    t = check_time(t)
    if t >= 1.0:
        raise DomainError("thresholds are undefined at the horizon t = 1")
    x = check_guarantee(x, sol.c)
    return float(sol.gamma_values(j, t, x))
