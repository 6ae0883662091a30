"""
multistop - optimal stopping curves by backward ODE integration.

Level j solves

    d/dt u^j(t, x) = -I_j(t, u),   I_j(t, u) = int_u^inf G(t, xi^{j-1}(t, y)) dy,

with u^j(1, x) = x, for every node of the guarantee grid at once. The state
also carries p = du/dx, which obeys dp/dt = G(t, xi^{j-1}(t, u)) p and makes
the previous level available as a C^1 Hermite spline. Integration runs in
s = -ln(1 - t), where the terminal layer at t = 1 is smooth, from
s = -ln(eps) down to s = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any
import logging
import math
import warnings

import numpy as np
from scipy import integrate, optimize, special
from scipy.interpolate import CubicHermiteSpline

from .core import (NEG_INF, IntensityModel, InverseTable, StoppingCurveFamily, ThresholdFamily,
                   refined_time_grid)
from .schema import QuadratureError, SolverError, SolveSpec, ConfigError

log = logging.getLogger(__name__)


def _t_of(s):
    return -np.expm1(-np.asarray(s, float))


@dataclass
class _LevelSolution:
    """Dense solution of one level in s; state = [u over nodes, p over nodes]."""
    j: int
    sol: Any
    s_max: float
    n_nodes: int
    flags: dict = field(default_factory=dict)
    integral: Any = None

    def state(self, s: float):
        y = self.sol(min(max(s, 0.0), self.s_max))
        return y[: self.n_nodes], y[self.n_nodes:]

    def rate(self, s: float, u: np.ndarray) -> np.ndarray:
        """du/ds = -e^{-s} I_j(t, u); NaN where the integral is not finite."""
        I, _ = self.integral.evaluate(s, u)
        with np.errstate(invalid="ignore", over="ignore"):
            d = -math.exp(-s) * I
        return np.where(np.isfinite(d), d, np.nan)


class _LevelIntegral:
    """
    I_j(t, u) and G(t, xi^{j-1}(t, u)) for a vector of u.

    For j = 1 xi^0 is the identity and I_1 is the model tail. For j >= 2 the
    integral is taken in z = xi^{j-1}(t, y) as int_{z*}^inf G(t, z) U'(z) dz
    with U = u^{j-1}(t, .) a Hermite spline through the previous level.
    """

    def __init__(self, model: IntensityModel, x_grid: np.ndarray, prev: _LevelSolution | None,
                 gauss_nodes: int, t_floor: float):
        self.model = model
        self.x_grid = x_grid
        self.free = np.isneginf(x_grid[0])
        self.prev = prev
        self.t_floor = t_floor
        self.g, self.w = special.roots_legendre(gauss_nodes)
        self.flags = {"above_grid": 0, "below_grid": 0}
        self._cache_s = None

    def _t(self, t: float) -> float:
        return max(t, self.t_floor)

    def _prepare(self, s: float):
        if self._cache_s == s:
            return
        t = self._t(float(_t_of(s)))
        U, P = self.prev.state(s)
        start = 1 if self.free else 0
        self.U_free = U[0] if self.free else NEG_INF
        xs, Us, Ps = self.x_grid[start:], U[start:], P[start:]
        ok = np.isfinite(Us)
        xs, Us, Ps = xs[ok], Us[ok], np.where(np.isfinite(Ps[ok]), np.maximum(Ps[ok], 0.0), 0.0)
        # strictly increasing subsequence; a flat run keeps its last node
        later = np.minimum.accumulate(Us[::-1])[::-1]
        keep = np.concatenate([Us[:-1] < later[1:], [True]])
        if keep.sum() < 2:
            raise SolverError(f"level {self.prev.j} has no increasing nodes at t={t:.6g}, cannot invert it",
                              {"level": self.prev.j, "t": t, "finite_nodes": int(ok.sum())})
        xs, Us, Ps = xs[keep], Us[keep], Ps[keep]
        self.xs, self.Us, self.Ps = xs, Us, Ps
        self.spline = CubicHermiteSpline(xs, Us, Ps)
        self.dspline = self.spline.derivative()
        self.floor = float(self.model.boundary(t))
        a, b = xs[:-1, None], xs[1:, None]
        z = 0.5 * (b - a) * self.g + 0.5 * (a + b)
        wz = 0.5 * (b - a) * self.w
        seg = self._weighted(t, z, wz).sum(axis=1)
        self.suffix = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])
        self.tail_top = float(self.model.tail(t, xs[-1]))
        self.t_now = t
        self._cache_s = s

    def _weighted(self, t: float, z, wz):
        """G(t, z) U'(z) w, zero at or below the moving boundary where U is flat."""
        with np.errstate(over="ignore", invalid="ignore"):
            val = self.model.G(t, z) * self.dspline(z) * wz
        return np.where(z > self.floor, val, 0.0)

    def _invert(self, u: np.ndarray):
        """z* = xi^{j-1}(t, u) inside the tabulated range, by interpolation plus Newton."""
        k = np.clip(np.searchsorted(self.Us, u, side="right") - 1, 0, len(self.Us) - 2)
        lo, hi = self.xs[k], self.xs[k + 1]
        frac = (u - self.Us[k]) / (self.Us[k + 1] - self.Us[k])
        z = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
        for _ in range(3):
            d = self.dspline(z)
            step = np.where(d > 0, (self.spline(z) - u) / np.where(d > 0, d, 1.0), 0.0)
            z = np.clip(z - step, lo, hi)
        return z, k

    def evaluate(self, s: float, u: np.ndarray):
        """Return (I, G at xi(u)) for each entry of u."""
        t = self._t(float(_t_of(s)))
        if self.prev is None:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                return np.asarray(self.model.tail(t, u), float), np.asarray(self.model.G(t, u), float)
        self._prepare(s)
        u = np.asarray(u, float)
        I = np.empty(u.shape)
        Gz = np.empty(u.shape)
        top, bottom = self.Us[-1], self.Us[0]
        above = u > top
        below = u < bottom
        inside = ~(above | below)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if inside.any():
                z, k = self._invert(u[inside])
                hi = self.xs[k + 1]
                zq = 0.5 * (hi - z)[:, None] * self.g + 0.5 * (hi + z)[:, None]
                wq = 0.5 * (hi - z)[:, None] * self.w
                part = self._weighted(t, zq, wq).sum(axis=1)
                I[inside] = part + self.suffix[k + 1] + self.tail_top
                Gz[inside] = self.model.G(t, z)
            if above.any():
                self.flags["above_grid"] += int(above.sum())
                z = self.xs[-1] + (u[above] - top)
                I[above] = self.model.tail(t, z)
                Gz[above] = self.model.G(t, z)
            if below.any():
                self.flags["below_grid"] += int(below.sum())
                ub = u[below]
                x0, p0 = self.xs[0], self.Ps[0]
                gx0 = float(self.model.G(t, x0))
                if p0 > 1e-300:
                    z = x0 - (bottom - ub) / p0
                    extra = p0 * (self.model.tail(t, z) - self.model.tail(t, x0))
                    gz = self.model.G(t, z)
                else:
                    extra = (bottom - ub) * gx0
                    gz = np.full(ub.shape, gx0)
                extra = np.where(np.isfinite(extra), extra, (bottom - ub) * gx0)
                I[below] = extra + self.suffix[0] + self.tail_top
                Gz[below] = gz
                if self.free:
                    dead = ub <= self.U_free
                    I[below] = np.where(dead, np.inf, I[below])
        return I, Gz


def _quad_pieces(f, a: float, b: float, breaks, flags: dict) -> float:
    """int_a^b f split at the breakpoints inside (a, b); a may be -inf."""
    edges = [a, *sorted(float(x) for x in breaks if a < x < b), b]
    total = 0.0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", integrate.IntegrationWarning)
        for lo, hi in zip(edges[:-1], edges[1:]):
            val, _ = integrate.quad(f, lo, hi, limit=500, epsabs=1e-13, epsrel=1e-11)
            total += val
    if caught:
        flags["seed_quad_warnings"] = flags.get("seed_quad_warnings", 0) + len(caught)
        log.debug("terminal seed quadrature on (%g, %g): %s", a, b, caught[-1].message)
    return total


def _seed_free(integral: _LevelIntegral, s_eps: float, eps: float, a: float) -> float:
    """u at 1 - eps of the time-frozen problem started at a (possibly -inf) at t = 1."""
    breaks = []
    if integral.prev is not None:
        integral._prepare(s_eps)
        breaks = [integral.Us[0], integral.U_free]

    def inv_rate(v):
        I, _ = integral.evaluate(s_eps, np.array([v]))
        return 0.0 if not np.isfinite(I[0]) or I[0] <= 0 else 1.0 / (float(I[0]) * eps)

    def elapsed(u):
        # time in units of eps, so the quadrature tolerances act on O(1) values
        return _quad_pieces(inv_rate, a, u, breaks, integral.flags) - 1.0

    start = a if math.isfinite(a) else -1.0
    hi = start + 1.0
    for _ in range(200):
        if elapsed(hi) > 0:
            break
        hi = start + 2.0 * (hi - start)
    else:
        raise SolverError("could not bracket the terminal seed", {"a": a, "eps": eps})
    lo = a if math.isfinite(a) else hi - 1.0
    if not math.isfinite(a):
        for _ in range(200):
            if elapsed(lo) < 0:
                break
            lo = hi - 2.0 * (hi - lo)
    if math.isfinite(a) and elapsed(lo) >= 0:
        return lo
    return optimize.brentq(elapsed, lo, hi, xtol=1e-14, rtol=1e-13)


def _seed_nodes(integral: _LevelIntegral, x_grid, s_eps, eps, u_free, prev_floor, spec):
    """Frozen-time seeds at t = 1 - eps for the finite guarantee nodes."""
    free = np.isneginf(x_grid[0])
    start = 1 if free else 0
    xs = x_grid[start:]
    floor = prev_floor if math.isfinite(prev_floor) else NEG_INF
    live = xs > floor
    if math.isfinite(u_free):
        # an infinite intensity above x moves the node to the bottom seed at once
        I_x, _ = integral.evaluate(s_eps, xs)
        live &= np.isfinite(I_x)
    a = np.where(live, xs, u_free if math.isfinite(u_free) else xs)

    def rhs(tau, u):
        I, _ = integral.evaluate(s_eps, u)
        return np.where(np.isfinite(I), I, 0.0)

    u = a.copy()
    ode_idx = np.flatnonzero(live)
    if not free and math.isfinite(u_free):
        # node 0 is the finite lower boundary and was seeded separately
        ode_idx = ode_idx[ode_idx > 0]
        u[0] = u_free
    if len(ode_idx):
        sub = lambda tau, v: rhs(tau, _scatter(u, ode_idx, v))[ode_idx]
        res = integrate.solve_ivp(sub, (0.0, eps), a[ode_idx], method="RK45", rtol=spec.rtol,
                                  atol=spec.atol)
        if res.status != 0:
            raise SolverError(f"terminal seed integration failed: {res.message}")
        u[ode_idx] = res.y[:, -1]
    I_u, _ = integral.evaluate(s_eps, u)
    I_a, _ = integral.evaluate(s_eps, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(live & np.isfinite(I_a) & (I_a > 0), I_u / I_a, 0.0)
    p = np.where(np.isfinite(p), p, 0.0)
    return u, p


def _scatter(base, idx, vals):
    out = base.copy()
    out[idx] = vals
    return out


def _closed_form_seed(model, j, x_grid, t_eps, m):
    from .closed_form import build_from_tag

    sol = build_from_tag(model.closed_form, m)
    u = sol.u_values(j, t_eps, x_grid)
    h = 1e-6 * np.maximum(1.0, np.abs(np.where(np.isfinite(x_grid), x_grid, 0.0)))
    lo = np.maximum(x_grid - h, model.c) if math.isfinite(model.c) else x_grid - h
    p = (sol.u_values(j, t_eps, x_grid + h) - sol.u_values(j, t_eps, lo)) / (x_grid + h - lo)
    p = np.where(np.isfinite(x_grid) & np.isfinite(p), p, 0.0)
    return u, p


def _solve_level(model, j, x_grid, prev, spec: SolveSpec, eps: float, m: int, t_floor: float):
    n = len(x_grid)
    free = np.isneginf(x_grid[0])
    s_eps = -math.log(eps)
    t_eps = 1.0 - eps
    integral = _LevelIntegral(model, x_grid, prev, spec.gauss_nodes, t_floor)

    if spec.seed_mode == "closed_form" and model.closed_form is not None:
        u0, p0 = _closed_form_seed(model, j, x_grid, t_eps, m)
    else:
        if spec.seed_mode == "closed_form":
            log.warning("closed_form seeding requested for an untagged model, using asymptotic seeds")
        prev_free = NEG_INF if prev is None else prev.state(s_eps)[0][0]
        a = model.c if prev is None else prev_free
        u_free = _seed_free(integral, s_eps, eps, a)
        uf, pf = _seed_nodes(integral, x_grid, s_eps, eps, u_free, prev_free if free else NEG_INF, spec)
        if free:
            u0 = np.concatenate([[u_free], uf])
            p0 = np.concatenate([[0.0], pf])
        else:
            u0, p0 = uf, pf
    lower = x_grid.copy()
    if prev is not None:
        lower = np.maximum(lower, prev.state(s_eps)[0])
    if free:
        lower[0] = u0[0] if prev is None else max(u0[0], prev.state(s_eps)[0][0])
    u0 = np.maximum(np.where(np.isfinite(u0), u0, lower), lower)
    u0 = np.maximum.accumulate(u0)

    def rhs(s, y):
        u, p = y[:n], y[n:]
        I, Gz = integral.evaluate(s, u)
        if not np.all(np.isfinite(I)):
            bad = np.flatnonzero(~np.isfinite(I))
            raise QuadratureError(f"level {j}: integral of G above u diverges at t={float(_t_of(s)):.6g} "
                                  f"for {len(bad)} nodes (boundedness condition violated)", math.inf)
        scale = math.exp(-s)
        dp = scale * Gz * p
        if free:
            dp[0] = 0.0
        return np.concatenate([-scale * I, np.where(np.isfinite(dp), dp, 0.0)])

    res = integrate.solve_ivp(rhs, (s_eps, 0.0), np.concatenate([u0, p0]), method="DOP853",
                              rtol=spec.rtol, atol=spec.atol, dense_output=True)
    if res.status != 0:
        raise SolverError(f"level {j} integration failed: {res.message}",
                          {"level": j, "nfev": res.nfev, "t_reached": float(_t_of(res.t[-1]))})
    log.debug("level %d: %d steps, %d rhs evaluations", j, len(res.t), res.nfev)
    return _LevelSolution(j=j, sol=res.sol, s_max=s_eps, n_nodes=n, integral=integral,
                          flags={**integral.flags, "nfev": int(res.nfev), "steps": len(res.t)})


def _solve_levels(model, m: int, x_grid, spec: SolveSpec, t_floor: float) -> list:
    levels = []
    for j in range(1, m + 1):
        prev = levels[-1] if levels else None
        try:
            levels.append(_solve_level(model, j, x_grid, prev, spec, spec.epsilon, m, t_floor))
        except (ValueError, FloatingPointError, ZeroDivisionError) as exc:
            raise SolverError(f"level {j}: numerical failure ({exc})",
                              {"level": j, "seed_mode": spec.seed_mode}) from exc
    return levels


def _tabulate(levels: list, x_grid, t_grid) -> tuple[np.ndarray, np.ndarray]:
    """Level values and du/ds on the (t, x) grid; the t = 1 row is x and has no slope."""
    out = np.empty((len(levels) + 1, len(t_grid), len(x_grid)))
    slopes = np.full(out.shape, np.nan)
    out[0] = x_grid
    slopes[0] = 0.0
    inner = t_grid < 1.0
    rows = np.flatnonzero(inner)
    s_grid = -np.log1p(-t_grid[inner])
    for j, lv in enumerate(levels, start=1):
        s_at = np.minimum(s_grid, lv.s_max)
        out[j, inner] = lv.sol(s_at)[: lv.n_nodes].T
        out[j, ~inner] = x_grid
        for k, s in zip(rows, s_at):
            slopes[j, k] = lv.rate(float(s), out[j, k])
    return out, slopes


def solve_curve_family(model: IntensityModel, m: int, spec: SolveSpec | None = None) -> StoppingCurveFamily:
    """
    Integrate u^1 .. u^m backward from t = 1, each level using the previous
    level's inverse. A tagged model whose asymptotic terminal seeds fail is
    re-solved with closed-form seeds; metadata["seed_fallback"] records why.
    """
    spec = spec or SolveSpec()
    if m < 1:
        raise ConfigError("need m >= 1")
    problems = model.validate()
    if problems:
        raise ConfigError("intensity model rejected: " + "; ".join(problems))
    x_grid = np.asarray(spec.x_grid if spec.x_grid is not None else model.default_x_grid(), float)
    if np.any(np.diff(x_grid) <= 0):
        raise ConfigError("x grid must be strictly increasing")
    if x_grid[0] != model.c:
        x_grid = np.concatenate([[model.c], x_grid[x_grid > model.c]])
    t_grid = refined_time_grid(spec.uniform_points, spec.refined_points, spec.epsilon)
    t_floor = spec.t_floor if spec.t_floor > 0 else (1e-12 if model.singular_at_zero else 0.0)

    fallback = None
    try:
        levels = _solve_levels(model, m, x_grid, spec, t_floor)
    except (SolverError, QuadratureError) as exc:
        if spec.seed_mode == "closed_form" or model.closed_form is None:
            raise
        log.warning("asymptotic terminal seeds failed (%s), retrying with closed-form seeds", exc)
        fallback = str(exc)
        spec = replace(spec, seed_mode="closed_form")
        levels = _solve_levels(model, m, x_grid, spec, t_floor)

    table, slopes = _tabulate(levels, x_grid, t_grid)
    top = float(x_grid[-1])
    metadata = {
        "engine": "ode",
        "epsilon": spec.epsilon,
        "seed_mode": spec.seed_mode,
        "rtol": spec.rtol,
        "atol": spec.atol,
        "t_floor": t_floor,
        "truncation_point": top,
        "tail_bound": float(np.max(model.tail(np.array([max(0.5, t_floor)]), np.array([top])))),
        "flags": [lv.flags for lv in levels],
        "assumes_uniqueness_condition": bool(np.isneginf(model.c) and m >= 2),
    }
    if fallback is not None:
        metadata["seed_fallback"] = fallback
    if metadata["tail_bound"] > spec.tail_threshold:
        log.debug("tail above the grid top is %.3g, above the threshold %.3g", metadata["tail_bound"],
                  spec.tail_threshold)
    error = [float(10 * (spec.rtol * np.max(np.abs(table[j, 0][np.isfinite(table[j, 0])])) + spec.atol))
             for j in range(1, m + 1)]
    if spec.seed_sensitivity:
        half = solve_curve_family(model, m, replace(spec, epsilon=spec.epsilon / 2, seed_sensitivity=False))
        diff = [float(np.max(np.abs(table[j, 0] - half.levels[j, 0]))) for j in range(1, m + 1)]
        metadata["seed_sensitivity"] = diff
        error = [e + d for e, d in zip(error, diff)]
    metadata["error_estimate"] = error

    family = StoppingCurveFamily(m=m, c=model.c, t_grid=t_grid, x_grid=x_grid, levels=table,
                                 model_hash=model.model_hash(), metadata=metadata, slopes=slopes)
    tol = max(1e-7, 1e3 * spec.rtol)
    problems = family.check_invariants(tol)
    if problems:
        raise SolverError("solved curves violate the monotonicity invariants", {"problems": problems})
    return family


def invert_level(family: StoppingCurveFamily, j: int) -> InverseTable:
    """xi^j tabulated on the family grid; flat segments are counted and reported."""
    if not 0 <= j <= family.m:
        raise ConfigError(f"level {j} outside 0..{family.m}")
    rows = family.levels[j]
    flats = 0
    if j > 0:
        fin = np.isfinite(family.x_grid)
        body = rows[:-1][:, fin]
        free = rows[:-1, :1] if not fin[0] else body[:, :1]
        lifted = body[:, 1:] > free + 1e-9 * np.maximum(1.0, np.abs(free))
        flats = int(np.sum((np.diff(body, axis=1) <= 0) & lifted))
        if flats:
            log.warning("u^%d has %d flat segments in x; the model may be degenerate", j, flats)
    return InverseTable(j=j, t_grid=family.t_grid, x_grid=family.x_grid, u_rows=rows, flat_segments=flats)


def thresholds_from_family(family: StoppingCurveFamily) -> ThresholdFamily:
    """gamma^j(t, x) = xi^{j-1}(t, u^j(t, x)) on every grid node."""
    T = len(family.t_grid)
    gamma = np.full((family.m, T, len(family.x_grid)), np.nan)
    inverses = tuple(invert_level(family, j) for j in range(family.m + 1))
    for j in range(1, family.m + 1):
        inv = inverses[j - 1]
        for k in range(T - 1):
            u = family.levels[j, k]
            if j == 1:
                g = u.copy()
            else:
                g, _ = inv._row(k, u)
            gamma[j - 1, k] = np.maximum(g, family.x_grid)
    return ThresholdFamily(m=family.m, c=family.c, t_grid=family.t_grid, x_grid=family.x_grid, gamma=gamma,
                           inverses=inverses, model_hash=family.model_hash)
