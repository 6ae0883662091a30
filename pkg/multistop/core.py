"""
multistop - core types and evaluation primitives.

Stopping curves u^j(t, x) and thresholds gamma^j(t, x) are stored as tables
on a (t, x) grid and evaluated by monotone piecewise-linear interpolation in
each argument. The guarantee value -inf is a real node of the x grid (stored
as float("-inf")) and is never approximated by a large negative float.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any
import csv
import io
import json
import math

import numpy as np

from .schema import DomainError, ConfigError, canonical_json, hash_content


NEG_INF = float("-inf")
CURVES_SCHEMA = "multistop.curves/1"
THRESHOLDS_SCHEMA = "multistop.thresholds/1"


def check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"time point {t} outside [0, 1]")
    return t


def check_guarantee(x: float, c: float) -> float:
    x = float(x)
    if math.isnan(x) or x < c:
        raise DomainError(f"guarantee value {x} below the lower boundary {c}")
    if x == NEG_INF and c != NEG_INF:
        raise DomainError("guarantee -inf requires a model with lower boundary -inf")
    return x


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def _nan_to_none(a: np.ndarray) -> list:
    return np.where(np.isnan(a), None, a.astype(object)).tolist()


def _nan_from_none(rows) -> np.ndarray:
    return np.array(rows, dtype=float)


@dataclass(frozen=True)
class ClassTag:
    """Closed-form class of an intensity: case 1/2/3 with its H and v."""
    case: int
    H: Any
    v: Any
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"case": self.case, "H": self.H.to_dict(), "v": self.v.to_dict(), "params": dict(self.params)}


class IntensityModel:
    """
    Poisson limit model on [0,1] x (c, inf) given by its tail intensity
    G(t, y), the expected number of points per unit time above level y.

    Subclasses implement G (vectorized over numpy arrays) and usually a
    closed-form tail(t, y) = int_y^inf G(t, z) dz.
    """

    c: float = NEG_INF
    closed_form: ClassTag | None = None
    name: str = "intensity"
    singular_at_zero: bool = False

    def G(self, t, y):
        raise NotImplementedError

    def tail(self, t, y):
        """int_y^inf G(t, z) dz, by adaptive quadrature unless overridden."""
        from scipy import integrate
        from .schema import QuadratureError

        def one(tt, yy):
            val, err = integrate.quad(lambda z: float(self.G(tt, z)), yy, math.inf, limit=200)
            if not math.isfinite(val):
                raise QuadratureError(f"tail integral of G diverges at t={tt}, y={yy}", err)
            return val

        return np.vectorize(one, otypes=[float])(t, y)

    def tail_inverse(self, t, level):
        """Solve G(t, y) = level for y; vectorized bisection unless overridden."""
        t, level = np.broadcast_arrays(np.asarray(t, float), np.asarray(level, float))
        lo = np.full(t.shape, self.c if math.isfinite(self.c) else -1.0)
        hi = np.ones(t.shape)
        if not math.isfinite(self.c):
            for _ in range(200):
                need = self.G(t, lo) <= level
                if not need.any():
                    break
                lo = np.where(need, lo * 2 - 1, lo)
        for _ in range(200):
            need = self.G(t, hi) > level
            if not need.any():
                break
            hi = np.where(need, hi * 2 + 1, hi)
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            above = self.G(t, mid) > level
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        return 0.5 * (lo + hi)

    def boundary(self, t) -> np.ndarray:
        """Lower edge b(t) of the point support at time t; G is +inf below it."""
        return np.full(np.shape(t), self.c, dtype=float)

    def default_x_grid(self) -> np.ndarray:
        if math.isfinite(self.c):
            return np.concatenate([[self.c], self.c + np.geomspace(1e-6, 1e3, 600)])
        return np.concatenate([[NEG_INF], np.linspace(-40.0, 40.0, 1601)])

    def to_dict(self) -> dict:
        raise NotImplementedError

    def model_hash(self) -> str:
        return hash_content(canonical_json(self.to_dict()))

    def validate(self, t_samples=None, y_samples=None, tol: float = 1e-8) -> list[str]:
        """
        Grid checks of the intensity invariants. Returns the list of violated
        conditions (empty when all hold).
        """
        t_samples = np.linspace(0.05, 0.95, 7) if t_samples is None else np.asarray(t_samples, float)
        if y_samples is None:
            lo = self.c + 1e-3 if math.isfinite(self.c) else -5.0
            y_samples = np.linspace(lo, lo + 20.0, 81)
        problems = []
        for t in t_samples:
            g = np.asarray(self.G(t, y_samples), float)
            if np.any(g < -tol):
                problems.append(f"G negative at t={t}")
            if np.any(np.diff(g) > tol * np.maximum(1.0, np.abs(g[:-1]))):
                problems.append(f"G not nonincreasing in y at t={t}")
            far = float(self.G(t, y_samples[-1] * 1e3 + 1e3))
            if far > 1e-6:
                problems.append(f"G does not vanish as y -> inf at t={t}")
            if self.closed_form is not None:
                ref = class_intensity(self.closed_form, t, y_samples)
                if not np.allclose(g, ref, rtol=1e-9, atol=tol):
                    problems.append(f"G differs from its class decomposition at t={t}")
            jumps = self._jumps(t, np.asarray(y_samples, float))
            if len(jumps):
                problems.append(f"G jumps in y near y={jumps[0]:.6g} at t={t}; "
                                "discontinuous intensities are not supported")
        return problems

    def _jumps(self, t: float, ys: np.ndarray, steps: int = 40) -> np.ndarray:
        """Locations where G(t, .) is discontinuous between finite samples, by bisection."""
        g = np.asarray(self.G(t, ys), float)
        ok = np.isfinite(g[:-1]) & np.isfinite(g[1:])
        a, b = ys[:-1][ok], ys[1:][ok]
        ga, gb = g[:-1][ok], g[1:][ok]
        for _ in range(steps):
            mid = 0.5 * (a + b)
            gm = np.asarray(self.G(t, mid), float)
            left = np.abs(ga - gm) >= np.abs(gm - gb)
            b, gb = np.where(left, mid, b), np.where(left, gm, gb)
            a, ga = np.where(left, a, mid), np.where(left, ga, gm)
        bad = np.abs(ga - gb) > 1e-3 * np.maximum(1.0, np.abs(ga))
        return a[bad]


def class_intensity(tag: ClassTag, t, y):
    """G(t,y) from the class decomposition of a closed-form tag."""
    vt = tag.v(t)
    dv = np.abs(tag.v.derivative(t))
    if tag.case in (1, 2):
        return tag.H(np.asarray(y, float) / vt) * dv / np.abs(vt)
    return tag.H(np.asarray(y, float) - vt) * dv


def interp_guarantee(x_grid: np.ndarray, row: np.ndarray, x) -> np.ndarray:
    """
    Monotone piecewise-linear interpolation of one table row in the guarantee
    argument, with the -inf node handled explicitly.
    """
    x = np.asarray(x, float)
    finite = np.isfinite(x_grid)
    fx, fv = x_grid[finite], row[finite]
    out = np.interp(x, fx, fv)
    above = x > fx[-1]
    out = np.where(above, np.maximum(x, fv[-1]), out)
    if not finite[0]:
        free = row[0]
        below = x < fx[0]
        gap = np.minimum(np.maximum(free, x), fv[0])
        out = np.where(below, gap, out)
        out = np.where(np.isneginf(x), free, out)
    return out


def _time_weights(t_grid: np.ndarray, t):
    t = np.asarray(t, float)
    k = np.clip(np.searchsorted(t_grid, t, side="right") - 1, 0, len(t_grid) - 2)
    span = t_grid[k + 1] - t_grid[k]
    w = np.clip((t - t_grid[k]) / span, 0.0, 1.0)
    return k, w


def _interp_slope(x_grid: np.ndarray, row: np.ndarray, x) -> np.ndarray:
    finite = np.isfinite(x_grid)
    out = np.interp(x, x_grid[finite], row[finite])
    if not finite[0]:
        out = np.where(x < x_grid[finite][0], row[0], out)
    return out


def _hermite_in_s(t0: float, t1: float, t, lo, hi, dlo, dhi):
    """Cubic Hermite in s = -ln(1 - t) through (s0, lo, dlo) and (s1, hi, dhi)."""
    s0, s1 = -math.log1p(-t0), -math.log1p(-t1)
    h = s1 - s0
    tau = (-np.log1p(-t) - s0) / h
    tau2 = tau * tau
    tau3 = tau2 * tau
    return ((2 * tau3 - 3 * tau2 + 1) * lo + (tau3 - 2 * tau2 + tau) * h * dlo
            + (3 * tau2 - 2 * tau3) * hi + (tau3 - tau2) * h * dhi)


def _interp_table(t_grid, x_grid, table, t, x, slopes=None):
    """
    Table lookup: piecewise-linear in x, and in t either linear or, when
    du/ds rows are available on both sides, cubic Hermite in s = -ln(1-t).
    The last interval [t_{T-2}, 1] is always linear.
    """
    t, x = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))
    shape = t.shape
    t, x = t.ravel(), x.ravel()
    k, w = _time_weights(t_grid, t)
    out = np.empty(t.shape)
    for kk in np.unique(k):
        sel = k == kk
        lo = interp_guarantee(x_grid, table[kk], x[sel])
        hi = interp_guarantee(x_grid, table[kk + 1], x[sel])
        ww = w[sel]
        both_inf = np.isneginf(lo) & np.isneginf(hi)
        with np.errstate(invalid="ignore", over="ignore"):
            val = (1 - ww) * lo + ww * hi
            if slopes is not None and t_grid[kk + 1] < 1.0:
                dlo = _interp_slope(x_grid, slopes[kk], x[sel])
                dhi = _interp_slope(x_grid, slopes[kk + 1], x[sel])
                smooth = np.isfinite(lo) & np.isfinite(hi) & np.isfinite(dlo) & np.isfinite(dhi)
                if smooth.any():
                    herm = _hermite_in_s(t_grid[kk], t_grid[kk + 1], t[sel], lo, hi, dlo, dhi)
                    val = np.where(smooth, herm, val)
        out[sel] = np.where(both_inf, NEG_INF, np.where(ww == 0, lo, np.where(ww == 1, hi, val)))
    return out.reshape(shape)


@dataclass(frozen=True)
class StoppingCurveFamily:
    """
    Tabulated optimal stopping curves u^0 ... u^m.

    levels[j, k, i] = u^j(t_grid[k], x_grid[i]); x_grid[0] is the lower
    boundary c (possibly -inf), so levels[j, :, 0] is the guarantee-free
    curve u^j(t). slopes, when present, holds du^j/ds with s = -ln(1-t) on
    the same grid (NaN where unavailable) and switches time interpolation
    to cubic Hermite.
    """
    m: int
    c: float
    t_grid: np.ndarray
    x_grid: np.ndarray
    levels: np.ndarray
    model_hash: str = ""
    metadata: dict = field(default_factory=dict)
    slopes: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "t_grid", _frozen(self.t_grid))
        object.__setattr__(self, "x_grid", _frozen(self.x_grid))
        object.__setattr__(self, "levels", _frozen(self.levels))
        if self.levels.shape != (self.m + 1, len(self.t_grid), len(self.x_grid)):
            raise ConfigError(f"level table shape {self.levels.shape} does not match grids")
        if self.slopes is not None:
            object.__setattr__(self, "slopes", _frozen(self.slopes))
            if self.slopes.shape != self.levels.shape:
                raise ConfigError(f"slope table shape {self.slopes.shape} does not match the levels")
        if np.any(np.diff(self.t_grid) <= 0) or self.t_grid[-1] != 1.0:
            raise ConfigError("t grid must be strictly increasing and end at 1")
        if np.any(np.diff(self.x_grid) <= 0) or self.x_grid[0] != self.c:
            raise ConfigError("x grid must be strictly increasing and start at c")

    def guarantee_free(self, j: int) -> np.ndarray:
        return np.array(self.levels[j, :, 0])

    def values(self, j: int, t, x) -> np.ndarray:
        """Vectorized u^j(t, x) without domain checks."""
        if j == 0:
            return np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float))[1].copy()
        slopes = None if self.slopes is None else self.slopes[j]
        return _interp_table(self.t_grid, self.x_grid, self.levels[j], t, x, slopes)

    def check_invariants(self, tol: float = 1e-7) -> list[str]:
        """Monotonicity, boundary and level-dominance checks on the grid."""
        problems = []
        fin = np.isfinite(self.x_grid)
        if not np.allclose(self.levels[0][:, fin], self.x_grid[fin]):
            problems.append("u^0(t,x) != x")
        for j in range(1, self.m + 1):
            u = self.levels[j]
            if not np.allclose(u[-1, fin], self.x_grid[fin], atol=tol):
                problems.append(f"u^{j}(1,x) != x")
            body = u[:-1]
            if np.any(np.diff(body, axis=0) > tol * np.maximum(1, np.abs(body[1:]))):
                problems.append(f"u^{j} increases in t")
            if np.any(np.diff(body[:, fin], axis=1) < -tol * np.maximum(1, np.abs(body[:, fin][:, 1:]))):
                problems.append(f"u^{j} decreases in x")
            below = body - self.levels[j - 1][:-1]
            scale = tol * np.maximum(1, np.abs(body))
            if np.any(np.where(np.isfinite(below), below, 0.0) < -scale):
                problems.append(f"u^{j} < u^{j - 1}")
        return problems

    def to_dict(self) -> dict:
        doc = {
            "schema": CURVES_SCHEMA,
            "model_hash": self.model_hash,
            "m": self.m,
            "c": self.c,
            "t_grid": self.t_grid.tolist(),
            "x_grid": self.x_grid.tolist(),
            "levels": self.levels.tolist(),
            "metadata": self.metadata,
        }
        if self.slopes is not None:
            doc["slopes"] = _nan_to_none(self.slopes)
        return doc

    @classmethod
    def from_dict(cls, d: dict) -> "StoppingCurveFamily":
        if d.get("schema") != CURVES_SCHEMA:
            raise ConfigError(f"not a curve family document: schema={d.get('schema')!r}")
        return cls(
            m=int(d["m"]),
            c=float(d["c"]),
            t_grid=np.array(d["t_grid"], float),
            x_grid=np.array(d["x_grid"], float),
            levels=np.array(d["levels"], float),
            model_hash=d.get("model_hash", ""),
            metadata=d.get("metadata", {}),
            slopes=_nan_from_none(d["slopes"]) if d.get("slopes") is not None else None,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StoppingCurveFamily":
        return cls.from_dict(json.loads(text))

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "t", "x", "u"])
        for j in range(self.m + 1):
            for k, t in enumerate(self.t_grid):
                for i, x in enumerate(self.x_grid):
                    w.writerow([j, repr(float(t)), repr(float(x)), repr(float(self.levels[j, k, i]))])
        return buf.getvalue()


@dataclass(frozen=True)
class InverseTable:
    """
    xi^j(t, .), the inverse of u^j(t, .), tabulated on the family's t grid.

    Queries above the tabulated u range extrapolate like the identity,
    queries below clamp to the lowest finite node; both report the
    extrapolation through the returned flag array.
    """
    j: int
    t_grid: np.ndarray
    x_grid: np.ndarray
    u_rows: np.ndarray
    flat_segments: int = 0

    def eval(self, t, y) -> tuple[np.ndarray, np.ndarray]:
        t, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(y, float))
        shape = t.shape
        t, y = t.ravel(), y.ravel()
        if self.j == 0:
            return y.reshape(shape).copy(), np.zeros(shape, bool)
        k, w = _time_weights(self.t_grid, t)
        out = np.empty(y.shape)
        flag = np.zeros(y.shape, bool)
        for kk in np.unique(k):
            sel = k == kk
            lo, f_lo = self._row(kk, y[sel])
            hi, f_hi = self._row(kk + 1, y[sel])
            ww = w[sel]
            inf = np.isneginf(lo) | np.isneginf(hi)
            with np.errstate(invalid="ignore"):
                val = np.where(ww == 0, lo, np.where(ww == 1, hi, (1 - ww) * lo + ww * hi))
            out[sel] = np.where(inf & (ww > 0) & (ww < 1), NEG_INF, val)
            flag[sel] = f_lo | f_hi
        return out.reshape(shape), flag.reshape(shape)

    def _row(self, k: int, y: np.ndarray):
        row = self.u_rows[k]
        fin = np.isfinite(self.x_grid)
        xs, ys = self.x_grid[fin], row[fin]
        keep = np.concatenate([[True], ys[1:] > np.maximum.accumulate(ys)[:-1]])
        xs, ys = xs[keep], ys[keep]
        out = np.interp(y, ys, xs)
        above = y > ys[-1]
        out = np.where(above, xs[-1] + (y - ys[-1]), out)
        below = y < ys[0]
        flag = above | below
        if not fin[0]:
            out = np.where(y <= row[0], NEG_INF, out)
            flag = flag & ~(y <= row[0])
        return out, flag


@dataclass(frozen=True)
class ThresholdFamily:
    """
    Thresholds gamma^1 ... gamma^m on the family grid.

    gamma[j-1, k, i] = gamma^j(t_grid[k], x_grid[i]) for k < len(t_grid)-1;
    the last time row (t = 1) is NaN because thresholds are undefined there.
    """
    m: int
    c: float
    t_grid: np.ndarray
    x_grid: np.ndarray
    gamma: np.ndarray
    inverses: tuple = ()
    model_hash: str = ""

    def __post_init__(self):
        object.__setattr__(self, "t_grid", _frozen(self.t_grid))
        object.__setattr__(self, "x_grid", _frozen(self.x_grid))
        object.__setattr__(self, "gamma", _frozen(self.gamma))

    def values(self, j: int, t, x) -> np.ndarray:
        """Vectorized gamma^j(t, x); t beyond the last interior node is clamped."""
        t = np.minimum(np.asarray(t, float), self.t_grid[-2])
        return _interp_table(self.t_grid[:-1], self.x_grid, self.gamma[j - 1][:-1], t, x)

    def guarantee_free(self, j: int) -> np.ndarray:
        return np.array(self.gamma[j - 1, :, 0])

    def to_dict(self) -> dict:
        return {
            "schema": THRESHOLDS_SCHEMA,
            "model_hash": self.model_hash,
            "m": self.m,
            "c": self.c,
            "t_grid": self.t_grid.tolist(),
            "x_grid": self.x_grid.tolist(),
            "gamma": _nan_to_none(self.gamma),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdFamily":
        """Rebuild from to_dict output; the inverse tables are not serialized."""
        if d.get("schema") != THRESHOLDS_SCHEMA:
            raise ConfigError(f"not a threshold document: schema={d.get('schema')!r}")
        fam = cls(
            m=int(d["m"]),
            c=float(d["c"]),
            t_grid=np.array(d["t_grid"], float),
            x_grid=np.array(d["x_grid"], float),
            gamma=_nan_from_none(d["gamma"]),
            model_hash=d.get("model_hash", ""),
        )
        if fam.gamma.shape != (fam.m, len(fam.t_grid), len(fam.x_grid)):
            raise ConfigError(f"threshold table shape {fam.gamma.shape} does not match grids")
        return fam


@dataclass(frozen=True)
class MarkedPointSet:
    """Points (tau_k, Y_k) of one Poisson sample, sorted by time."""
    times: np.ndarray
    values: np.ndarray
    time_cutoff: float
    level_cutoff: float
    c: float = NEG_INF

    def __post_init__(self):
        order = np.argsort(self.times, kind="stable")
        object.__setattr__(self, "times", _frozen(np.asarray(self.times, float)[order]))
        object.__setattr__(self, "values", _frozen(np.asarray(self.values, float)[order]))
        if len(self.times) and (self.times[0] < 0 or self.times[-1] > self.time_cutoff):
            raise DomainError("points outside [0, 1-delta]")
        if len(self.values) and np.any(self.values <= max(self.level_cutoff, self.c)):
            raise DomainError("points below the level cutoff")

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class MultiStopResult:
    """
    Outcome of one m-stopping run.

    stops are indices (discrete) or times (Poisson); a default stop sits at
    the horizon (n or 1) and is marked in forced. closed marks a Poisson run
    whose reward was completed by the continuation value at the time cutoff.
    """
    stops: tuple
    values: tuple
    reward: float
    forced: tuple
    guarantee: float = NEG_INF
    horizon: float = 1.0
    closed: bool = False

    def ordering_ok(self) -> bool:
        """T_1 < ... < T_m while before the horizon, frozen at it afterwards."""
        for a, b in zip(self.stops, self.stops[1:]):
            if a < self.horizon and not a < b:
                return False
            if a >= self.horizon and b != self.horizon:
                return False
        return all(s <= self.horizon for s in self.stops)

    def reward_ok(self, tol: float = 1e-12) -> bool:
        if self.closed:
            return True
        best = max([self.guarantee, *self.values]) if self.values else self.guarantee
        return best == self.reward or abs(best - self.reward) <= tol


def eval_curve(family: StoppingCurveFamily, j: int, t: float, x: float) -> float:
    """u^j(t, x) from the table; exact at grid nodes."""
    if not 0 <= j <= family.m:
        raise DomainError(f"level {j} outside 0..{family.m}")
    t = check_time(t)
    x = check_guarantee(x, family.c)
    if j == 0 or t == 1.0:
        return x
    return float(family.values(j, t, x))


def eval_threshold(family: ThresholdFamily, j: int, t: float, x: float) -> float:
    """gamma^j(t, x); undefined at the horizon t = 1."""
    if not 1 <= j <= family.m:
        raise DomainError(f"threshold level {j} outside 1..{family.m}")
    t = check_time(t)
    if t >= 1.0:
        raise DomainError("thresholds are undefined at the horizon t = 1")
    x = check_guarantee(x, family.c)
    return max(float(family.values(j, t, x)), x)


def refined_time_grid(uniform_points: int, refined_points: int, epsilon: float) -> np.ndarray:
    """Uniform grid on [0,1] merged with 1 - geometric offsets down to epsilon."""
    uni = np.linspace(0.0, 1.0, uniform_points)
    geo = 1.0 - np.geomspace(0.5, epsilon, refined_points)
    grid = np.unique(np.concatenate([uni[:-1], geo, [1.0]]))
    return grid
