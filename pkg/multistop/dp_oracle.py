"""
multistop - exact backward induction for the discrete m-stopping problem.

W^j_i(x) is the optimal expected reward E[x v X_T1 v ... v X_Tj] with j stops
left after observing X_1..X_i. The anchor is W^j_{n-j+1}(x) = x and

    W^j_i(x) = E[ W^{j-1}_{i+1}(X_{i+1}) v W^j_{i+1}(x) ],   W^0 = identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable
import csv
import io
import json
import logging
import math

import numpy as np
from scipy import integrate, special

from .core import NEG_INF, MultiStopResult, interp_guarantee
from .models import DiscreteModel
from .schema import ConfigError, DomainError, QuadratureError, QuadSpec

log = logging.getLogger(__name__)

DP_SCHEMA = "multistop.dp_thresholds/1"


@dataclass
class ThresholdTable:
    """
    W[j, i, k] = W^j_i(x_grid[k]) for i <= n - j + 1, NaN elsewhere.
    x_grid[0] is -inf unless the caller supplied a grid without it.
    """
    n: int
    m: int
    x_grid: np.ndarray
    W: np.ndarray
    error_estimate: float = 0.0
    exact: bool = False
    metadata: dict = field(default_factory=dict)

    def row(self, j: int, i: int) -> np.ndarray:
        if not 0 <= i <= self.n - j + 1:
            raise DomainError(f"W^{j}_{i} undefined for n={self.n}")
        return self.W[j, i]

    def values(self, j: int, i: int, x) -> np.ndarray:
        if j == 0:
            return np.asarray(x, float)
        x = np.asarray(x, float)
        if not np.isneginf(self.x_grid[0]) and np.any(x < self.x_grid[0]):
            raise DomainError(f"guarantee below the x grid start {self.x_grid[0]}")
        return interp_guarantee(self.x_grid, self.row(j, i), x)

    def to_dict(self) -> dict:
        W = np.where(np.isnan(self.W), None, self.W.astype(object))
        return {
            "schema": DP_SCHEMA,
            "n": self.n,
            "m": self.m,
            "x_grid": self.x_grid.tolist(),
            "W": W.tolist(),
            "error_estimate": self.error_estimate,
            "exact": self.exact,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdTable":
        if d.get("schema") != DP_SCHEMA:
            raise ConfigError(f"not a discrete threshold table: schema={d.get('schema')!r}")
        table = cls(
            n=int(d["n"]),
            m=int(d["m"]),
            x_grid=np.array(d["x_grid"], float),
            W=np.array(d["W"], dtype=float),
            error_estimate=float(d.get("error_estimate", 0.0)),
            exact=bool(d.get("exact", False)),
            metadata=d.get("metadata", {}),
        )
        if table.W.shape != (table.m + 1, table.n + 1, len(table.x_grid)):
            raise ConfigError(f"W has shape {table.W.shape}, expected "
                              f"{(table.m + 1, table.n + 1, len(table.x_grid))}")
        return table

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["j", "i", "x", "W"])
        for j in range(1, self.m + 1):
            for i in range(self.n - j + 2):
                for k, x in enumerate(self.x_grid):
                    w.writerow([j, i, repr(float(x)), repr(float(self.W[j, i, k]))])
        return buf.getvalue()


class _QuantileRule:
    """
    Composite Gauss-Legendre rule on u in (0, 1 - p) with panels graded
    toward both ends; the top sliver (1 - p, 1) is integrated separately.
    """

    def __init__(self, nodes: int, p: float):
        decades = max(1, int(math.ceil(-math.log10(p))))
        low = np.geomspace(p, 0.1, decades + 1)
        mid = np.linspace(0.1, 0.9, 9)
        high = 1.0 - np.geomspace(0.1, p, decades + 1)
        self.edges = np.unique(np.concatenate([[0.0], low, mid, high]))
        self.p = p
        g, w = special.roots_legendre(nodes)
        self.g, self.w = g, w
        a, b = self.edges[:-1, None], self.edges[1:, None]
        self.u = (0.5 * (b - a) * g + 0.5 * (a + b)).ravel()
        self.wu = (0.5 * (b - a) * w).ravel()
        self.panel = np.repeat(np.arange(len(self.edges) - 1), nodes)

    def partial(self, lo: np.ndarray, hi: np.ndarray):
        """Nodes and weights of the rule mapped onto [lo_k, hi_k] for each k."""
        lo, hi = lo[:, None], hi[:, None]
        u = 0.5 * (hi - lo) * self.g + 0.5 * (hi + lo)
        return u, 0.5 * (hi - lo) * self.w


def _reachable_grid(model: DiscreteModel, quad: QuadSpec) -> np.ndarray:
    """-inf plus guarantee nodes spanning every X_i's quantile range."""
    base = model.base
    if base.atoms is not None:
        z, _ = base.atoms
        xs = (model.discounts[:, None] * z[None, :] + model.costs[:, None]).ravel()
        return np.concatenate([[NEG_INF], np.unique(xs)])
    p = quad.tail_probability
    u = special.expit(np.linspace(special.logit(p), special.logit(1 - p), quad.grid_size))
    z = base.ppf(u)
    picks = sorted({0, model.n // 2, model.n - 1})
    xs = np.concatenate([model.discounts[i] * z + model.costs[i] for i in picks])
    xs = np.unique(xs[np.isfinite(xs)])
    return np.concatenate([[NEG_INF], xs])


def _inverse_row(x_grid: np.ndarray, row: np.ndarray, w: np.ndarray) -> np.ndarray:
    """X* with f(X*) = w for the nondecreasing tabulated f; -inf below f(-inf)."""
    fin = np.isfinite(x_grid)
    xs, fs = x_grid[fin], row[fin]
    keep = np.concatenate([[True], fs[1:] > np.maximum.accumulate(fs)[:-1]])
    xs, fs = xs[keep], fs[keep]
    out = np.interp(w, fs, xs)
    out = np.where(w > fs[-1], w, out)
    if not fin[0]:
        out = np.where(w <= row[0], NEG_INF, out)
    return out


def _expect_continuous(model, i, f_row, w, x_grid, rule, tail_int, quad):
    """
    E[f(X) v w] for X = c_i Z + d_i, one value per entry of w.

    Splits at the kink u* = F((X* - d_i)/c_i) and integrates f(X(u)) over
    [u*, 1] with the panel rule; f_row None means f is the identity.
    """
    c, d = model.discounts[i - 1], model.costs[i - 1]
    base = model.base
    xstar = w if f_row is None else _inverse_row(x_grid, f_row, w)
    with np.errstate(invalid="ignore"):
        ustar = np.where(np.isneginf(xstar), 0.0, base.cdf((xstar - d) / c))
    ustar = np.clip(np.nan_to_num(ustar, nan=0.0), 0.0, 1.0)

    def f_of(u):
        x = c * base.ppf(u) + d
        return x if f_row is None else interp_guarantee(x_grid, f_row, x)

    full = f_of(rule.u) * rule.wu
    panel_sum = np.bincount(rule.panel, weights=full, minlength=len(rule.edges) - 1)
    suffix = np.concatenate([np.cumsum(panel_sum[::-1])[::-1], [0.0]])
    top = rule.edges[-1]
    x_top = c * base.ppf(top) + d
    f_top = x_top if f_row is None else float(interp_guarantee(x_grid, f_row, x_top))
    tail = c * tail_int + d * rule.p + rule.p * max(f_top - x_top, 0.0)

    inner = ustar < top
    k = np.clip(np.searchsorted(rule.edges, ustar, side="right") - 1, 0, len(rule.edges) - 2)
    hi = rule.edges[k + 1]
    u_part, w_part = rule.partial(np.where(inner, ustar, top), np.where(inner, hi, top))
    part = (f_of(u_part) * w_part).sum(axis=1)
    above = np.where(inner, part + suffix[k + 1] + tail, 0.0)
    # kink inside the top sliver: f(X) ~ X there
    sliver = ~inner
    if sliver.any():
        rest = 1.0 - ustar[sliver]
        xq = c * base.ppf(1.0 - 0.5 * rest) + d
        above[sliver] = rest * np.maximum(xq, w[sliver])
    safe_w = np.where(np.isneginf(w), 0.0, w)
    return safe_w * ustar + above


def _expect_atoms(model, i, f_row, w, x_grid):
    c, d = model.discounts[i - 1], model.costs[i - 1]
    z, p = model.base.atoms
    x = c * z + d
    fx = x if f_row is None else interp_guarantee(x_grid, f_row, x)
    return (np.maximum(fx[None, :], w[:, None]) * p[None, :]).sum(axis=1)


def _tail_integral(model: DiscreteModel, p: float) -> float:
    val, err = integrate.quad(lambda u: float(model.base.ppf(u)), 1.0 - p, 1.0, limit=200)
    if not math.isfinite(val):
        raise QuadratureError("upper tail of the base distribution is not integrable", err)
    return val


def backward_thresholds(model: DiscreteModel, m: int, x_grid=None, quad: QuadSpec | None = None) -> ThresholdTable:
    """Tabulate W^j_i for j = 0..m and i = 0..n-j+1."""
    quad = quad or QuadSpec()
    n = model.n
    if not 1 <= m <= n:
        raise ConfigError(f"need 1 <= m <= n, got m={m}, n={n}")
    if x_grid is None:
        x_grid = _reachable_grid(model, quad)
    else:
        x_grid = np.asarray(x_grid, float)
        if np.any(np.diff(x_grid) <= 0):
            raise ConfigError("x grid must be strictly increasing")
    exact = model.base.atoms is not None
    K = len(x_grid)
    W = np.full((m + 1, n + 1, K), np.nan)
    W[0, :, :] = x_grid
    rule = None if exact else _QuantileRule(quad.nodes, quad.tail_probability)
    half = None if exact else _QuantileRule(max(2, quad.nodes // 2), quad.tail_probability)
    tail_int = 0.0 if exact else _tail_integral(model, quad.tail_probability)
    error_estimate = 0.0

    for j in range(1, m + 1):
        anchor = n - j + 1
        W[j, anchor] = x_grid
        for i in range(anchor - 1, -1, -1):
            f_row = None if j == 1 else W[j - 1, i + 1]
            w = W[j, i + 1]
            if exact:
                W[j, i] = _expect_atoms(model, i + 1, f_row, w, x_grid)
                continue
            W[j, i] = _expect_continuous(model, i + 1, f_row, w, x_grid, rule, tail_int, quad)
            if i == anchor - 1:
                coarse = _expect_continuous(model, i + 1, f_row, w, x_grid, half, tail_int, quad)
                fin = np.isfinite(W[j, i])
                est = float(np.max(np.abs(W[j, i][fin] - coarse[fin]), initial=0.0))
                error_estimate = max(error_estimate, est)
                if not math.isfinite(est):
                    raise QuadratureError(f"expectation for level {j} is not finite", est)
                if est > quad.tolerance:
                    log.warning("level %d quadrature estimate %.3g above tolerance %.3g", j, est, quad.tolerance)
        log.debug("level %d done: W^%d_0(-inf)=%r", j, j, W[j, 0, 0])
    return ThresholdTable(n=n, m=m, x_grid=x_grid, W=W, error_estimate=error_estimate, exact=exact,
                          metadata={"model": model.to_dict(), "quad": quad.to_dict()})


def optimal_value(table: ThresholdTable, guarantee: float = NEG_INF) -> float:
    """W^m_0(guarantee)."""
    return float(table.values(table.m, 0, guarantee))


def execute_index_rule(X: np.ndarray, m: int, exceeds: Callable, guarantee=NEG_INF):
    """
    Run an index threshold rule on a batch of realizations X (reps x n).

    exceeds(l, i, x, best) returns, per replication, whether the l-th stop is
    taken at index i (1-based) given observation x and running best. The
    l-th stop is forced at index n - m + l when nothing exceeded before it.
    Returns (stops, values, forced, reward).
    """
    X = np.atleast_2d(np.asarray(X, float))
    R, n = X.shape
    if m > n:
        raise ConfigError(f"m={m} exceeds n={n}")
    stops = np.full((R, m), n, dtype=int)
    values = np.full((R, m), np.nan)
    forced = np.zeros((R, m), dtype=bool)
    taken = np.zeros(R, dtype=int)
    best = np.broadcast_to(np.asarray(guarantee, float), (R,)).copy()
    rows = np.arange(R)
    for i in range(1, n + 1):
        active = taken < m
        if not active.any():
            break
        x = X[:, i - 1]
        hit = np.zeros(R, dtype=bool)
        for ell in np.unique(taken[active]):
            sel = active & (taken == ell)
            hit[sel] = exceeds(int(ell) + 1, i, x[sel], best[sel])
        cap = n - m + taken + 1
        take = active & (hit | (i >= cap))
        r = rows[take]
        slot = taken[take]
        stops[r, slot] = i
        values[r, slot] = x[take]
        forced[r, slot] = ~hit[take]
        best[take] = np.maximum(best[take], x[take])
        taken[take] += 1
    return stops, values, forced, best


def table_rule(table: ThresholdTable, m: int) -> Callable:
    """Stop when W^{j-1}_i(X_i) > W^j_i(best), j the number of stops left."""

    def exceeds(ell, i, x, best):
        j = m - ell + 1
        lhs = table.values(j - 1, i, x)
        rhs = table.values(j, i, best)
        return lhs > rhs

    return exceeds


def result_from_row(stops, values, forced, reward, guarantee, horizon) -> MultiStopResult:
    return MultiStopResult(
        stops=tuple(int(s) for s in stops),
        values=tuple(float(v) for v in values),
        reward=float(reward),
        forced=tuple(bool(f) for f in forced),
        guarantee=float(guarantee),
        horizon=horizon,
    )


def run_policy(table: ThresholdTable, realization, guarantee: float = NEG_INF) -> MultiStopResult:
    """Execute the optimal threshold stopping times on one realization X_1..X_n."""
    realization = np.asarray(realization, float)
    if realization.shape != (table.n,):
        raise DomainError(f"realization has length {realization.size}, expected n={table.n}")
    stops, values, forced, best = execute_index_rule(realization[None, :], table.m, table_rule(table, table.m), guarantee)
    return result_from_row(stops[0], values[0], forced[0], best[0], guarantee, table.n)
