"""
multistop - Monte Carlo of threshold policies.

Samples the Poisson limit model and finite discounted sequences, runs the
optimal threshold policies on them and estimates expected rewards with
confidence intervals. Replications are grouped in fixed-size chunks, one
SeedSequence child per chunk, so serial and threaded runs give identical
numbers for the same root seed.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Callable
import csv
import io
import logging
import math

import numpy as np
from scipy import integrate, stats

from .core import NEG_INF, IntensityModel, MarkedPointSet, MultiStopResult, ThresholdFamily, StoppingCurveFamily
from .core import eval_curve, refined_time_grid
from .dp_oracle import ThresholdTable, backward_thresholds, execute_index_rule, optimal_value, result_from_row, table_rule
from .models import DiscreteModel
from .schema import ConfigError, DomainError, QuadSpec, SolveSpec

log = logging.getLogger(__name__)

CHUNK = 4096
POLICY_KINDS = ("limit", "dp", "domain")


@dataclass(frozen=True)
class PolicySpec:
    """
    Which threshold rule to run.

    limit: thresholds of the limit model, rescaled by (a-hat_n, b-hat_n) for
    discrete sequences. dp: the finite-n threshold table. domain: the limit
    rule with the first stop on the corrected curve v_n^m (gumbel, weibull);
    identical to limit for frechet. delta and closure only matter for
    Poisson runs: points after 1 - delta are not sampled and, with closure,
    the reward of an unfinished run is the continuation value u^k(1-delta, best).
    """
    kind: str
    m: int
    delta: float = 1e-3
    closure: bool = True
    w: Callable[[np.ndarray], np.ndarray] | None = None
    verbatim: bool = False

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy {self.kind!r}; known: {POLICY_KINDS}")
        if self.m < 1:
            raise ConfigError("policy needs m >= 1")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "m": self.m, "delta": self.delta, "closure": self.closure,
                "custom_w": self.w is not None, "verbatim": self.verbatim}


@dataclass(frozen=True)
class EstimateReport:
    replications: int
    mean: float
    se: float
    ci_lo: float
    ci_hi: float
    confidence: float
    seed: int
    notes: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["notes"] = list(self.notes)
        return d


@dataclass
class StudyRow:
    n: int
    m: int
    policy: str
    raw_value: float
    scaled_value: float
    limit: float
    gap: float
    se: float
    ci_lo: float
    ci_hi: float

    COLUMNS = ("n", "m", "policy", "raw_value", "scaled_value", "limit", "gap", "se", "ci_lo", "ci_hi")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.COLUMNS}

    @classmethod
    def from_dict(cls, d: dict) -> "StudyRow":
        missing = [k for k in cls.COLUMNS if k not in d]
        if missing:
            raise ConfigError(f"study row lacks columns {missing}")
        return cls(n=int(d["n"]), m=int(d["m"]), policy=str(d["policy"]),
                   **{k: float(d[k]) for k in cls.COLUMNS[3:]})


# random streams

def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _chunks(seed: int, replications: int) -> list[tuple[int, np.random.SeedSequence]]:
    sizes = [CHUNK] * (replications // CHUNK)
    if replications % CHUNK:
        sizes.append(replications % CHUNK)
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    return list(zip(sizes, children))


def _run_chunks(fn: Callable, seed: int, replications: int, threads: int = 1) -> np.ndarray:
    jobs = _chunks(seed, replications)
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda job: fn(job[0], np.random.default_rng(job[1])), jobs))
    else:
        parts = [fn(size, np.random.default_rng(ss)) for size, ss in jobs]
    return np.concatenate(parts)


# Poisson limit model

@dataclass
class _PoissonRegion:
    """[0, cutoff] x (L(t), inf) with its tabulated cumulative mass in t."""
    model: IntensityModel
    cutoff: float
    t: np.ndarray
    floor: np.ndarray
    cum: np.ndarray

    @property
    def mass(self) -> float:
        return float(self.cum[-1])

    def level(self, t) -> np.ndarray:
        return np.interp(t, self.t, self.floor)

    def draw(self, size: int, rng: np.random.Generator):
        """Counts per replication and the concatenated (times, values)."""
        counts = rng.poisson(self.mass, size=size)
        total = int(counts.sum())
        times = np.interp(rng.random(total) * self.mass, self.cum, self.t)
        times = np.minimum(times, self.cutoff)
        lvl = self.level(times)
        top = self.model.G(times, lvl)
        values = self.model.tail_inverse(times, rng.random(total) * top)
        values = np.maximum(values, np.nextafter(lvl, np.inf))
        return counts, times, values


def _region(model: IntensityModel, cutoff: float, level, points: int = 4001) -> _PoissonRegion:
    """cutoff = 1 is allowed when G stays finite up to the horizon."""
    if not 0 < cutoff <= 1:
        raise DomainError("time cutoff must lie in (0, 1]")
    t = np.unique(np.concatenate([np.linspace(0.0, cutoff, points),
                                  cutoff * np.geomspace(1e-9, 1.0, points // 4),
                                  1.0 - np.geomspace(max(1.0 - cutoff, 1e-12), 1.0, points // 4)]))
    t = t[(t >= 0) & (t <= cutoff)]
    floor = np.asarray(level(t) if callable(level) else np.full(t.shape, float(level)), float)
    if math.isfinite(model.c):
        floor = np.maximum(floor, model.c)
    t_eval = np.maximum(t, 1e-12) if getattr(model, "singular_at_zero", False) else t
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        rate = np.asarray(model.G(t_eval, floor), float)
    if not np.all(np.isfinite(rate)):
        raise DomainError("Poisson mass of the sampling region is infinite; raise the level cutoff or delta")
    cum = integrate.cumulative_trapezoid(rate, t, initial=0.0)
    return _PoissonRegion(model, cutoff, t, floor, cum)


def sample_poisson(model: IntensityModel, time_cutoff: float, level_cutoff, seed=0) -> MarkedPointSet:
    """
    One realization of the marked points in [0, time_cutoff] x (L, inf).

    level_cutoff is a number or a function of t. The count is Poisson with
    the region's mass; times come from inverse transform of the cumulative
    mass and values from G(t, y) = U G(t, L(t)).
    """
    region = _region(model, time_cutoff, level_cutoff)
    counts, times, values = region.draw(1, _rng(seed))
    return MarkedPointSet(times=times, values=values, time_cutoff=time_cutoff,
                          level_cutoff=float(np.min(region.floor)), c=model.c)


def _poisson_batch(times, values, counts, thresholds: ThresholdFamily, m: int, guarantee: float,
                   closure: Callable | None, cutoff: float):
    """Run the threshold rule on a batch of point sets; returns per-run arrays."""
    R = len(counts)
    N = int(counts.max()) if R else 0
    T = np.full((R, N), np.inf)
    Y = np.full((R, N), NEG_INF)
    rep = np.repeat(np.arange(R), counts)
    order = np.lexsort((times, rep))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    pos = np.arange(len(rep)) - offsets[rep]
    T[rep, pos] = np.asarray(times)[order]
    Y[rep, pos] = np.asarray(values)[order]
    stops = np.ones((R, m))
    vals = np.full((R, m), guarantee)
    forced = np.ones((R, m), bool)
    taken = np.zeros(R, int)
    best = np.full(R, guarantee, float)
    floor_x = guarantee if math.isfinite(guarantee) or not math.isfinite(thresholds.c) else thresholds.c
    for col in range(N):
        live = (taken < m) & np.isfinite(T[:, col])
        if not live.any():
            continue
        hit = np.zeros(R, bool)
        for ell in np.unique(taken[live]):
            sel = live & (taken == ell)
            j = m - int(ell)
            ref = np.maximum(best[sel], floor_x)
            gamma = np.maximum(thresholds.values(j, T[sel, col], ref), ref)
            hit[sel] = Y[sel, col] > gamma
        r = np.flatnonzero(hit)
        slot = taken[r]
        stops[r, slot] = T[r, col]
        vals[r, slot] = Y[r, col]
        forced[r, slot] = False
        best[r] = np.maximum(best[r], Y[r, col])
        taken[r] += 1
    reward = best.copy()
    closed = np.zeros(R, bool)
    if closure is not None:
        open_ = taken < m
        for k in np.unique(m - taken[open_]):
            sel = open_ & (m - taken == k)
            reward[sel] = np.maximum(closure(int(k), cutoff, best[sel]), best[sel])
            closed[sel] = True
    return stops, vals, forced, reward, closed


def _closure_from(curves: StoppingCurveFamily | None) -> Callable | None:
    if curves is None:
        return None

    def closure(k, t, best):
        x = np.maximum(best, curves.c) if math.isfinite(curves.c) else best
        return curves.values(k, np.full(np.shape(best), t), x)

    return closure


def stop_poisson(points: MarkedPointSet, thresholds: ThresholdFamily, m: int, guarantee: float = NEG_INF,
                 curves: StoppingCurveFamily | None = None) -> MultiStopResult:
    """
    Stop at the first point above gamma^m(tau, x), then at the first later
    point above gamma^{m-l+1}(tau, best), best the running maximum joined with
    the guarantee. Missing stops sit at the horizon 1 with the guarantee as
    value; with curves given, an unfinished run is closed at the time cutoff
    by the continuation value u^k(cutoff, best).
    """
    if m > thresholds.m:
        raise ConfigError(f"threshold family has {thresholds.m} levels, policy needs {m}")
    counts = np.array([len(points)])
    stops, vals, forced, reward, closed = _poisson_batch(points.times, points.values, counts, thresholds, m,
                                                         guarantee, _closure_from(curves), points.time_cutoff)
    return MultiStopResult(stops=tuple(float(s) for s in stops[0]), values=tuple(float(v) for v in vals[0]),
                           reward=float(reward[0]), forced=tuple(bool(f) for f in forced[0]),
                           guarantee=float(guarantee), horizon=1.0, closed=bool(closed[0]))


def poisson_floor(thresholds: ThresholdFamily, m: int, guarantee: float = NEG_INF) -> Callable:
    """L(t) just below every gamma^j(t, guarantee), j <= m."""
    x = guarantee if math.isfinite(guarantee) or not math.isfinite(thresholds.c) else thresholds.c

    def level(t):
        t = np.asarray(t, float)
        low = np.min([thresholds.values(j, t, np.full(t.shape, x)) for j in range(1, m + 1)], axis=0)
        return low - 1e-9 * np.maximum(1.0, np.abs(low))

    return level


# discrete sequences

def sample_discrete(model: DiscreteModel, seed=0, size: int | None = None) -> np.ndarray:
    """X_i = c_i Z_i + d_i with Z_i = F^{-1}(U_i); shape (n,) or (size, n)."""
    rng = _rng(seed)
    shape = (model.n,) if size is None else (size, model.n)
    z = model.base.ppf(rng.random(shape))
    return model.discounts * z + model.costs


@dataclass
class DiscreteRule:
    """A ready-to-run index rule: exceeds(l, i, x, best) plus its description."""
    policy: PolicySpec
    exceeds: Callable
    notes: tuple = ()


def _gamma_free(thresholds: ThresholdFamily, j: int, t: float) -> float:
    x = NEG_INF if not math.isfinite(thresholds.c) else thresholds.c
    return float(thresholds.values(j, np.array([t], float), np.array([x]))[0])


def _limit_exceeds(model: DiscreteModel, thresholds: ThresholdFamily, m: int, first: Callable | None = None):
    a, b = model.scale, model.shift
    n = model.n
    c = thresholds.c

    def exceeds(ell, i, x, best):
        j = m - ell + 1
        t = np.full(x.shape, i / n)
        if ell == 1 and first is not None:
            return x > a * first(i / n) + b
        ref = (best - b) / a
        if math.isfinite(c):
            ref = np.maximum(ref, c)
        gamma = np.maximum(thresholds.values(j, t, ref), ref)
        return x > a * gamma + b

    return exceeds


def _corrected_curve(model: DiscreteModel, thresholds: ThresholdFamily, policy: PolicySpec) -> Callable | None:
    """v_n^m for the gumbel and weibull domains; None for frechet."""
    dom = model.domain
    n, m = model.n, policy.m
    base = model.base
    if dom.family == "gumbel":
        def w_default(k):
            with np.errstate(divide="ignore"):
                return np.where(k >= 1, base.ppf(1.0 - 1.0 / np.maximum(k, 1)), NEG_INF)

        w = policy.w or w_default

        def v(t):
            k = math.floor((1.0 - t) * n)
            if k <= 0:
                return NEG_INF
            wk = float(w(np.array(k)))
            return (wk - model.b_n) / model.a_n + _gamma_free(thresholds, m, t) - math.log1p(-t)

        return v
    if dom.family == "weibull":
        from .closed_form import build_from_tag
        from .models import weibull_intensity

        alpha = dom.alpha
        scale = ((alpha + 1) / alpha) ** (1 / alpha)

        def w_default(k):
            k = np.maximum(k, 1)
            return -scale * (base.upper - base.ppf(1.0 - 1.0 / k))

        w = policy.w or w_default
        sol = build_from_tag(weibull_intensity(alpha, dom.c, 0.0).closed_form, m)
        r1 = -scale

        def u00(t):
            return r1 * (1.0 - t) ** (-1.0 / alpha)

        def gamma_c0(t):
            if policy.verbatim:
                return -sol.Phi(m - 1, sol.roots[m - 1]) * float(sol.u_values(1, t, NEG_INF))
            return float(sol.gamma_values(m, t, NEG_INF))

        def v(t):
            k = math.floor((1.0 - t) * n)
            if k <= 0:
                return NEG_INF
            g0 = gamma_c0(t)
            wk = float(w(np.array(k)))
            return g0 / u00(t) * wk / model.a_n + _gamma_free(thresholds, m, t) - g0

        return v
    return None


def make_rule(model: DiscreteModel, policy: PolicySpec, table: ThresholdTable | None = None,
              thresholds: ThresholdFamily | None = None) -> DiscreteRule:
    """Resolve a PolicySpec against a model into an index rule."""
    m = policy.m
    if policy.kind == "dp":
        if table is None:
            raise ConfigError("dp policy needs a threshold table")
        if table.n != model.n or table.m < m:
            raise ConfigError(f"threshold table is for n={table.n}, m={table.m}")
        return DiscreteRule(policy, table_rule(table, m))
    if model.domain is None:
        raise ConfigError(f"{policy.kind} policy needs a model with a domain tag")
    if thresholds is None:
        raise ConfigError(f"{policy.kind} policy needs limit thresholds")
    if thresholds.m < m:
        raise ConfigError(f"limit thresholds have {thresholds.m} levels, policy needs {m}")
    first = _corrected_curve(model, thresholds, policy) if policy.kind == "domain" else None
    notes = ()
    if policy.kind == "domain" and first is None:
        notes = ("frechet domain: the domain rule is the limit rule",)
    if policy.kind == "domain" and model.domain.family == "weibull" and model.domain.d != 0:
        notes = ("shifted weibull: monotone d_n or non-vanishing c_n a_n is assumed, not checked",)
    return DiscreteRule(policy, _limit_exceeds(model, thresholds, m, first), notes)


def stop_discrete(sequence, policy: PolicySpec, model: DiscreteModel, table: ThresholdTable | None = None,
                  thresholds: ThresholdFamily | None = None, guarantee: float = NEG_INF) -> MultiStopResult:
    """Run a policy on one sequence X_1..X_n; stops are 1-based indices."""
    seq = np.asarray(sequence, float)
    if seq.shape != (model.n,):
        raise DomainError(f"sequence has length {seq.size}, expected n={model.n}")
    rule = make_rule(model, policy, table, thresholds)
    stops, values, forced, best = execute_index_rule(seq[None, :], policy.m, rule.exceeds, guarantee)
    return result_from_row(stops[0], values[0], forced[0], best[0], guarantee, model.n)


# estimates

def _report(rewards: np.ndarray, confidence: float, seed: int, notes=()) -> EstimateReport:
    R = len(rewards)
    mean = float(np.mean(rewards))
    sd = float(np.std(rewards, ddof=1)) if R > 1 else 0.0
    se = sd / math.sqrt(R)
    half = float(stats.norm.ppf(0.5 + confidence / 2)) * se
    return EstimateReport(R, mean, se, mean - half, mean + half, confidence, seed, tuple(notes))


def estimate_value(model, policy: PolicySpec, replications: int, seed: int = 0, confidence: float = 0.95,
                   table: ThresholdTable | None = None, thresholds: ThresholdFamily | None = None,
                   curves: StoppingCurveFamily | None = None, guarantee: float = NEG_INF,
                   threads: int = 1, bias_check: bool = False) -> EstimateReport:
    """
    Mean reward of a policy over independent replications.

    model is a DiscreteModel (index rules) or an IntensityModel (Poisson runs
    with the limit thresholds). bias_check reruns a Poisson estimate with
    delta / 2 and records the difference as the truncation bias.
    """
    if replications < 2:
        raise ConfigError("need at least 2 replications")
    if not 0 < confidence < 1:
        raise ConfigError("confidence must lie in (0, 1)")
    if isinstance(model, DiscreteModel):
        rule = make_rule(model, policy, table, thresholds)

        def chunk(size, rng):
            X = sample_discrete(model, rng, size)
            _, _, _, best = execute_index_rule(X, policy.m, rule.exceeds, guarantee)
            return best

        rewards = _run_chunks(chunk, seed, replications, threads)
        return _report(rewards, confidence, seed, rule.notes)

    if thresholds is None:
        raise ConfigError("Poisson estimates need a threshold family")
    notes = []
    rewards = _poisson_rewards(model, policy, thresholds, curves, guarantee, seed, replications, threads)
    if policy.closure and curves is None:
        notes.append("no curves given: unfinished runs keep the guarantee")
    if bias_check:
        half = PolicySpec(policy.kind, policy.m, policy.delta / 2, policy.closure)
        again = _poisson_rewards(model, half, thresholds, curves, guarantee, seed, replications, threads)
        notes.append(f"truncation bias estimate {float(np.mean(again) - np.mean(rewards)):.3g} "
                     f"(delta {policy.delta:g} vs {policy.delta / 2:g})")
    return _report(rewards, confidence, seed, notes)


def _poisson_rewards(model, policy, thresholds, curves, guarantee, seed, replications, threads):
    cutoff = 1.0 - policy.delta
    region = _region(model, cutoff, poisson_floor(thresholds, policy.m, guarantee))
    closure = _closure_from(curves) if policy.closure else None
    log.debug("poisson region mass %.4g over [0, %g]", region.mass, cutoff)

    def chunk(size, rng):
        counts, times, values = region.draw(size, rng)
        *_, reward, _ = _poisson_batch(times, values, counts, thresholds, policy.m, guarantee, closure, cutoff)
        return reward

    return _run_chunks(chunk, seed, replications, threads)


def limit_families(intensity: IntensityModel, m: int, solve: SolveSpec | None = None,
                   quad: QuadSpec | None = None) -> tuple[StoppingCurveFamily, ThresholdFamily]:
    """Curves and thresholds of a limit model: closed form when tagged, ODE otherwise."""
    solve = solve or SolveSpec()
    if intensity.closed_form is not None:
        from .closed_form import build_from_tag

        sol = build_from_tag(intensity.closed_form, m, quad)
        t_grid = refined_time_grid(solve.uniform_points, solve.refined_points, solve.epsilon)
        x_grid = np.asarray(solve.x_grid if solve.x_grid is not None else intensity.default_x_grid(), float)
        h = intensity.model_hash()
        return sol.tabulate(t_grid, x_grid, h), sol.threshold_family(t_grid, x_grid, h)
    from .ode_solver import solve_curve_family, thresholds_from_family

    family = solve_curve_family(intensity, m, solve)
    return family, thresholds_from_family(family)


def convergence_study(model: DiscreteModel, ns, m: int, policies=("dp", "domain"), replications: int = 10000,
                      seed: int = 0, limit: float | None = None, thresholds: ThresholdFamily | None = None,
                      quad: QuadSpec | None = None, confidence: float = 0.95, threads: int = 1,
                      exact: bool = True) -> list[StudyRow]:
    """
    Per-n rows of scaled values against the limit u^m(0).

    Every policy at one n sees the same random sequences. With exact, each n
    also gets a dp_exact row holding the quadrature value of the DP table.
    """
    if model.domain is None and limit is None:
        raise ConfigError("convergence study needs a domain tag or an explicit limit value")
    if (limit is None or thresholds is None) and model.domain is not None:
        curves, thr = limit_families(model.limit_intensity(), m)
        thresholds = thresholds or thr
        if limit is None:
            limit = eval_curve(curves, m, 0.0, NEG_INF if not math.isfinite(curves.c) else curves.c)
    rows: list[StudyRow] = []
    for n in ns:
        mod = model.with_n(int(n))
        if m > mod.n:
            raise ConfigError(f"m={m} exceeds n={n}")
        table = None
        if "dp" in policies or exact:
            table = backward_thresholds(mod, m, quad=quad)
        if exact:
            raw = optimal_value(table)
            sv = mod.scaled(raw)
            rows.append(StudyRow(mod.n, m, "dp_exact", raw, sv, limit, sv - limit, 0.0, sv, sv))
        for kind in policies:
            rep = estimate_value(mod, PolicySpec(kind, m), replications, seed, confidence, table=table,
                                 thresholds=thresholds, threads=threads)
            sv = mod.scaled(rep.mean)
            rows.append(StudyRow(mod.n, m, kind, rep.mean, sv, limit, sv - limit, rep.se / mod.scale,
                                 mod.scaled(rep.ci_lo), mod.scaled(rep.ci_hi)))
        log.info("n=%d done", mod.n)
    return rows


def study_csv(rows: list[StudyRow], header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(StudyRow.COLUMNS)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(row, k) for k in StudyRow.COLUMNS)])
    return buf.getvalue()


def read_study_csv(text: str) -> tuple[str, list[StudyRow]]:
    """Parse study_csv output back into (header, rows)."""
    lines = text.splitlines()
    header = ""
    if lines and lines[0].startswith("# "):
        header, lines = lines[0][2:], lines[1:]
    return header, [StudyRow.from_dict(r) for r in csv.DictReader(lines)]
