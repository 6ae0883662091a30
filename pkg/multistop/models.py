"""
multistop - model families.

Intensity models of the Poisson limit (closed-form classes, the three
extreme-value limits with discount and cost exponents, Poisson arrivals of
i.i.d. observations) and the finite-n discounted model X_i = c_i Z_i + d_i.
Model files are YAML or JSON; see load_model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
import math

import numpy as np
from scipy import integrate, special, stats

from .core import ClassTag, IntensityModel, NEG_INF, class_intensity
from .schema import ConfigError, canonical_json, hash_content, load_document


# H families: H(x) with tail(x) = int_x^inf H and inverse(h) solving H(x) = h

class PowerH:
    """H(x) = k x^(-alpha) on x > 0 (Case 1), alpha > 1."""
    family = "power"

    def __init__(self, k: float = 1.0, alpha: float = 2.0):
        if alpha <= 1 or k <= 0:
            raise ConfigError("power H needs alpha > 1 and k > 0")
        self.k, self.alpha = float(k), float(alpha)

    def __call__(self, x):
        x = np.asarray(x, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x > 0, self.k * np.abs(x) ** -self.alpha, np.inf)

    def tail(self, x):
        x = np.asarray(x, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x > 0, self.k * np.abs(x) ** (1 - self.alpha) / (self.alpha - 1), np.inf)

    def inverse(self, h):
        return (np.asarray(h, float) / self.k) ** (-1.0 / self.alpha)

    def to_dict(self) -> dict:
        return {"family": self.family, "k": self.k, "alpha": self.alpha}


class NegativePowerH:
    """H(x) = k (-x)_+^alpha (Case 2); alpha = 1 is the truncated-linear family."""
    family = "negative_power"

    def __init__(self, k: float = 1.0, alpha: float = 1.0):
        if alpha <= 0 or k <= 0:
            raise ConfigError("negative power H needs alpha > 0 and k > 0")
        self.k, self.alpha = float(k), float(alpha)

    def __call__(self, x):
        x = np.asarray(x, float)
        return self.k * np.maximum(-x, 0.0) ** self.alpha

    def tail(self, x):
        x = np.asarray(x, float)
        return self.k * np.maximum(-x, 0.0) ** (self.alpha + 1) / (self.alpha + 1)

    def inverse(self, h):
        return -((np.asarray(h, float) / self.k) ** (1.0 / self.alpha))

    def to_dict(self) -> dict:
        return {"family": self.family, "k": self.k, "alpha": self.alpha}


class ExponentialH:
    """H(x) = k e^(-x) (Case 3)."""
    family = "exponential"

    def __init__(self, k: float = 1.0):
        if k <= 0:
            raise ConfigError("exponential H needs k > 0")
        self.k = float(k)

    def __call__(self, x):
        return self.k * np.exp(-np.asarray(x, float))

    def tail(self, x):
        return self.k * np.exp(-np.asarray(x, float))

    def inverse(self, h):
        return -np.log(np.asarray(h, float) / self.k)

    def to_dict(self) -> dict:
        return {"family": self.family, "k": self.k}


class TableH:
    """
    Piecewise-linear H through (x_k, h_k), constant below the first node and
    zero above the last one.
    """
    family = "table"

    def __init__(self, x: list[float], h: list[float]):
        self.x = np.asarray(x, float)
        self.h = np.asarray(h, float)
        if len(self.x) < 2 or len(self.x) != len(self.h) or np.any(np.diff(self.x) <= 0):
            raise ConfigError("table H needs >= 2 strictly increasing nodes")
        if np.any(np.diff(self.h) > 0) or np.any(self.h < 0):
            raise ConfigError("table H must be nonnegative and nonincreasing")
        seg = 0.5 * (self.h[1:] + self.h[:-1]) * np.diff(self.x)
        self._suffix = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])

    def __call__(self, x):
        x = np.asarray(x, float)
        return np.where(x > self.x[-1], 0.0, np.interp(x, self.x, self.h))

    def tail(self, x):
        x = np.asarray(x, float)
        k = np.clip(np.searchsorted(self.x, x, side="right") - 1, 0, len(self.x) - 2)
        hx = np.interp(x, self.x, self.h)
        part = 0.5 * (hx + self.h[k + 1]) * (self.x[k + 1] - x) + self._suffix[k + 1]
        below = self._suffix[0] + self.h[0] * (self.x[0] - x)
        return np.where(x >= self.x[-1], 0.0, np.where(x < self.x[0], below, part))

    inverse = None

    def to_dict(self) -> dict:
        return {"family": self.family, "x": self.x.tolist(), "h": self.h.tolist()}


H_FAMILIES = {
    "power": PowerH,
    "negative_power": NegativePowerH,
    "truncated_linear": lambda k=1.0: NegativePowerH(k, 1.0),
    "exponential": ExponentialH,
    "table": TableH,
}


# v families: scaling functions of t with derivative

class RootV:
    """v(t) = (1 - t^p)^q."""
    family = "root"

    def __init__(self, p: float = 1.0, q: float = 0.5):
        if p <= 0 or q == 0:
            raise ConfigError("root v needs p > 0 and q != 0")
        self.p, self.q = float(p), float(q)

    def __call__(self, t):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore"):
            return (1.0 - t ** self.p) ** self.q

    def derivative(self, t):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            base = 1.0 - t ** self.p
            return -self.q * self.p * t ** (self.p - 1) * base ** (self.q - 1)

    def to_dict(self) -> dict:
        return {"family": self.family, "p": self.p, "q": self.q}


class LogRootV:
    """v(t) = ln((1 - t^p) / p)."""
    family = "log_root"

    def __init__(self, p: float = 1.0):
        if p <= 0:
            raise ConfigError("log_root v needs p > 0")
        self.p = float(p)

    def __call__(self, t):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore"):
            return np.log((1.0 - t ** self.p) / self.p)

    def derivative(self, t):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return -self.p * t ** (self.p - 1) / (1.0 - t ** self.p)

    def to_dict(self) -> dict:
        return {"family": self.family, "p": self.p}


V_FAMILIES = {"root": RootV, "log_root": LogRootV}


def _build(registry: dict, spec: dict, what: str):
    spec = dict(spec)
    family = spec.pop("family", None)
    if family not in registry:
        raise ConfigError(f"unknown {what} family {family!r}; known: {sorted(registry)}")
    try:
        return registry[family](**spec)
    except TypeError as exc:
        raise ConfigError(f"bad {what} parameters for {family}: {exc}") from exc


def make_H(spec: dict):
    return _build(H_FAMILIES, spec, "H")


def make_v(spec: dict):
    return _build(V_FAMILIES, spec, "v")


def parse_family(text: str) -> dict:
    """'power:k=2,alpha=2' -> {'family': 'power', 'k': 2.0, 'alpha': 2.0}"""
    name, _, rest = text.partition(":")
    spec: dict[str, Any] = {"family": name.strip()}
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value in {text!r}")
        spec[key.strip()] = float(value)
    return spec


class ClassIntensity(IntensityModel):
    """
    Intensity of a closed-form class: H(y/v)|v'|/v for Cases 1-2 and
    H(y - v)|v'| for Case 3.
    """

    def __init__(self, tag: ClassTag, spec: dict | None = None, name: str = "class"):
        if tag.case not in (1, 2, 3):
            raise ConfigError(f"unknown case {tag.case}")
        self.closed_form = tag
        self.c = 0.0 if tag.case == 1 else NEG_INF
        self.name = name
        self.spec = spec or {"family": "class", **tag.to_dict()}
        self.singular_at_zero = bool(tag.params.get("singular_at_zero", False))

    def G(self, t, y):
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            g = class_intensity(self.closed_form, t, y)
        return np.nan_to_num(g, nan=0.0, posinf=np.inf)

    def tail(self, t, y):
        tag = self.closed_form
        vt, dv = tag.v(t), np.abs(tag.v.derivative(t))
        y = np.asarray(y, float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if tag.case in (1, 2):
                return dv * tag.H.tail(y / vt)
            return dv * tag.H.tail(y - vt)

    def tail_inverse(self, t, level):
        tag = self.closed_form
        if tag.H.inverse is None:
            return super().tail_inverse(t, level)
        vt, dv = tag.v(t), np.abs(tag.v.derivative(t))
        level = np.asarray(level, float)
        if tag.case in (1, 2):
            return vt * tag.H.inverse(level * vt / dv)
        return vt + tag.H.inverse(level / dv)

    def default_x_grid(self) -> np.ndarray:
        if self.closed_form.case == 1:
            return np.concatenate([[0.0], np.geomspace(1e-6, 1e3, 600)])
        if self.closed_form.case == 2:
            neg = -np.geomspace(1e9, 1e-6, 700)
            return np.concatenate([[NEG_INF], neg, [0.0], np.geomspace(1e-3, 10.0, 40)])
        return np.concatenate([[NEG_INF], np.linspace(-40.0, 40.0, 1601)])

    def to_dict(self) -> dict:
        return dict(self.spec)


def gumbel_intensity(c: float = 0.0, d: float = 0.0) -> ClassIntensity:
    """G(t,y) = e^{-y} t^{-(c+d)}; Case 3 with v = ln((1 - t^q)/q), q = 1 - c - d."""
    q = 1.0 - c - d
    if q <= 0:
        raise ConfigError(f"gumbel limit needs c + d < 1, got {c + d}")
    tag = ClassTag(3, ExponentialH(1.0), LogRootV(q), {"c": c, "d": d, "singular_at_zero": c + d > 0})
    return ClassIntensity(tag, {"family": "gumbel", "c": c, "d": d}, name="gumbel")


def frechet_intensity(alpha: float, c: float = 0.0, d: float = 0.0) -> IntensityModel:
    """G(t,y) = t^{c alpha} y^{-alpha} on y > 0; Case 1 when d = 0."""
    if alpha <= 1 or c <= -1.0 / alpha:
        raise ConfigError("frechet limit needs alpha > 1 and c > -1/alpha")
    if d != 0:
        return ShiftedFrechetIntensity(alpha, c, d)
    p = c * alpha + 1.0
    tag = ClassTag(1, PowerH(alpha / p, alpha), RootV(p, 1.0 / alpha), {"alpha": alpha, "c": c})
    return ClassIntensity(tag, {"family": "frechet", "alpha": alpha, "c": c, "d": d}, name="frechet")


class ShiftedFrechetIntensity(IntensityModel):
    """
    G(t,y) = t^{c alpha} (y - d t^{c + 1/alpha})^{-alpha} above the moving
    boundary b(t) = d t^{c + 1/alpha}, +inf below it; untagged.
    """

    def __init__(self, alpha: float, c: float, d: float):
        self.alpha, self.cexp, self.d = float(alpha), float(c), float(d)
        self.q = self.cexp + 1.0 / self.alpha
        self.c = min(0.0, self.d)
        self.name = "frechet"
        self.singular_at_zero = self.cexp < 0

    def boundary(self, t):
        return self.d * np.asarray(t, float) ** self.q

    def _gap(self, t, y):
        return np.asarray(y, float) - self.boundary(t)

    def G(self, t, y):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            gap = self._gap(t, y)
            g = t ** (self.cexp * self.alpha) * np.where(gap > 0, gap, 1.0) ** (-self.alpha)
        return np.where(gap > 0, g, np.inf)

    def tail(self, t, y):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            gap = self._gap(t, y)
            val = t ** (self.cexp * self.alpha) * np.where(gap > 0, gap, 1.0) ** (1.0 - self.alpha)
        return np.where(gap > 0, val / (self.alpha - 1.0), np.inf)

    def tail_inverse(self, t, level):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore", over="ignore"):
            scaled = np.asarray(level, float) * t ** (-self.cexp * self.alpha)
            return self.boundary(t) + scaled ** (-1.0 / self.alpha)

    def to_dict(self) -> dict:
        return {"family": "frechet", "alpha": self.alpha, "c": self.cexp, "d": self.d}


class ShiftedWeibullIntensity(IntensityModel):
    """G(t,y) = t^{-c alpha} (d t^{c - 1/alpha} - y)_+^alpha, untagged."""

    def __init__(self, alpha: float, c: float, d: float):
        self.alpha, self.cexp, self.d = float(alpha), float(c), float(d)
        self.c = NEG_INF
        self.name = "weibull"
        self.singular_at_zero = True

    def G(self, t, y):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            top = self.d * t ** (self.cexp - 1.0 / self.alpha)
            g = t ** (-self.cexp * self.alpha) * np.maximum(top - np.asarray(y, float), 0.0) ** self.alpha
        return np.nan_to_num(g, nan=0.0)

    def tail(self, t, y):
        t = np.asarray(t, float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            top = self.d * t ** (self.cexp - 1.0 / self.alpha)
            gap = np.maximum(top - np.asarray(y, float), 0.0)
            return t ** (-self.cexp * self.alpha) * gap ** (self.alpha + 1) / (self.alpha + 1)

    def tail_inverse(self, t, level):
        t = np.asarray(t, float)
        top = self.d * t ** (self.cexp - 1.0 / self.alpha)
        return top - (np.asarray(level, float) * t ** (self.cexp * self.alpha)) ** (1.0 / self.alpha)

    def default_x_grid(self) -> np.ndarray:
        neg = -np.geomspace(1e9, 1e-6, 700)
        return np.concatenate([[NEG_INF], neg, [0.0], np.geomspace(1e-3, 10.0, 40)])

    def to_dict(self) -> dict:
        return {"family": "weibull", "alpha": self.alpha, "c": self.cexp, "d": self.d}


def weibull_intensity(alpha: float, c: float = 0.0, d: float = 0.0) -> IntensityModel:
    """Weibull limit; Case 2 with v = (1 - t^{1 - c alpha})^{-1/alpha} when d = 0."""
    if alpha <= 0:
        raise ConfigError("weibull limit needs alpha > 0")
    if c * alpha >= 1:
        raise ConfigError("weibull limit with c >= 1/alpha is not supported")
    if d != 0:
        return ShiftedWeibullIntensity(alpha, c, d)
    p = 1.0 - c * alpha
    tag = ClassTag(2, NegativePowerH(alpha / p, alpha), RootV(p, -1.0 / alpha),
                   {"alpha": alpha, "c": c, "singular_at_zero": c > 0})
    return ClassIntensity(tag, {"family": "weibull", "alpha": alpha, "c": c, "d": d}, name="weibull")


class ArrivalIntensity(IntensityModel):
    """Observations from F arriving at Poisson rate lambda: G(t,y) = lambda (1 - F(y))."""

    def __init__(self, rate: float, base: "BaseDistribution"):
        if rate <= 0:
            raise ConfigError("arrival rate must be positive")
        self.rate = float(rate)
        self.base = base
        self.c = base.lower
        self.name = "arrival"

    def G(self, t, y):
        t, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(y, float))
        return self.rate * self.base.sf(y)

    def _tail_table(self):
        if getattr(self, "_table", None) is None:
            u = special.expit(np.linspace(special.logit(1e-12), special.logit(1 - 1e-12), 20001))
            z = np.unique(self.base.ppf(u))
            z = z[np.isfinite(z)]
            rest, _ = integrate.quad(lambda v: float(self.base.sf(v)), z[-1], self.base.upper, limit=200)
            part = integrate.cumulative_trapezoid(self.base.sf(z), z, initial=0.0)
            self._table = (z, part[-1] - part + rest)
        return self._table

    def tail(self, t, y):
        """lambda E[(Z - y)_+], tabulated once in quantile space."""
        t, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(y, float))
        z, above = self._tail_table()
        out = np.interp(y, z, above)
        # below the table the tail grows linearly with slope lambda (sf ~ 1)
        out = np.where(y < z[0], above[0] + (z[0] - y), out)
        return self.rate * np.where(y > z[-1], 0.0, out)

    def tail_inverse(self, t, level):
        t, level = np.broadcast_arrays(np.asarray(t, float), np.asarray(level, float))
        return self.base.ppf(1.0 - level / self.rate)

    def default_x_grid(self) -> np.ndarray:
        if math.isfinite(self.c):
            top = self.base.ppf(1 - 1e-12)
            span = (top - self.c) * 4 if math.isfinite(top) else 1e3
            return np.concatenate([[self.c], self.c + np.geomspace(1e-6, span, 600)])
        return np.concatenate([[NEG_INF], np.linspace(self.base.ppf(1e-9), self.base.ppf(1 - 1e-12) + 20, 1601)])

    def to_dict(self) -> dict:
        return {"family": "arrival", "rate": self.rate, "base": self.base.to_dict()}


# base distributions of the finite-n model

SCIPY_ALIASES = {
    "exponential": "expon",
    "normal": "norm",
    "frechet": "invweibull",
    "reverse_weibull": "weibull_max",
    "gumbel": "gumbel_r",
}


class BaseDistribution:
    """A scipy.stats continuous family with quantile and CDF evaluators."""

    atoms = None

    def __init__(self, family: str, **params):
        name = SCIPY_ALIASES.get(family, family)
        dist = getattr(stats, name, None)
        if dist is None or not hasattr(dist, "ppf"):
            raise ConfigError(f"unknown base distribution {family!r}")
        try:
            self.frozen = dist(**params)
            lo, hi = self.frozen.support()
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {family}: {exc}") from exc
        self.family, self.params = family, dict(params)
        self.lower, self.upper = float(lo), float(hi)

    def ppf(self, u):
        return self.frozen.ppf(u)

    def cdf(self, x):
        return self.frozen.cdf(x)

    def sf(self, x):
        return self.frozen.sf(x)

    def pdf(self, x):
        return self.frozen.pdf(x)

    def to_dict(self) -> dict:
        return {"family": self.family, **self.params}


class FiniteSupport:
    """Distribution on finitely many atoms; expectations are exact sums."""

    def __init__(self, values: list[float], probs: list[float] | None = None, family: str = "finite"):
        values = np.asarray(values, float)
        probs = np.full(len(values), 1.0 / len(values)) if probs is None else np.asarray(probs, float)
        if len(values) == 0 or len(values) != len(probs) or np.any(probs < 0):
            raise ConfigError("finite support needs matching values and nonnegative probabilities")
        if not math.isclose(probs.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ConfigError(f"probabilities sum to {probs.sum()}, not 1")
        order = np.argsort(values)
        self.values, self.probs = values[order], probs[order]
        self.family = family
        self.lower, self.upper = float(self.values[0]), float(self.values[-1])
        self._cum = np.cumsum(self.probs)

    @property
    def atoms(self):
        return self.values, self.probs

    def ppf(self, u):
        k = np.searchsorted(self._cum, np.asarray(u, float) - 1e-15, side="left")
        return self.values[np.clip(k, 0, len(self.values) - 1)]

    def cdf(self, x):
        k = np.searchsorted(self.values, np.asarray(x, float), side="right")
        return np.concatenate([[0.0], self._cum])[k]

    def sf(self, x):
        return 1.0 - self.cdf(x)

    def pdf(self, x):
        raise ConfigError("finite-support distributions have no density")

    def to_dict(self) -> dict:
        if self.family == "degenerate":
            return {"family": "degenerate", "value": self.lower}
        return {"family": "finite", "values": self.values.tolist(), "probs": self.probs.tolist()}


def make_base(spec: dict):
    spec = dict(spec)
    family = spec.pop("family", None)
    if family == "finite":
        return FiniteSupport(spec.get("values", []), spec.get("probs"))
    if family == "degenerate":
        return FiniteSupport([spec.get("value", 0.0)], [1.0], family="degenerate")
    if not family:
        raise ConfigError("base distribution needs a family")
    return BaseDistribution(family, **spec)


# discount and cost sequences over i/n

def sequence_values(spec: dict | float | None, n: int, a_n: float = 1.0, default: float = 0.0) -> np.ndarray:
    """
    Evaluate a sequence formula at i = 1..n.

    kinds: constant (value), power (scale * (i/n)^exponent + offset),
    log (scale * ln(i/n) + offset). scale_by_a_n multiplies by a_n.
    """
    if spec is None:
        return np.full(n, float(default))
    if isinstance(spec, (int, float)):
        return np.full(n, float(spec))
    spec = dict(spec)
    kind = spec.get("kind", "constant")
    s = np.arange(1, n + 1) / n
    scale, offset = float(spec.get("scale", 1.0)), float(spec.get("offset", 0.0))
    if kind == "constant":
        out = np.full(n, float(spec.get("value", default)))
    elif kind == "power":
        out = scale * s ** float(spec.get("exponent", 1.0)) + offset
    elif kind == "log":
        out = scale * np.log(s) + offset
    else:
        raise ConfigError(f"unknown sequence kind {kind!r}")
    if spec.get("scale_by_a_n"):
        out = out * a_n
    return out


DOMAINS = ("frechet", "weibull", "gumbel")


@dataclass(frozen=True)
class DomainTag:
    family: str
    alpha: float = 1.0
    c: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if self.family not in DOMAINS:
            raise ConfigError(f"unknown domain {self.family!r}; known: {DOMAINS}")

    def to_dict(self) -> dict:
        return {"family": self.family, "alpha": self.alpha, "c": self.c, "d": self.d}


def extreme_value_normalization(base, domain: DomainTag | None, n: int) -> tuple[float, float]:
    """(a_n, b_n) of the base distribution for its domain of attraction."""
    if domain is None:
        return 1.0, 0.0
    q = base.ppf(1.0 - 1.0 / n)
    if domain.family == "frechet":
        return float(q), 0.0
    if domain.family == "weibull":
        return float(base.upper - q), 0.0
    b = float(q)
    return float(base.sf(b) / base.pdf(b)), b


@dataclass
class DiscreteModel:
    """
    Finite-horizon model X_i = c_i Z_i + d_i, Z_i i.i.d. from base.

    discounts and costs hold c_1..c_n and d_1..d_n.
    """
    n: int
    base: Any
    discounts: np.ndarray
    costs: np.ndarray
    domain: DomainTag | None = None
    a_n: float = 1.0
    b_n: float = 0.0
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.discounts = np.asarray(self.discounts, float)
        self.costs = np.asarray(self.costs, float)
        if self.n < 1:
            raise ConfigError("n must be positive")
        if self.discounts.shape != (self.n,) or self.costs.shape != (self.n,):
            raise ConfigError("discount and cost sequences must have length n")
        if np.any(self.discounts <= 0):
            raise ConfigError("discounts c_i must be positive")
        for name, seq in (("discounts", self.discounts), ("costs", self.costs)):
            step = np.diff(seq)
            if np.any(step > 0) and np.any(step < 0):
                raise ConfigError(f"{name} must be monotone")
        if self.domain is not None:
            if self.domain.family == "weibull" and self.base.upper != 0.0:
                raise ConfigError("weibull domain needs a base distribution with F(0) = 1")
            if self.domain.family == "frechet" and self.base.lower < 0.0:
                raise ConfigError("frechet domain needs a base distribution with F(0) = 0")

    @property
    def scale(self) -> float:
        """a-hat_n = c_n a_n."""
        return float(self.discounts[-1] * self.a_n)

    @property
    def shift(self) -> float:
        """b-hat_n: c_n b_n + d_n for gumbel, 0 otherwise."""
        if self.domain is not None and self.domain.family == "gumbel":
            return float(self.discounts[-1] * self.b_n + self.costs[-1])
        return 0.0

    def with_n(self, n: int) -> "DiscreteModel":
        spec = dict(self.spec, n=n)
        return discrete_from_spec(spec)

    def limit_intensity(self) -> IntensityModel:
        if self.domain is None:
            raise ConfigError("model has no domain tag, so no limit intensity")
        dom = self.domain
        if dom.family == "frechet":
            return frechet_intensity(dom.alpha, dom.c, dom.d)
        if dom.family == "weibull":
            return weibull_intensity(dom.alpha, dom.c, dom.d)
        return gumbel_intensity(dom.c, dom.d)

    def scaled(self, value: float) -> float:
        return (value - self.shift) / self.scale

    def to_dict(self) -> dict:
        return dict(self.spec)


def discrete_from_spec(spec: dict) -> DiscreteModel:
    spec = dict(spec)
    try:
        n = int(spec["n"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("discrete model needs an integer n") from exc
    base = make_base(spec.get("base", {}))
    domain = DomainTag(**spec["domain"]) if spec.get("domain") else None
    a_n, b_n = extreme_value_normalization(base, domain, n)
    norm = spec.get("normalization") or {}
    if norm and int(norm.get("n", n)) == n:
        a_n = float(norm.get("a_n", a_n))
        b_n = float(norm.get("b_n", b_n))
    if not a_n > 0:
        raise ConfigError(f"normalization a_n must be positive, got {a_n}")
    return DiscreteModel(
        n=n,
        base=base,
        discounts=sequence_values(spec.get("discounts"), n, a_n, default=1.0),
        costs=sequence_values(spec.get("costs"), n, a_n, default=0.0),
        domain=domain,
        a_n=a_n,
        b_n=b_n,
        spec=spec,
    )


def intensity_from_spec(spec: dict) -> IntensityModel:
    spec = dict(spec)
    family = spec.pop("family", None)
    try:
        if family == "gumbel":
            return gumbel_intensity(**spec)
        if family == "frechet":
            return frechet_intensity(**spec)
        if family == "weibull":
            return weibull_intensity(**spec)
        if family == "arrival":
            return ArrivalIntensity(spec.get("rate", 1.0), make_base(spec.get("base", {})))
        if family == "class":
            params = dict(spec.get("params", {}))
            tag = ClassTag(int(spec["case"]), make_H(spec["H"]), make_v(spec["v"]), params)
            return ClassIntensity(tag, {"family": "class", **spec})
    except TypeError as exc:
        raise ConfigError(f"bad parameters for intensity {family!r}: {exc}") from exc
    except KeyError as exc:
        raise ConfigError(f"intensity {family!r} is missing {exc}") from exc
    raise ConfigError(f"unknown intensity family {family!r}")


@dataclass
class ModelFile:
    """Parsed model file: a limit intensity, a finite-n model, or both."""
    name: str
    intensity: IntensityModel | None
    discrete: DiscreteModel | None
    document: dict

    @property
    def model_hash(self) -> str:
        return hash_content(canonical_json(self.document))

    def require_intensity(self) -> IntensityModel:
        if self.intensity is None:
            raise ConfigError(f"model {self.name!r} has no intensity or domain tag")
        return self.intensity

    def require_discrete(self) -> DiscreteModel:
        if self.discrete is None:
            raise ConfigError(f"model {self.name!r} has no discrete block")
        return self.discrete


def model_from_document(doc: dict, name: str = "model") -> ModelFile:
    if "intensity" not in doc and "discrete" not in doc:
        raise ConfigError("model file needs an 'intensity' or a 'discrete' block")
    discrete = discrete_from_spec(doc["discrete"]) if "discrete" in doc else None
    if "intensity" in doc:
        intensity = intensity_from_spec(doc["intensity"])
    elif discrete is not None and discrete.domain is not None:
        intensity = discrete.limit_intensity()
    else:
        intensity = None
    return ModelFile(doc.get("name", name), intensity, discrete, doc)


def load_model(path: str | Path) -> ModelFile:
    """Load a YAML/JSON model file."""
    path = Path(path)
    return model_from_document(load_document(path), name=path.stem)
