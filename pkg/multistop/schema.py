"""
multistop - configuration schema, errors and hashing.

Engine options are plain dataclasses with to_dict/from_dict so that run
records can persist and reload them.
"""

from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Any, Literal
import hashlib
import json
import math
import os

import yaml


class MultistopError(Exception):
    """Base class for engine errors (CLI exit status 1)."""


class ConfigError(MultistopError):
    """Invalid model file or option (CLI exit status 2)."""


class DomainError(MultistopError):
    """Argument outside the domain of an evaluator."""


class QuadratureError(MultistopError):
    """Integral diverged or missed its tolerance."""

    def __init__(self, message: str, error_estimate: float = math.nan):
        super().__init__(f"{message} (achieved error estimate {error_estimate:.3g})")
        self.error_estimate = error_estimate


class SolverError(MultistopError):
    """ODE integration failed or produced curves violating monotonicity."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ClassConditionError(MultistopError):
    """Closed-form class hypotheses are not met."""

    def __init__(self, condition: str, detail: str = ""):
        super().__init__(f"class conditions unmet: {condition}" + (f" ({detail})" if detail else ""))
        self.condition = condition


SeedMode = Literal["asymptotic", "closed_form"]


@dataclass
class QuadSpec:
    """Quadrature settings for expectations in the DP recursion."""
    nodes: int = 64
    tolerance: float = 1e-9
    grid_size: int = 801
    tail_probability: float = 1e-8

    def __post_init__(self):
        if self.nodes < 2 or self.grid_size < 3:
            raise ConfigError("quadrature needs nodes >= 2 and grid_size >= 3")
        if self.tolerance <= 0 or not 0 < self.tail_probability < 0.5:
            raise ConfigError("quadrature tolerance and tail probability must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QuadSpec":
        return cls(**_known(cls, d))


@dataclass
class SolveSpec:
    """
    Settings for the ODE engine.

    x_grid=None lets the model pick its default guarantee grid.
    """
    uniform_points: int = 201
    refined_points: int = 120
    epsilon: float = 1e-8
    atol: float = 1e-10
    rtol: float = 1e-10
    x_grid: tuple[float, ...] | None = None
    tail_threshold: float = 1e-14
    seed_mode: SeedMode = "asymptotic"
    gauss_nodes: int = 8
    seed_sensitivity: bool = False
    t_floor: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0 or self.epsilon >= 0.5:
            raise ConfigError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        if self.atol <= 0 or self.rtol <= 0:
            raise ConfigError("solver tolerances must be positive")
        if self.seed_mode not in ("asymptotic", "closed_form"):
            raise ConfigError(f"unknown seed mode {self.seed_mode!r}")
        if self.x_grid is not None:
            self.x_grid = tuple(float(x) for x in self.x_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.x_grid is not None:
            d["x_grid"] = list(self.x_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SolveSpec":
        return cls(**_known(cls, d))


@dataclass
class RunConfig:
    """
    One CLI invocation, as recorded in the run log.

    options holds the subcommand flags after parsing.
    """
    subcommand: str
    model_path: str | None = None
    options: dict[str, Any] = field(default_factory=dict)
    solve: SolveSpec = field(default_factory=SolveSpec)
    quad: QuadSpec = field(default_factory=QuadSpec)
    out: str | None = None
    output_format: Literal["csv", "json"] = "csv"
    seed: int = 0
    threads: int = 1
    verbose: bool = False

    def __post_init__(self):
        if self.model_path is not None and not Path(self.model_path).exists():
            raise ConfigError(f"model file not found: {self.model_path}")
        if self.threads < 1:
            raise ConfigError("--threads must be positive")
        if self.output_format not in ("csv", "json"):
            raise ConfigError(f"unknown format {self.output_format!r}")

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "model_path": self.model_path,
            "options": dict(self.options),
            "solve": self.solve.to_dict(),
            "quad": self.quad.to_dict(),
            "out": self.out,
            "output_format": self.output_format,
            "seed": self.seed,
            "threads": self.threads,
            "verbose": self.verbose,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            subcommand=d["subcommand"],
            model_path=d.get("model_path"),
            options=dict(d.get("options", {})),
            solve=SolveSpec.from_dict(d.get("solve", {})),
            quad=QuadSpec.from_dict(d.get("quad", {})),
            out=d.get("out"),
            output_format=d.get("output_format", "csv"),
            seed=int(d.get("seed", 0)),
            threads=int(d.get("threads", 1)),
            verbose=bool(d.get("verbose", False)),
        )

    def config_hash(self) -> str:
        """Hash of everything that determines the artifacts (threads and output path excluded)."""
        d = self.to_dict()
        d.pop("threads")
        d.pop("out")
        d.pop("verbose")
        if self.model_path:
            d["model_content"] = hash_content(Path(self.model_path).read_bytes())
        return hash_content(canonical_json(d))


def _known(cls, d: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(d)


def canonical_json(obj: Any) -> str:
    """Deterministic JSON text (sorted keys, no whitespace variance)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def hash_content(content: str | bytes) -> str:
    """SHA256 hash of content."""
    if isinstance(content, str):
        content = content.encode()
    return f"sha256:{hashlib.sha256(content).hexdigest()[:16]}"


def load_document(path: str | Path) -> dict:
    """Read a YAML or JSON file into a dict."""
    path = Path(path)
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at top level")
    return data


def resolve_seed(seed: int | None) -> int:
    """Explicit seed, else MULTISTOP_SEED, else 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get("MULTISTOP_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"MULTISTOP_SEED is not an integer: {env!r}") from exc


EVENT_TYPES = ("config", "solve", "diagnostic", "artifact")


@dataclass
class Event:
    """One entry of a run record."""
    type: str
    timestamp: str
    payload: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.type not in EVENT_TYPES:
            raise ConfigError(f"unknown event type {self.type!r}")

    def to_dict(self) -> dict:
        return {"type": self.type, "timestamp": self.timestamp, "payload": self.payload}

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        return cls(type=d["type"], timestamp=d["timestamp"], payload=dict(d.get("payload", {})))


@dataclass
class RunRecord:
    """
    Append-only record of one CLI run.

    Holds the config and its hash, the seed and the events; artifacts are
    referenced by path and content hash so a replay can compare them.
    """
    run_id: str
    config: RunConfig
    config_hash: str
    seed: int
    events: list[Event] = field(default_factory=list)

    def append(self, event: Event) -> None:
        self.events.append(event)

    @property
    def artifacts(self) -> dict[str, str]:
        return {e.payload["path"]: e.payload["hash"] for e in self.events if e.type == "artifact"}

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "seed": self.seed,
            "events": [e.to_dict() for e in self.events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            run_id=d["run_id"],
            config=RunConfig.from_dict(d["config"]),
            config_hash=d["config_hash"],
            seed=int(d["seed"]),
            events=[Event.from_dict(e) for e in d.get("events", [])],
        )
