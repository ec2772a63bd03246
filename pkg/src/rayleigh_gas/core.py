"""Domain types, parameters and the reproducible randomness contract."""

from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence, TypeVar

import numpy as np

try:
    import tomllib  # type: ignore[import-not-found]
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

_MASK64 = (1 << 64) - 1

T = TypeVar("T")


class ValidationError(ValueError):
    """A parameter invariant is violated; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


class Mark(enum.IntEnum):
    # integer values follow z_i: 0 annihilating, 1 elastic
    ANNIHILATING = 0
    ELASTIC = 1


@dataclass(frozen=True)
class LocalizationPolicy:
    """How the obstacle field is restricted to a bounded region.

    ``mode`` is ``"fixed"`` (one ball of radius ``radius``) or ``"adaptive"``
    (start at ``radius`` and multiply by ``growth`` until the miss certificate
    passes).  ``radius=None`` lets the engine pick it from the speed cutoff.
    """

    mode: str = "fixed"
    radius: float | None = None
    growth: float = 1.5
    speed_cutoff_quantile: float = 1.0 - 1e-6
    miss_tolerance: float = 1e-2
    margin: float = 0.5
    max_growth_steps: int = 6


@dataclass(frozen=True)
class SimParams:
    epsilon: float
    mu: float
    beta: float
    alpha: float
    t_max: float
    seed: int = 0
    n_trials: int = 1000
    localization: LocalizationPolicy = field(default_factory=LocalizationPolicy)

    @property
    def mu_eps(self) -> float:
        """Obstacle intensity in the Boltzmann-Grad scaling, mu / epsilon**2."""
        return self.mu / self.epsilon**2

    def with_(self, **changes: Any) -> "SimParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimParams":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(sorted(unknown)[0], f"unknown field {sorted(unknown)[0]!r}")
        loc = data.pop("localization", None)
        if isinstance(loc, dict):
            loc_known = set(LocalizationPolicy.__dataclass_fields__)
            bad = set(loc) - loc_known
            if bad:
                name = sorted(bad)[0]
                raise ValidationError(f"localization.{name}", f"unknown field 'localization.{name}'")
            data["localization"] = LocalizationPolicy(**loc)
        missing = [f for f in ("epsilon", "mu", "beta", "alpha", "t_max") if f not in data]
        if missing:
            raise ValidationError(missing[0], f"missing field {missing[0]!r}")
        for name in ("epsilon", "mu", "beta", "alpha", "t_max"):
            try:
                data[name] = float(data[name])
            except (TypeError, ValueError):
                raise ValidationError(name, f"{name} must be a number") from None
        for name in ("seed", "n_trials"):
            if name in data:
                value = data[name]
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ValidationError(name, f"{name} must be an integer")
        return cls(**data)


def validate(params: SimParams) -> SimParams:
    """Return ``params`` unchanged if every invariant holds, else raise
    :class:`ValidationError` for the first violation."""
    p = params
    if not (p.epsilon > 0 and math.isfinite(p.epsilon)):
        raise ValidationError("epsilon", "epsilon must be positive")
    if not (p.mu > 0 and math.isfinite(p.mu)):
        raise ValidationError("mu", "mu must be positive")
    if not (p.beta > 0 and math.isfinite(p.beta)):
        raise ValidationError("beta", "beta must be positive")
    if not (0.0 <= p.alpha <= 1.0):
        raise ValidationError("alpha", "alpha out of [0,1]")
    if not (p.t_max >= 0 and math.isfinite(p.t_max)):
        raise ValidationError("t_max", "t_max must be non-negative")
    if not (0 <= p.seed <= _MASK64):
        raise ValidationError("seed", "seed must be a 64-bit unsigned integer")
    if p.n_trials < 1:
        raise ValidationError("n_trials", "n_trials must be positive")
    loc = p.localization
    if loc.mode not in ("fixed", "adaptive"):
        raise ValidationError("localization.mode", "localization.mode must be 'fixed' or 'adaptive'")
    if loc.radius is not None and not loc.radius > p.epsilon:
        raise ValidationError("localization.radius", "localization.radius must exceed epsilon")
    if not 0.0 < loc.speed_cutoff_quantile < 1.0:
        raise ValidationError(
            "localization.speed_cutoff_quantile", "speed_cutoff_quantile out of (0,1)"
        )
    if not 0.0 < loc.miss_tolerance < 1.0:
        raise ValidationError("localization.miss_tolerance", "miss_tolerance out of (0,1)")
    if not loc.growth > 1.0:
        raise ValidationError("localization.growth", "localization.growth must exceed 1")
    if loc.margin < 0:
        raise ValidationError("localization.margin", "localization.margin must be non-negative")
    return params


def load_params(path: str | Path) -> SimParams:
    """Read SimParams from a ``.json`` or ``.toml`` file (not validated)."""
    data = load_config(path)
    return SimParams.from_dict({k: v for k, v in data.items() if k != "run"})


def load_config(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ValidationError("config", f"malformed config {path}: {exc}") from exc


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot encode {value!r} as TOML")


def dump_params(params: SimParams, path: str | Path) -> None:
    path = Path(path)
    data = params.to_dict()
    if path.suffix.lower() == ".toml":
        loc = data.pop("localization")
        lines = [f"{k} = {_toml_value(v)}" for k, v in data.items()]
        lines.append("")
        lines.append("[localization]")
        lines += [f"{k} = {_toml_value(v)}" for k, v in loc.items() if v is not None]
        path.write_text("\n".join(lines) + "\n")
    else:
        path.write_text(json.dumps(data, indent=2) + "\n")


# -- tagged particle state -------------------------------------------------


@dataclass(frozen=True)
class Alive:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.array(self.x, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.array(self.v, dtype=float).reshape(3))
        self.x.setflags(write=False)
        self.v.setflags(write=False)

    def __eq__(self, other):
        return (
            isinstance(other, Alive)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.v, other.v)
        )

    def __hash__(self):
        return hash((self.x.tobytes(), self.v.tobytes()))


class Annihilated:
    """The absorbing annihilated state.  There is exactly one instance."""

    _instance: "Annihilated | None" = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ANNIHILATED"

    def __reduce__(self):
        return (Annihilated, ())


ANNIHILATED = Annihilated()

TaggedState = Alive | Annihilated


def state_distance(a: TaggedState, b: TaggedState) -> float:
    """Phase-space distance extended so the annihilated state is infinitely
    far from every alive point."""
    a_dead = a is ANNIHILATED
    b_dead = b is ANNIHILATED
    if a_dead and b_dead:
        return 0.0
    if a_dead or b_dead:
        return math.inf
    return float(np.sqrt(np.sum((a.x - b.x) ** 2) + np.sum((a.v - b.v) ** 2)))


@dataclass(frozen=True)
class Obstacle:
    id: int
    center: np.ndarray
    velocity: np.ndarray
    mark: Mark
    born_at: float = 0.0

    def position(self, t: float) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.velocity) * (t - self.born_at)


# -- randomness --------------------------------------------------------------


class Purpose(enum.IntEnum):
    """Named sub-streams; each occupies its own range of stream ids."""

    GENERIC = 0
    MICRO = 1
    LIMIT = 2
    LIMIT_ALPHA0 = 3
    FIELD = 4
    FIELD_SHELL = 5
    SERIES = 6
    PSI = 7
    DIFFUSION = 8
    HYDRO = 9
    KERNELS = 10
    SWEEP = 11
    SPLIT = 12


def stream_id(purpose: int, index: int = 0) -> int:
    """Pack a purpose code and an index (< 2**48) into one 64-bit stream id."""
    if not 0 <= index < (1 << 48):
        raise ValueError("stream index out of range")
    return (int(purpose) << 48) | int(index)


def derive_stream(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``.

    Philox is keyed with the two 64-bit words directly, so distinct keys give
    distinct, non-overlapping streams and the output never depends on which
    thread draws it.
    """
    key = np.array([int(seed) & _MASK64, int(stream) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sub_seed(seed: int, cell: int) -> int:
    """Deterministic 64-bit child seed for sweep cell ``cell``."""
    rng = derive_stream(seed, stream_id(Purpose.SWEEP, cell))
    return int(rng.integers(0, 2**63, dtype=np.int64))


# -- chunked execution -------------------------------------------------------

CHUNK = 2048


def chunk_bounds(n: int, chunk: int = CHUNK) -> list[tuple[int, int, int]]:
    """Split ``range(n)`` into ``(chunk_index, start, stop)`` blocks of fixed size."""
    return [(k, s, min(s + chunk, n)) for k, s in enumerate(range(0, n, chunk))]


def run_chunked(
    fn: Callable[[int, int, int], T],
    n: int,
    threads: int = 1,
    chunk: int = CHUNK,
) -> list[T]:
    """Apply ``fn(chunk_index, start, stop)`` to every block and return the
    results in block order.  Block boundaries do not depend on ``threads``."""
    blocks = chunk_bounds(n, chunk)
    if threads <= 1 or len(blocks) <= 1:
        return [fn(*b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda b: fn(*b), blocks))


def concat(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts) if parts else np.empty(0)


@dataclass(frozen=True)
class InitialLaw:
    """Law of the tagged particle's starting point.

    Positions are Gaussian around the origin with per-axis standard deviation
    ``position_sd`` (0 puts every start at the origin).  Velocities are
    Maxwellian at inverse temperature ``beta`` (the run's beta when None)
    unless ``velocity`` fixes them.
    """

    position_sd: float = 0.0
    velocity: tuple[float, float, float] | None = None
    beta: float | None = None

    def sample(self, rng: np.random.Generator, n: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
        if self.position_sd > 0:
            x = rng.standard_normal((n, 3)) * self.position_sd
        else:
            x = np.zeros((n, 3))
        if self.velocity is not None:
            v = np.tile(np.asarray(self.velocity, dtype=float), (n, 1))
        else:
            b = beta if self.beta is None else self.beta
            v = rng.standard_normal((n, 3)) / np.sqrt(b)
        return x, v
