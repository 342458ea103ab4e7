"""Pacing functions: training step -> size of the exposed easy-first prefix.

Every shape is evaluated as

    g(t) = clamp(ceil(N*b + N*(1-b)*phi(u)), ceil(N*b), N),   u = min(t / (a*T), 1)

so exposure starts at a fraction ``b`` of the data and reaches the full set
once a fraction ``a`` of the ``T`` steps has elapsed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

from ..errors import ParameterError

SHAPES = ("linear", "quadratic", "root", "exponential", "log", "step")

# ceil() ignores float noise below this, so N*b == 80.00000000000001 counts as 80
CEIL_SLACK = 1e-9

_E10 = math.exp(10.0)
_EM10 = math.exp(-10.0)


def _snap_ceil(x: float) -> int:
    return math.ceil(x - CEIL_SLACK)


def shape_fraction(shape: str, u: float, K: int = 4) -> float:
    """phi(u) for u in [0, 1]; 0 at the start of the ramp, 1 at its end."""
    if shape == "linear":
        return u
    if shape == "quadratic":
        return u * u
    if shape == "root":
        return math.sqrt(u)
    if shape == "exponential":
        return (math.exp(10.0 * u) - 1.0) / (_E10 - 1.0)
    if shape == "log":
        return min(max(1.0 + 0.1 * math.log(u + _EM10), 0.0), 1.0)
    if shape == "step":
        return math.floor(u * K) / K
    raise ParameterError(f"unknown pacing shape {shape!r}; expected one of {SHAPES}")


@dataclass(frozen=True)
class PacingConfig:
    """Parameters of one pacing schedule.

    ``N`` and ``T`` may be left as None and filled in later with
    :meth:`resolve` (the trainer does this from the training-set size and
    epoch count).
    """

    shape: str = "linear"
    N: int | None = None
    b: float = 0.2
    a: float = 0.4
    T: int | None = None
    K: int = 4
    batch_size: int = 8

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ParameterError(f"unknown pacing shape {self.shape!r}; expected one of {SHAPES}")
        if not 0 < self.a <= 1:
            raise ParameterError(f"a must lie in (0, 1], got {self.a}")
        if not 0 < self.b <= 1:
            raise ParameterError(f"b must lie in (0, 1], got {self.b}")
        if self.K < 1:
            raise ParameterError(f"K must be a positive integer, got {self.K}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be positive, got {self.batch_size}")
        if self.T is not None and self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")
        if self.N is not None:
            if self.N < 1:
                raise ParameterError(f"N must be positive, got {self.N}")
            if self.start_size < self.batch_size:
                raise ParameterError(
                    f"first subset ceil(b*N) = {self.start_size} cannot fill a batch of {self.batch_size}"
                )

    @property
    def resolved(self) -> bool:
        return self.N is not None and self.T is not None

    @property
    def start_size(self) -> int:
        return _snap_ceil(self.N * self.b)

    @property
    def ramp_steps(self) -> float:
        return self.a * self.T

    def resolve(self, N: int, T: int) -> "PacingConfig":
        return replace(self, N=N, T=T)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PacingConfig":
        return cls(**{k: d[k] for k in ("shape", "N", "b", "a", "T", "K", "batch_size") if k in d})


def pace(config: PacingConfig, t: int) -> int:
    """Size of the exposed prefix at step ``t`` (1-based)."""
    if not config.resolved:
        raise ParameterError("pacing config needs N and T before it can be evaluated")
    if not 1 <= t <= config.T:
        raise ParameterError(f"step {t} outside 1..{config.T}")
    N, b = config.N, config.b
    u = min(t / (config.a * config.T), 1.0)
    raw = N * b + N * (1.0 - b) * shape_fraction(config.shape, u, config.K)
    return min(max(_snap_ceil(raw), config.start_size), N)


def schedule(config: PacingConfig) -> list[int]:
    """g(1), ..., g(T)."""
    return [pace(config, t) for t in range(1, config.T + 1)]
