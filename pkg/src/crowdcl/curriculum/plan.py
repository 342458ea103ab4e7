"""Easy-first batch scheduling.

At step i the scheduler exposes the first g(i) ids of the scored order and
draws one batch uniformly from them, without replacement inside the batch
and with replacement across batches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CrowdCLError, ParameterError
from .pacing import PacingConfig, pace
from .scoring import ScoredDataset


@dataclass(frozen=True)
class CurriculumPlan:
    order: tuple[str, ...]          # scored order the prefixes index into
    positions: np.ndarray           # (M, batch_size) int positions into ``order``
    exposed_size_per_step: tuple[int, ...]
    seed: int
    config: PacingConfig

    @property
    def M(self) -> int:
        return len(self.exposed_size_per_step)

    @property
    def batches(self) -> list[list[str]]:
        return [[self.order[k] for k in row] for row in self.positions]

    def batch(self, i: int) -> list[str]:
        """Ids of B_i (1-based)."""
        return [self.order[k] for k in self.positions[i - 1]]

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "order": list(self.order),
            "g": list(self.exposed_size_per_step),
            "batches": self.batches,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "CurriculumPlan":
        order = tuple(d["order"])
        where = {sid: k for k, sid in enumerate(order)}
        positions = np.array([[where[s] for s in b] for b in d["batches"]], dtype=np.int64)
        return cls(order, positions, tuple(d["g"]), d["seed"], PacingConfig.from_dict(d["config"]))

    @classmethod
    def load(cls, path) -> "CurriculumPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_plan(scored: ScoredDataset, config: PacingConfig, seed: int = 0) -> CurriculumPlan:
    """One batch per step for steps 1..T."""
    if config.N is None:
        config = config.resolve(len(scored), config.T)
    if config.N != len(scored):
        raise ParameterError(f"pacing N={config.N} but scored dataset has {len(scored)} samples")
    if config.T is None:
        raise ParameterError("pacing config needs T")
    rng = np.random.default_rng(seed)
    sizes = []
    positions = np.empty((config.T, config.batch_size), dtype=np.int64)
    for i in range(1, config.T + 1):
        size = pace(config, i)
        if size < config.batch_size:
            raise CrowdCLError(f"internal: g({i})={size} smaller than batch {config.batch_size}")
        positions[i - 1] = rng.choice(size, config.batch_size, replace=False)
        sizes.append(size)
    positions.setflags(write=False)
    return CurriculumPlan(tuple(scored.sample_ids), positions, tuple(sizes), seed, config)
