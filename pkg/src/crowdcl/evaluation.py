"""Counting metrics: MAE, root-mean-square error (reported as "MSE"), GAME."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError

GAME_LEVELS = (0, 1, 2, 3)


def _check(estimates, truths):
    e = np.asarray(estimates, dtype=np.float64).ravel()
    g = np.asarray(truths, dtype=np.float64).ravel()
    if len(e) != len(g):
        raise ParameterError(f"length mismatch: {len(e)} estimates vs {len(g)} truths")
    if not len(e):
        raise ParameterError("need at least one estimate")
    return e, g


def mae(estimates, truths) -> float:
    e, g = _check(estimates, truths)
    return float(np.mean(np.abs(e - g)))


def mse(estimates, truths) -> float:
    """Root of the mean squared count error; the crowd-counting "MSE"."""
    e, g = _check(estimates, truths)
    return float(math.sqrt(np.mean((e - g) ** 2)))


def _bounds(n: int, parts: int) -> list[int]:
    return [(k * n) // parts for k in range(parts + 1)]


def game(pred_map, true_map, level: int) -> float:
    """Sum over a 2^L x 2^L grid of absolute regional count errors.

    Region boundaries are floor(k * H / 2^L), so grids of successive levels
    nest and uneven map sizes are still covered exactly.
    """
    p = np.asarray(getattr(pred_map, "values", pred_map), dtype=np.float64)
    t = np.asarray(getattr(true_map, "values", true_map), dtype=np.float64)
    if p.shape != t.shape:
        raise ParameterError(f"map shapes differ: {p.shape} vs {t.shape}")
    if not 0 <= level <= 3:
        raise ParameterError(f"GAME level must be 0..3, got {level}")
    parts = 2**level
    rows, cols = _bounds(p.shape[0], parts), _bounds(p.shape[1], parts)
    diff = p - t
    total = 0.0
    for r0, r1 in zip(rows, rows[1:]):
        for c0, c1 in zip(cols, cols[1:]):
            total += abs(diff[r0:r1, c0:c1].sum())
    return float(total)


@dataclass
class SampleResult:
    id: str
    true_count: float
    est_count: float
    game: dict = field(default_factory=dict)


@dataclass
class EvaluationReport:
    samples: list[SampleResult]
    mae: float
    mse: float
    game: dict  # level -> mean over samples

    @classmethod
    def from_samples(cls, samples: list[SampleResult]) -> "EvaluationReport":
        e = [s.est_count for s in samples]
        g = [s.true_count for s in samples]
        levels = sorted(set().union(*(s.game for s in samples))) if samples else []
        agg = {lv: float(np.mean([s.game[lv] for s in samples])) for lv in levels}
        return cls(samples, mae(e, g), mse(e, g), agg)

    def to_dict(self) -> dict:
        return {"n": len(self.samples), "mae": self.mae, "mse": self.mse,
                "game": {str(k): v for k, v in self.game.items()}}

    def save(self, csv_path, json_path) -> None:
        levels = sorted(self.game)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "true_count", "est_count"] + [f"game{lv}" for lv in levels])
            for s in self.samples:
                w.writerow([s.id, repr(s.true_count), repr(s.est_count)] + [repr(s.game[lv]) for lv in levels])
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, csv_path) -> "EvaluationReport":
        samples = []
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                g = {int(k[4:]): float(v) for k, v in row.items() if k.startswith("game")}
                samples.append(SampleResult(row["id"], float(row["true_count"]), float(row["est_count"]), g))
        return cls.from_samples(samples)


def evaluate(checkpoint, manifest, sigma: float = 4.0, factor: int | None = None,
             levels=GAME_LEVELS) -> EvaluationReport:
    """Per-sample counts and GAME for a model (or checkpoint) over a split.

    ``factor`` defaults to the model's output stride; ground-truth maps are
    generated at that resolution.
    """
    from .dataset import generate_density_map
    from .models import ModelCheckpoint, load_checkpoint, model_spec_of, predict_density

    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    model = checkpoint.build() if isinstance(checkpoint, ModelCheckpoint) else checkpoint
    factor = factor or model_spec_of(model).downsample_factor
    if not len(manifest):
        raise ParameterError("empty test split")

    rows = []
    for s in manifest:
        pred = predict_density(model, s.image).astype(np.float64)
        true = generate_density_map(s, sigma, factor).values
        rows.append(SampleResult(
            s.id, float(s.count), float(pred.sum()),
            {lv: game(pred, true, lv) for lv in levels},
        ))
    return EvaluationReport.from_samples(rows)
