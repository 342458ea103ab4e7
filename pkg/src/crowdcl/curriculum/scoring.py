"""Difficulty scoring: turn a dataset into an easy-first (or hard-first) order."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InterfaceError, ParameterError, ScoringError

ORDERS = ("curriculum", "anti_curriculum", "random")
SCORERS = ("count", "self_taught", "transfer", "random")


@dataclass(frozen=True)
class ScoredDataset:
    """Sample ids in presentation order with their difficulty scores.

    ``scores[k]`` belongs to ``sample_ids[k]``. ``scorer`` records which
    scoring function produced the values.
    """

    sample_ids: tuple[str, ...]
    scores: tuple[float, ...]
    order: str = "curriculum"
    scorer: str = "count"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ParameterError(f"unknown order {self.order!r}")
        if len(self.sample_ids) != len(self.scores):
            raise ParameterError("sample_ids and scores differ in length")
        if not self.sample_ids:
            raise ParameterError("empty scored dataset")
        if not all(math.isfinite(s) for s in self.scores):
            raise ScoringError("non-finite difficulty score")

    def __len__(self):
        return len(self.sample_ids)

    @property
    def N(self) -> int:
        return len(self.sample_ids)

    def score_of(self) -> dict[str, float]:
        return dict(zip(self.sample_ids, self.scores))

    def with_order(self, order: str, seed: int = 0) -> "ScoredDataset":
        return order_scores(self.score_of(), order, scorer=self.scorer, seed=seed, meta=self.meta)

    def to_json(self) -> str:
        return json.dumps([{"id": i, "score": s} for i, s in zip(self.sample_ids, self.scores)], indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path, order: str = "curriculum", scorer: str = "count") -> "ScoredDataset":
        """Read an exported list; the stored sequence is kept as-is."""
        rows = json.loads(Path(path).read_text())
        return cls(tuple(r["id"] for r in rows), tuple(float(r["score"]) for r in rows), order, scorer)


def order_scores(scores: dict[str, float], order: str = "curriculum", *, scorer: str = "count",
                 seed: int = 0, meta: dict | None = None) -> ScoredDataset:
    """Sort ids by (score, id); anti-curriculum is the exact reversal.

    ``random`` ignores the scores and applies a seeded permutation to the
    id-sorted list.
    """
    if order not in ORDERS:
        raise ParameterError(f"unknown order {order!r}")
    ids = sorted(scores, key=lambda i: (scores[i], i))
    if order == "anti_curriculum":
        ids.reverse()
    elif order == "random":
        base = sorted(scores)
        ids = [base[k] for k in np.random.default_rng(seed).permutation(len(base))]
    return ScoredDataset(tuple(ids), tuple(float(scores[i]) for i in ids), order, scorer, dict(meta or {}))


def score_by_count(manifest, order: str = "curriculum") -> ScoredDataset:
    """Difficulty = number of annotated heads."""
    if not len(manifest):
        raise ParameterError("manifest is empty")
    return order_scores({s.id: float(s.count) for s in manifest}, order, scorer="count")


def score_random(manifest, seed: int = 0) -> ScoredDataset:
    """Uniformly shuffled order (what standard training samples from)."""
    return order_scores({s.id: 0.0 for s in manifest}, "random", scorer="random", seed=seed)


def per_sample_losses(model, manifest, sigma: float, batch_size: int = 32) -> dict[str, float]:
    """Sum of squared per-cell density errors for each sample."""
    import torch

    from ..dataset import density_stack, image_stack
    from ..models import model_spec_of

    spec = model_spec_of(model)
    images = image_stack(manifest, spec.downsample_factor)
    if images.shape[1] != spec.in_channels:
        raise InterfaceError(f"model expects {spec.in_channels} channels, images have {images.shape[1]}")
    targets = density_stack(manifest, sigma, spec.downsample_factor)
    model.eval()
    out = {}
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start:start + batch_size])
            pred = model(x)[:, 0].double().numpy()
            tgt = targets[start:start + batch_size].astype(np.float64)
            if pred.shape != tgt.shape:
                raise InterfaceError(f"model output {pred.shape[1:]} does not match target {tgt.shape[1:]}")
            for k, loss in enumerate(((pred - tgt) ** 2).sum(axis=(1, 2))):
                out[manifest.samples[start + k].id] = float(loss)
    bad = [i for i, v in out.items() if not math.isfinite(v)]
    if bad:
        raise ScoringError(f"non-finite loss for {len(bad)} sample(s), first {bad[0]}")
    return out


def score_transfer(manifest, pretrained, sigma: float = 4.0, order: str = "curriculum") -> ScoredDataset:
    """Score each sample by a pretrained model's loss on it.

    ``pretrained`` is a ModelCheckpoint, a checkpoint path, or a built model.
    """
    from ..models import ModelCheckpoint, load_checkpoint

    if isinstance(pretrained, (str, Path)):
        pretrained = load_checkpoint(pretrained)
    model = pretrained.build() if isinstance(pretrained, ModelCheckpoint) else pretrained
    losses = per_sample_losses(model, manifest, sigma)
    return order_scores(losses, order, scorer="transfer")


def pretrain_scorer(manifest, model_spec, pretrain_epochs: int, seed: int = 0, sigma: float = 4.0, **train_kw):
    """Train a fresh model with uniform sampling; returns its final checkpoint."""
    from ..training import TrainConfig, train
    from ..errors import TrainingError

    if pretrain_epochs < 1:
        raise ParameterError("pretrain_epochs must be >= 1")
    cfg = TrainConfig(mode="standard", epochs=pretrain_epochs, seed=seed, sigma=sigma,
                      keep="last", **train_kw)
    try:
        ckpt, _ = train(manifest, model_spec, cfg)
    except TrainingError as exc:
        raise ScoringError(f"self-taught pretraining diverged: {exc}") from exc
    return ckpt


def score_self_taught(manifest, model_spec, pretrain_epochs: int, seed: int = 0, sigma: float = 4.0,
                      order: str = "curriculum", **train_kw) -> ScoredDataset:
    """Pretrain on uniformly sampled batches, then score by per-sample loss."""
    ckpt = pretrain_scorer(manifest, model_spec, pretrain_epochs, seed, sigma, **train_kw)
    scored = score_transfer(manifest, ckpt, sigma, order)
    return ScoredDataset(scored.sample_ids, scored.scores, scored.order, "self_taught",
                         {"pretrain_epochs": pretrain_epochs, "seed": seed})


def score_dataset(manifest, scorer: str = "count", order: str = "curriculum", *, seed: int = 0,
                  model_spec=None, checkpoint=None, pretrain_epochs: int = 5, sigma: float = 4.0) -> ScoredDataset:
    """Dispatch to one of the scorers by name."""
    if scorer == "count":
        return score_by_count(manifest).with_order(order, seed)
    if scorer == "random":
        return score_random(manifest, seed)
    if scorer == "transfer":
        if checkpoint is None:
            raise ParameterError("transfer scoring needs a checkpoint")
        return score_transfer(manifest, checkpoint, sigma, order)
    if scorer == "self_taught":
        if model_spec is None:
            raise ParameterError("self-taught scoring needs a model spec")
        return score_self_taught(manifest, model_spec, pretrain_epochs, seed, sigma, order)
    raise ParameterError(f"unknown scorer {scorer!r}; expected one of {SCORERS}")
