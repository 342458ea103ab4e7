"""Standard and curriculum training loops.

Every mode runs through the same scheduler: standard training is a
curriculum over a seeded random order whose pacing exposes the full set at
every step, so a curriculum run with g == N over the same random order
reproduces the standard run exactly.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ._util import id_hash, stable_hash
from .curriculum import PacingConfig, build_plan, score_dataset, score_random
from .dataset import DatasetManifest, density_stack, image_stack
from .errors import ConfigError, ParameterError, TrainingError
from .evaluation import mae, mse
from .models import ModelCheckpoint, ModelSpec, build_model

log = logging.getLogger(__name__)

MODES = ("standard", "curriculum", "anti_curriculum")


@dataclass(frozen=True)
class PlateauConfig:
    metric: str = "val_mae"  # or "train_mae"
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.metric not in ("val_mae", "train_mae"):
            raise ConfigError(f"plateau metric must be val_mae or train_mae, got {self.metric!r}")
        if not 0 < self.factor < 1:
            raise ConfigError(f"plateau factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ConfigError("plateau patience must be >= 1")


class PlateauSchedule:
    """Multiply the lr by ``factor`` after ``patience`` epochs without a new best.

    The counter resets after each reduction; the lr never drops below
    ``min_lr``.
    """

    def __init__(self, lr: float, patience: int, factor: float, min_lr: float = 0.0):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "standard"
    pacing: PacingConfig | None = None
    scorer: str = "count"
    scorer_checkpoint: str | None = None
    scorer_pretrain_epochs: int = 5
    epochs: int = 30
    batch_size: int = 8
    lr_initial: float = 1e-2
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    val_fraction: float = 0.1
    sigma: float = 4.0
    seed: int = 0
    keep: str = "best"  # "best" (lowest plateau metric) or "last"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr_initial > 0:
            raise ConfigError("lr_initial must be positive")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if self.keep not in ("best", "last"):
            raise ConfigError("keep must be 'best' or 'last'")
        if self.mode != "standard" and self.pacing is None:
            object.__setattr__(self, "pacing", PacingConfig(batch_size=self.batch_size))
        if self.pacing is not None and self.pacing.batch_size != self.batch_size:
            object.__setattr__(self, "pacing", replace(self.pacing, batch_size=self.batch_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pacing"] = self.pacing.to_dict() if self.pacing else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("pacing") is not None and not isinstance(d["pacing"], PacingConfig):
            d["pacing"] = PacingConfig.from_dict(d["pacing"])
        if isinstance(d.get("plateau"), dict):
            d["plateau"] = PlateauConfig(**d["plateau"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class TrainTrace:
    steps: list = field(default_factory=list)    # (step, samples_seen, loss)
    epochs: list = field(default_factory=list)   # (epoch, val_mae, val_mse, lr)
    batch_ids: list = field(default_factory=list)
    exposed: list = field(default_factory=list)  # g(i) per step
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    def records_equal(self, other: "TrainTrace") -> bool:
        return self.steps == other.steps and self.epochs == other.epochs and self.batch_ids == other.batch_ids

    @property
    def samples_seen(self) -> int:
        return self.steps[-1][1] if self.steps else 0

    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.steps], dtype=np.float64)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        with open(out / "trace_steps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "samples_seen", "loss"])
            w.writerows([(s, n, repr(l)) for s, n, l in self.steps])
        with open(out / "trace_epochs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_mae", "val_mse", "lr"])
            w.writerows([(e, repr(a), repr(m), repr(lr)) for e, a, m, lr in self.epochs])

    @classmethod
    def load(cls, out_dir) -> "TrainTrace":
        out = Path(out_dir)
        with open(out / "trace_steps.csv", newline="") as fh:
            steps = [(int(r["step"]), int(r["samples_seen"]), float(r["loss"])) for r in csv.DictReader(fh)]
        with open(out / "trace_epochs.csv", newline="") as fh:
            epochs = [(int(r["epoch"]), float(r["val_mae"]), float(r["val_mse"]), float(r["lr"]))
                      for r in csv.DictReader(fh)]
        return cls(steps=steps, epochs=epochs)


def split_validation(manifest: DatasetManifest, fraction: float):
    """Hold out round(fraction * N) samples chosen by id hash (at least one when fraction > 0)."""
    if fraction <= 0:
        return manifest, None
    ranked = sorted(manifest.samples, key=lambda s: (id_hash(s.id), s.id))
    n_val = min(max(1, round(fraction * len(ranked))), len(ranked) - 1)
    if n_val < 1:
        return manifest, None
    val_ids = {s.id for s in ranked[:n_val]}
    train_samples = [s for s in manifest.samples if s.id not in val_ids]
    val_samples = [s for s in manifest.samples if s.id in val_ids]
    return (DatasetManifest(manifest.name, manifest.split, train_samples),
            DatasetManifest(manifest.name + "-val", manifest.split, val_samples))


def resolve_pacing(config: TrainConfig, n_train: int) -> PacingConfig:
    """Fill in N and T (T = epochs * ceil(N / batch_size)) and check consistency."""
    T = config.epochs * math.ceil(n_train / config.batch_size)
    if config.mode == "standard":
        return PacingConfig("linear", n_train, 1.0, 1.0, T, batch_size=config.batch_size)
    p = config.pacing
    if p.N is not None and p.N != n_train:
        raise ConfigError(f"pacing N={p.N} does not match the {n_train} training samples")
    if p.T is not None and p.T != T:
        raise ConfigError(f"pacing T={p.T} does not match epochs*steps_per_epoch={T}")
    try:
        return p.resolve(n_train, T)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def order_for(config: TrainConfig, train_set: DatasetManifest, spec: ModelSpec, scored=None):
    if scored is not None:
        return scored
    if config.mode == "standard":
        return score_random(train_set, config.seed)
    return score_dataset(
        train_set, config.scorer, config.mode, seed=config.seed, model_spec=spec,
        checkpoint=config.scorer_checkpoint, pretrain_epochs=config.scorer_pretrain_epochs, sigma=config.sigma,
    )


def _counts(model, images: torch.Tensor, batch: int = 64) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for k in range(0, len(images), batch):
            out.append(model(images[k:k + batch]).sum(dim=(1, 2, 3)).double().numpy())
    model.train()
    return np.concatenate(out)


def config_hash(manifest_name: str, spec: ModelSpec, config: TrainConfig) -> str:
    return stable_hash({"data": manifest_name, "spec": spec.to_dict(), "config": config.to_dict()})


def train(manifest: DatasetManifest, spec: ModelSpec, config: TrainConfig, *, val_manifest=None,
          scored=None, out_dir=None) -> tuple[ModelCheckpoint, TrainTrace]:
    """Train one model; returns the kept checkpoint and the full trace.

    ``scored`` overrides the order the config's scorer would produce. With
    ``out_dir`` the trace CSVs are rewritten after every epoch and the plan
    is exported as ``plan.json``.
    """
    t0 = time.perf_counter()
    if val_manifest is None:
        train_set, val_set = split_validation(manifest, config.val_fraction)
    else:
        train_set, val_set = manifest, val_manifest
    pacing = resolve_pacing(config, len(train_set))
    scored = order_for(config, train_set, spec, scored)
    if set(scored.sample_ids) != {s.id for s in train_set}:
        raise ConfigError("scored dataset ids do not match the training samples")
    plan = build_plan(scored, pacing, seed=config.seed)
    if out_dir is not None:
        resolved = config.to_dict()
        resolved["pacing"] = pacing.to_dict()
        resolved["n_train"] = len(train_set)
        resolved["val_ids"] = [s.id for s in val_set] if val_set is not None else []
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "resolved_config.json").write_text(json.dumps(resolved, indent=1))

    stride = spec.downsample_factor
    lookup = train_set.by_id()
    ordered = DatasetManifest(train_set.name, train_set.split, [lookup[i] for i in scored.sample_ids])
    images = torch.from_numpy(image_stack(ordered, stride))
    targets = torch.from_numpy(density_stack(ordered, config.sigma, stride))[:, None]
    true_counts = np.array([s.count for s in ordered], dtype=np.float64)
    if val_set is not None:
        val_images = torch.from_numpy(image_stack(val_set, stride))
        val_counts = np.array([s.count for s in val_set], dtype=np.float64)

    model = build_model(spec, config.seed)
    with torch.no_grad():
        probe = model(images[:1])
    if probe.shape[-2:] != targets.shape[-2:]:
        raise ConfigError(f"model output {tuple(probe.shape[-2:])} vs target {tuple(targets.shape[-2:])}")
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr_initial)
    sched = PlateauSchedule(config.lr_initial, config.plateau.patience, config.plateau.factor, config.plateau.min_lr)

    trace = TrainTrace(meta={
        "mode": config.mode, "scorer": scored.scorer, "order": scored.order,
        "pacing": pacing.to_dict(), "n_train": len(train_set),
        "n_val": 0 if val_set is None else len(val_set),
    })
    trace.exposed = list(plan.exposed_size_per_step)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        plan.save(out / "plan.json")

    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    best_metric, best_state, best_epoch = math.inf, None, 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        for _ in range(steps_per_epoch):
            step += 1
            idx = torch.from_numpy(plan.positions[step - 1].copy())
            pred = model(images[idx])
            loss = torch.mean((pred - targets[idx]) ** 2)
            value = float(loss.item())
            if not math.isfinite(value):
                trace.wall_time = time.perf_counter() - t0
                if out is not None:
                    trace.save(out)
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})", trace)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            trace.steps.append((step, step * config.batch_size, value))
            trace.batch_ids.append(plan.batch(step))

        if val_set is not None:
            est = _counts(model, val_images)
            val_mae, val_mse = mae(est, val_counts), mse(est, val_counts)
        else:
            val_mae = val_mse = math.nan
        if config.plateau.metric == "val_mae" and val_set is not None:
            metric = val_mae
        else:
            metric = mae(_counts(model, images), true_counts)
        lr = sched.step(metric)
        for group in opt.param_groups:
            group["lr"] = lr
        trace.epochs.append((epoch, val_mae, val_mse, lr))
        if config.keep == "best" and metric < best_metric:
            best_metric, best_epoch = metric, epoch
            best_state = copy.deepcopy(model.state_dict())
        if out is not None:
            trace.save(out)
        log.debug("epoch %d loss %.3g val_mae %.3f lr %.2g", epoch, trace.steps[-1][2], val_mae, lr)

    if config.keep == "last" or best_state is None:
        best_epoch = config.epochs
    else:
        model.load_state_dict(best_state)
    trace.wall_time = time.perf_counter() - t0
    meta = {"config_hash": config_hash(manifest.name, spec, config), "seed": config.seed, "epoch": best_epoch}
    return ModelCheckpoint.from_model(model, meta), trace
