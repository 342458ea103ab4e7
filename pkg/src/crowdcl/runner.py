"""Experiment matrix execution, results tables and convergence curves.

Each cell (dataset x model x arm x seed) runs in its own directory
``<out>/runs/<run_id>/`` holding::

    config.json        cell config with every default materialized
    resolved_config.json  the same after N, T and the validation split are fixed
    plan.json          the batch schedule that was trained on
    trace_steps.csv    step, samples_seen, loss
    trace_epochs.csv   epoch, val_mae, val_mse, lr
    model.ckpt         kept checkpoint
    report.csv/json    test-split evaluation
    result.json        written last; its presence marks the cell complete
"""

from __future__ import annotations

import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from ._util import stable_hash
from .curriculum import SHAPES, PacingConfig
from .dataset import load_dataset, synthesize_dataset
from .errors import ConfigError, MissingRunError
from .evaluation import evaluate
from .models import ModelSpec
from .training import TrainConfig, TrainTrace, train

log = logging.getLogger(__name__)

# column order of the published comparison tables
TABLE_COLUMNS = ("Standard", "Linear", "Log", "Quadratic", "Exponential", "Step", "Root")


@dataclass(frozen=True)
class Arm:
    mode: str = "standard"
    shape: str | None = None
    a: float = 0.4
    b: float = 0.2
    K: int = 4
    label: str | None = None

    def __post_init__(self):
        if self.mode not in ("standard", "curriculum", "anti_curriculum"):
            raise ConfigError(f"unknown arm mode {self.mode!r}")
        if self.mode != "standard" and self.shape not in SHAPES:
            raise ConfigError(f"curriculum arm needs a shape in {SHAPES}, got {self.shape!r}")
        if self.label is None:
            if self.mode == "standard":
                label = "Standard"
            else:
                label = self.shape.capitalize()
                if self.mode == "anti_curriculum":
                    label = "Anti-" + label
            object.__setattr__(self, "label", label)

    def pacing(self) -> PacingConfig | None:
        if self.mode == "standard":
            return None
        return PacingConfig(self.shape, b=self.b, a=self.a, K=self.K)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.mode == "standard":
            d.update(shape=None, a=None, b=None, K=None)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Arm":
        d = {k: v for k, v in d.items() if v is not None}
        return cls(**d)


def default_arms(a: float = 0.4, b: float = 0.2, K: int = 4) -> list[Arm]:
    """Standard training plus the six pacing shapes."""
    return [Arm()] + [Arm("curriculum", s, a, b, K) for s in ("linear", "log", "quadratic", "exponential", "step", "root")]


@dataclass
class ExperimentMatrix:
    datasets: list[dict]
    models: list[dict]           # {"name": ..., plus ModelSpec fields}
    arms: list[Arm]
    seeds: list[int] = field(default_factory=lambda: [0])
    train: dict = field(default_factory=dict)  # TrainConfig overrides shared by all cells

    def __post_init__(self):
        for m in self.models:
            if "name" not in m:
                raise ConfigError("every model entry needs a name")
            self.model_spec(m)
        for d in self.datasets:
            if "name" not in d or d.get("kind") not in ("synthetic", "directory"):
                raise ConfigError(f"dataset entries need a name and kind synthetic|directory: {d}")
        labels = [a.label for a in self.arms]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"arm labels must be unique: {labels}")
        self.train_config(Arm(), 0)

    @staticmethod
    def model_spec(entry: dict) -> ModelSpec:
        try:
            return ModelSpec.from_dict({k: v for k, v in entry.items() if k != "name"})
        except TypeError as exc:
            raise ConfigError(f"bad model entry {entry}: {exc}") from None

    def train_config(self, arm: Arm, seed: int) -> TrainConfig:
        d = dict(self.train)
        d.update(mode=arm.mode, seed=seed)
        pacing = arm.pacing()
        if pacing is not None:
            d["pacing"] = pacing
        return TrainConfig.from_dict(d)

    def cells(self) -> list[dict]:
        out = []
        for ds in self.datasets:
            for m in self.models:
                spec = self.model_spec(m)
                for arm in self.arms:
                    for seed in self.seeds:
                        cell = {
                            "dataset": ds,
                            "model": {"name": m["name"], "spec": spec.to_dict()},
                            "arm": arm.to_dict(),
                            "seed": seed,
                            "train": self.train_config(arm, seed).to_dict(),
                        }
                        cell["run_id"] = stable_hash(cell)
                        out.append(cell)
        return out

    def to_dict(self) -> dict:
        return {"datasets": self.datasets, "models": self.models, "arms": [a.to_dict() for a in self.arms],
                "seeds": self.seeds, "train": self.train}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentMatrix":
        try:
            arms = d.get("arms", "default")
            if arms == "default":
                arms = default_arms()
            else:
                arms = [Arm.from_dict(a) for a in arms]
            return cls(d["datasets"], d["models"], arms, list(d.get("seeds", [0])), dict(d.get("train", {})))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad experiment matrix: {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentMatrix":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read matrix config {path}: {exc}") from None


def reference_matrix() -> ExperimentMatrix:
    """The full published grid (8 models x 7 arms x 2 datasets); needs real data and plug-in models."""
    return ExperimentMatrix.from_dict(json.loads(_data_file("reference_matrix.json")))


def desk_matrix() -> ExperimentMatrix:
    """Reduced grid: 2 toy models x 7 arms x 1 synthetic dataset."""
    return ExperimentMatrix.from_dict(json.loads(_data_file("desk_matrix.json")))


def _data_file(name: str) -> str:
    return resources.files("crowdcl").joinpath("data", name).read_text()


_DATASET_CACHE: dict = {}


def materialize(ds: dict):
    """(train manifest, test manifest) for a dataset entry."""
    key = stable_hash(ds)
    if key not in _DATASET_CACHE:
        if ds["kind"] == "synthetic":
            size = tuple(ds.get("image_size", (64, 64)))
            rng = tuple(ds.get("count_range", (5, 50)))
            seed = ds.get("seed", 0)
            tr = synthesize_dataset(ds.get("n_train", 200), rng, size, seed, "train", f"{ds['name']}-train")
            te = synthesize_dataset(ds.get("n_test", 50), rng, size, seed + 1, "test", f"{ds['name']}-test")
        else:
            size = tuple(ds["image_size"]) if ds.get("image_size") else None
            tr = load_dataset(ds["root"], ds.get("train", "train"), size)
            te = load_dataset(ds["root"], ds.get("test", "test"), size)
        _DATASET_CACHE.clear()
        _DATASET_CACHE[key] = (tr, te)
    return _DATASET_CACHE[key]


def run_cell(cell: dict, output_dir) -> dict:
    """Train and evaluate one cell; never raises (failures land in error.json)."""
    run_dir = Path(output_dir) / "runs" / cell["run_id"]
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cell, indent=1, sort_keys=True))
    (run_dir / "error.json").unlink(missing_ok=True)
    try:
        import torch

        torch.set_num_threads(1)
        train_set, test_set = materialize(cell["dataset"])
        spec = ModelSpec.from_dict(cell["model"]["spec"])
        cfg = TrainConfig.from_dict(cell["train"])
        ckpt, trace = train(train_set, spec, cfg, out_dir=run_dir)
        ckpt.save(run_dir / "model.ckpt")
        report = evaluate(ckpt, test_set, cfg.sigma)
        report.save(run_dir / "report.csv", run_dir / "report.json")
        result = {
            "run_id": cell["run_id"], "status": "ok",
            "dataset": cell["dataset"]["name"], "model": cell["model"]["name"],
            "arm": cell["arm"]["label"], "seed": cell["seed"],
            "scorer": trace.meta["scorer"], "mae": report.mae, "mse": report.mse,
            "game": {str(k): v for k, v in report.game.items()},
            "samples_seen": trace.samples_seen, "steps": len(trace.steps),
            "best_epoch": ckpt.training_meta["epoch"], "wall_time": trace.wall_time,
        }
        (run_dir / "result.json").write_text(json.dumps(result, indent=1))
        return result
    except Exception as exc:  # one bad cell must not stop the matrix
        err = {"run_id": cell["run_id"], "status": "failed", "error": f"{type(exc).__name__}: {exc}",
               "traceback": traceback.format_exc()}
        (run_dir / "error.json").write_text(json.dumps(err, indent=1))
        log.error("cell %s failed: %s", cell["run_id"], err["error"])
        return err


def run_matrix(matrix: ExperimentMatrix, output_dir, parallelism: int = 1) -> dict:
    """Run every incomplete cell; completed cells (result.json present) are skipped."""
    out = Path(output_dir)
    try:
        (out / "runs").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output dir {out} not writable: {exc}") from None
    (out / "matrix.json").write_text(json.dumps(matrix.to_dict(), indent=1))
    cells = matrix.cells()
    todo = [c for c in cells if not (out / "runs" / c["run_id"] / "result.json").is_file()]
    results = []
    if parallelism > 1 and len(todo) > 1:
        with ProcessPoolExecutor(parallelism, mp_context=get_context("spawn")) as pool:
            results = list(pool.map(run_cell, todo, [out] * len(todo)))
    else:
        results = [run_cell(c, out) for c in todo]
    failed = [r["run_id"] for r in results if r["status"] != "ok"]
    return {
        "cells": len(cells), "run_ids": [c["run_id"] for c in cells],
        "skipped": len(cells) - len(todo), "trained": len(todo) - len(failed), "failed": failed,
    }


# ----------------------------------------------------------------- tables


@dataclass
class TableCell:
    mae: float
    mse: float
    mae_sd: float = 0.0
    mse_sd: float = 0.0
    n: int = 1


@dataclass
class ResultsTable:
    title: str
    columns: list[str]
    rows: list[str]
    cells: dict  # (row, column) -> TableCell

    def minima(self, row: str, metric: str) -> set[str]:
        """Columns holding the row minimum of ``metric`` ("mae" or "mse"); ties all flagged."""
        vals = {c: getattr(self.cells[(row, c)], metric) for c in self.columns if (row, c) in self.cells}
        if not vals:
            return set()
        best = min(vals.values())
        return {c for c, v in vals.items() if v == best}

    def is_min(self, row: str, column: str, metric: str) -> bool:
        return column in self.minima(row, metric)

    def _fmt(self, row, col, metric, bold):
        cell = self.cells.get((row, col))
        if cell is None:
            return "-"
        v = getattr(cell, metric)
        sd = getattr(cell, metric + "_sd")
        s = f"{v:.1f}" if cell.n == 1 else f"{v:.2f}±{sd:.2f}"
        if self.is_min(row, col, metric):
            s = bold(s)
        return s

    def to_markdown(self) -> str:
        head = "| Model | " + " | ".join(f"{c} MAE | {c} MSE" for c in self.columns) + " |"
        sep = "|---" * (1 + 2 * len(self.columns)) + "|"
        lines = [f"**{self.title}**", "", head, sep]
        for r in self.rows:
            vals = []
            for c in self.columns:
                vals += [self._fmt(r, c, "mae", lambda s: f"**{s}**"), self._fmt(r, c, "mse", lambda s: f"**{s}**")]
            lines.append(f"| {r} | " + " | ".join(vals) + " |")
        return "\n".join(lines)

    def to_text(self) -> str:
        """Plain-text layout; minima are marked with '*'."""
        width = 14
        lines = [self.title, "Model".ljust(12) + "".join(c.center(width) for c in self.columns)]
        lines.append(" " * 12 + "".join("MAE / MSE".center(width) for _ in self.columns))
        for r in self.rows:
            line = r.ljust(12)
            for c in self.columns:
                a = self._fmt(r, c, "mae", lambda s: s + "*")
                m = self._fmt(r, c, "mse", lambda s: s + "*")
                line += f"{a}/{m}".center(width)
            lines.append(line)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "title": self.title, "columns": self.columns,
            "rows": [{"model": r, "cells": {c: asdict(self.cells[(r, c)]) for c in self.columns if (r, c) in self.cells},
                      "min_mae": sorted(self.minima(r, "mae")), "min_mse": sorted(self.minima(r, "mse"))}
                     for r in self.rows],
        }


def _column_order(labels) -> list[str]:
    known = [c for c in TABLE_COLUMNS if c in labels]
    return known + sorted(set(labels) - set(known))


def load_results(output_dir) -> list[dict]:
    runs = Path(output_dir) / "runs"
    out = []
    for p in sorted(runs.glob("*/result.json")) if runs.is_dir() else []:
        out.append(json.loads(p.read_text()))
    return out


def render_table(output_dir, dataset: str | None = None) -> ResultsTable:
    """Aggregate completed runs into one model x arm table (mean over seeds)."""
    results = load_results(output_dir)
    if not results:
        raise MissingRunError(f"no completed runs under {output_dir}")
    names = sorted({r["dataset"] for r in results})
    if dataset is None:
        if len(names) > 1:
            raise ConfigError(f"several datasets in {output_dir}; pick one of {names}")
        dataset = names[0]
    results = [r for r in results if r["dataset"] == dataset]
    if not results:
        raise MissingRunError(f"no completed runs for dataset {dataset!r}")

    rows, columns, groups = [], [], {}
    for r in results:
        if r["model"] not in rows:
            rows.append(r["model"])
        columns.append(r["arm"])
        groups.setdefault((r["model"], r["arm"]), []).append((r["mae"], r["mse"]))
    matrix_file = Path(output_dir) / "matrix.json"
    if matrix_file.is_file():
        order = [m["name"] for m in json.loads(matrix_file.read_text())["models"]]
        rows.sort(key=lambda m: order.index(m) if m in order else len(order))
    cells = {}
    for key, vals in groups.items():
        arr = np.array(vals)
        sd = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(2)
        cells[key] = TableCell(float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(sd[0]), float(sd[1]), len(arr))
    return ResultsTable(dataset, _column_order(set(columns)), rows, cells)


def reference_table(part: str = "B") -> ResultsTable:
    """Published numbers for ShanghaiTech Part ``part`` ("A" or "B"), display only."""
    doc = json.loads(_data_file("reference_tables.json"))
    try:
        table = doc["tables"][part.upper()]
    except KeyError:
        raise ConfigError(f"reference part must be A or B, got {part!r}") from None
    cells = {}
    for row in table["rows"]:
        for col, (m, s) in row["cells"].items():
            cells[(row["model"], col)] = TableCell(m, s)
    return ResultsTable(table["title"] + " (published)", list(doc["columns"]), [r["model"] for r in table["rows"]], cells)


# ------------------------------------------------------------ convergence


def trailing_mean(values, window: int) -> np.ndarray:
    """Mean of the last ``window`` values at each position (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def samples_to_reach(trace: TrainTrace, target: float, window: int) -> int | None:
    """Samples seen when the trailing-window training loss first drops to ``target``.

    Only full windows count, so a single lucky batch does not qualify.
    """
    sm = trailing_mean(trace.losses(), window)
    for k in range(window - 1, len(sm)):
        if sm[k] <= target:
            return trace.steps[k][1]
    return None


def convergence_ab(standard: TrainTrace, curriculum: TrainTrace, window: int) -> dict:
    """Does the curriculum arm reach standard's final loss within standard's sample budget?"""
    target = float(trailing_mean(standard.losses(), window)[-1])
    reach = samples_to_reach(curriculum, target, window)
    budget = standard.samples_seen
    return {"target_loss": target, "curriculum_samples": reach, "standard_samples": budget,
            "passed": reach is not None and reach <= budget}


def exposed_epoch_ends(samples_seen, exposed) -> list[int]:
    """Samples-seen values at which each pass over the *exposed* data completes.

    A pass ends once the samples drawn since the previous boundary cover the
    exposed subset size in effect at that step.
    """
    ends, since, prev = [], 0, 0
    for seen, g in zip(samples_seen, exposed):
        since += seen - prev
        prev = seen
        if since >= g:
            ends.append(seen)
            since = 0
    return ends


def _load_run_trace(output_dir, run_id) -> tuple[TrainTrace, dict]:
    run_dir = Path(output_dir) / "runs" / run_id
    if not (run_dir / "trace_steps.csv").is_file():
        raise MissingRunError(f"no trace for run {run_id} under {output_dir}")
    trace = TrainTrace.load(run_dir)
    plan_file = run_dir / "plan.json"
    if plan_file.is_file():
        trace.exposed = json.loads(plan_file.read_text())["g"][: len(trace.steps)]
    cfg = json.loads((run_dir / "config.json").read_text()) if (run_dir / "config.json").is_file() else {}
    return trace, cfg


def render_convergence(output_dir, pair, out_dir=None, window: int | None = None) -> dict:
    """Loss vs. samples seen for a (standard, curriculum) pair of runs.

    Writes ``convergence.csv`` (one row per recorded step of each run) and
    ``convergence.png`` into ``out_dir`` (default: ``<output_dir>/curves``).
    """
    import csv

    std_id, cur_id = pair
    (std, _), (cur, _) = _load_run_trace(output_dir, std_id), _load_run_trace(output_dir, cur_id)
    if window is None:
        # one epoch of standard training
        window = max(1, len(std.steps) // max(1, len(std.epochs)))
    out = Path(out_dir) if out_dir is not None else Path(output_dir) / "curves"
    out.mkdir(parents=True, exist_ok=True)

    arms = [("standard", std_id, std), ("curriculum", cur_id, cur)]
    csv_path = out / "convergence.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "run_id", "step", "samples_seen", "loss", "smoothed_loss"])
        for arm, rid, tr in arms:
            sm = trailing_mean(tr.losses(), window)
            for (step, seen, loss), s in zip(tr.steps, sm):
                w.writerow([arm, rid, step, seen, repr(loss), repr(float(s))])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for arm, rid, tr in arms:
        seen = [r[1] for r in tr.steps]
        ax.plot(seen, trailing_mean(tr.losses(), window), label=f"{arm} ({rid})")
    ax.set_xlabel("samples seen")
    ax.set_ylabel("training loss (MSE, trailing mean)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    png_path = out / "convergence.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)

    summary = convergence_ab(std, cur, window)
    summary.update(
        csv=str(csv_path), png=str(png_path), window=window, rows=len(std.steps) + len(cur.steps),
        standard_first_epoch=(exposed_epoch_ends([r[1] for r in std.steps], std.exposed) or [None])[0],
        curriculum_first_epoch=(exposed_epoch_ends([r[1] for r in cur.steps], cur.exposed) or [None])[0],
    )
    return summary
