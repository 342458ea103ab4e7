import math

import numpy as np
import pytest

from crowdcl.curriculum import PacingConfig, pace
from crowdcl.dataset import synthesize_dataset
from crowdcl.errors import ConfigError, TrainingError
from crowdcl.models import ModelSpec
from crowdcl.training import PlateauSchedule, TrainConfig, TrainTrace, split_validation, train

SMALL = ModelSpec("multi_column", channels=0.5)


def test_plateau_rule():
    s = PlateauSchedule(1e-2, patience=2, factor=0.5, min_lr=1e-6)
    lrs = [s.step(m) for m in (10, 10, 10)]
    assert lrs == [1e-2, 1e-2, 5e-3]


def test_plateau_floor_and_monotone():
    s = PlateauSchedule(1e-2, patience=1, factor=0.1, min_lr=1e-5)
    lrs = [s.step(5.0) for _ in range(10)]
    assert min(lrs) == 1e-5
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_plateau_resets_on_improvement():
    s = PlateauSchedule(1.0, patience=2, factor=0.5)
    assert [s.step(m) for m in (5, 6, 4, 6, 6)] == [1.0, 1.0, 1.0, 1.0, 0.5]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mode="sideways")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_initial=0)
    cfg = TrainConfig(mode="curriculum", batch_size=4)
    assert cfg.pacing.batch_size == 4
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_validation_split_by_hash():
    m = synthesize_dataset(50, (1, 3), (8, 8), seed=0)
    tr, val = split_validation(m, 0.1)
    assert len(val) == 5 and len(tr) == 45
    tr2, val2 = split_validation(m, 0.1)
    assert [s.id for s in val] == [s.id for s in val2]
    assert split_validation(m, 0.0)[1] is None


def test_one_epoch_step_arithmetic(tiny_train, tiny_test):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=0)
    _, trace = train(tiny_train, SMALL, cfg, val_manifest=tiny_test)
    assert len(trace.steps) == 4
    assert [r[1] for r in trace.steps] == [4, 8, 12, 16]
    assert len(trace.epochs) == 1


def test_reproducible(tiny_train):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=1)
    c1, t1 = train(tiny_train, SMALL, cfg)
    c2, t2 = train(tiny_train, SMALL, cfg)
    assert t1.records_equal(t2)
    assert c1.to_bytes() == c2.to_bytes()


def test_degenerate_curriculum_equals_standard(tiny_train, tiny_test):
    std = TrainConfig(mode="standard", epochs=2, batch_size=4, seed=3)
    cur = TrainConfig(mode="curriculum", scorer="random", pacing=PacingConfig("linear", b=1.0, a=1.0),
                      epochs=2, batch_size=4, seed=3)
    _, ts = train(tiny_train, SMALL, std, val_manifest=tiny_test)
    _, tc = train(tiny_train, SMALL, cur, val_manifest=tiny_test)
    assert ts.records_equal(tc)


def test_curriculum_exposure_audit(tiny_train, tmp_path):
    from crowdcl.curriculum import CurriculumPlan

    cfg = TrainConfig(mode="curriculum", pacing=PacingConfig("quadratic", b=0.5, a=0.5),
                      epochs=3, batch_size=4, seed=0, val_fraction=0)
    _, trace = train(tiny_train, SMALL, cfg, out_dir=tmp_path)
    plan = CurriculumPlan.load(tmp_path / "plan.json")
    counts = {s.id: s.count for s in tiny_train}
    assert [counts[i] for i in plan.order] == sorted(counts[i] for i in plan.order)
    for i, batch in enumerate(trace.batch_ids, start=1):
        assert set(batch) <= set(plan.order[: pace(plan.config, i)])
    assert trace.meta["scorer"] == "count"


def test_anti_curriculum_exposes_hardest_first(tiny_train):
    cfg = TrainConfig(mode="anti_curriculum", pacing=PacingConfig("step", b=0.5, a=0.9),
                      epochs=2, batch_size=4, seed=0, val_fraction=0)
    _, trace = train(tiny_train, SMALL, cfg)
    counts = sorted((s.count for s in tiny_train), reverse=True)
    first = {c for b in trace.batch_ids[:2] for c in b}
    by_id = {s.id: s.count for s in tiny_train}
    assert min(by_id[i] for i in first) >= counts[7]


def test_lr_non_increasing_and_floor(tiny_train):
    from crowdcl.training import PlateauConfig

    cfg = TrainConfig(epochs=6, batch_size=4, plateau=PlateauConfig(patience=1, factor=0.1, min_lr=1e-4))
    _, trace = train(tiny_train, SMALL, cfg)
    lrs = [e[3] for e in trace.epochs]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= 1e-4


def test_size_mismatch(tiny_train):
    cfg = TrainConfig(mode="curriculum", pacing=PacingConfig("linear", N=99, b=0.5), batch_size=4,
                      val_fraction=0)
    with pytest.raises(ConfigError):
        train(tiny_train, SMALL, cfg)


def test_non_finite_loss_aborts_with_trace(tiny_train):
    cfg = TrainConfig(epochs=3, batch_size=4, lr_initial=1e30, seed=0, val_fraction=0)
    with pytest.raises(TrainingError) as err:
        train(tiny_train, SMALL, cfg)
    trace = err.value.trace
    assert isinstance(trace, TrainTrace)
    assert "non-finite" in str(err.value)
    assert all(math.isfinite(r[2]) for r in trace.steps)


def test_trace_csv_roundtrip(tiny_train, tmp_path):
    _, trace = train(tiny_train, SMALL, TrainConfig(epochs=2, batch_size=4), out_dir=tmp_path)
    back = TrainTrace.load(tmp_path)
    assert back.steps == trace.steps
    for a, b in zip(back.epochs, trace.epochs):
        assert a == b


@pytest.mark.slow
def test_toy_run_descends():
    m = synthesize_dataset(200, (5, 50), (64, 64), seed=0)
    cfg = TrainConfig(epochs=30, seed=0, lr_initial=1e-3)
    _, trace = train(m, ModelSpec("multi_column"), cfg)
    losses = trace.losses()
    per_epoch = losses.reshape(30, -1).mean(axis=1)
    assert np.isfinite(losses).all()
    assert per_epoch[-1] < per_epoch[0]
