import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdcl.curriculum import SHAPES, PacingConfig, pace, schedule, shape_fraction
from crowdcl.errors import ParameterError

from oracles import pacing_oracle

FIG2 = dict(N=400, b=0.2, a=0.4, T=1000)  # N=400, batch 8 from the pacing figure


@pytest.mark.parametrize(
    "shape, expected",
    [("linear", 240), ("quadratic", 160), ("exponential", 83), ("log", 378)],
)
def test_mid_ramp_values(shape, expected):
    assert pacing_oracle(shape, t=200, **FIG2) == expected
    assert pace(PacingConfig(shape, **FIG2), 200) == expected


@pytest.mark.parametrize("shape", SHAPES)
def test_start_and_end(shape):
    cfg = PacingConfig(shape, **FIG2)
    assert pace(cfg, 400) == 400
    assert pace(cfg, 1000) == 400
    assert pace(cfg, 1) >= 80


def test_linear_start_near_bN():
    # t -> 0+: the first step is within one ramp increment of ceil(b*N)
    cfg = PacingConfig("linear", **FIG2)
    assert cfg.start_size == 80
    assert pace(cfg, 1) == 81


def test_step_staircase():
    cfg = PacingConfig("step", K=4, **FIG2)
    assert [pace(cfg, t) for t in (1, 99, 100, 199, 200, 300, 400)] == [80, 80, 160, 160, 240, 320, 400]


def test_out_of_range_step():
    cfg = PacingConfig("linear", **FIG2)
    for t in (0, 1001):
        with pytest.raises(ParameterError):
            pace(cfg, t)


def test_first_subset_must_fill_batch():
    with pytest.raises(ParameterError):
        PacingConfig("linear", N=30, b=0.2, a=0.5, T=10, batch_size=8)


@pytest.mark.parametrize("bad", [dict(a=0), dict(a=1.5), dict(b=0), dict(b=1.2), dict(T=0), dict(shape="cubic")])
def test_invalid_config(bad):
    kw = dict(FIG2, shape="linear") | bad
    with pytest.raises(ParameterError):
        PacingConfig(**kw)


def test_unresolved_config():
    with pytest.raises(ParameterError):
        pace(PacingConfig("linear"), 1)
    assert pace(PacingConfig("linear").resolve(400, 1000), 200) == 240


def test_shape_fraction_endpoints():
    for s in SHAPES:
        assert shape_fraction(s, 1.0) == pytest.approx(1.0, abs=1e-5)
        assert shape_fraction(s, 0.0) == pytest.approx(0.0, abs=1e-9)


configs = st.builds(
    dict,
    shape=st.sampled_from(SHAPES),
    N=st.integers(8, 2000),
    b=st.floats(0.01, 1.0),
    a=st.floats(0.01, 1.0),
    T=st.integers(1, 3000),
    K=st.integers(1, 10),
).filter(lambda c: math.ceil(c["N"] * c["b"] - 1e-9) >= 8)


@settings(max_examples=200, deadline=None)
@given(configs, st.data())
def test_matches_oracle_and_bounds(c, data):
    cfg = PacingConfig(**c)
    t = data.draw(st.integers(1, c["T"]))
    g = pace(cfg, t)
    assert g == pacing_oracle(c["shape"], c["N"], c["b"], c["a"], c["T"], t, c["K"])
    assert cfg.start_size <= g <= c["N"]
    if t >= c["a"] * c["T"]:
        assert g == c["N"]


@settings(max_examples=60, deadline=None)
@given(configs)
def test_monotone(c):
    c["T"] = min(c["T"], 600)
    gs = schedule(PacingConfig(**c))
    assert all(x <= y for x, y in zip(gs, gs[1:]))
