import json
import math

import numpy as np
import pytest
from scipy import stats

from costal.cost_model import (
    CostModelParams,
    FitError,
    NotFittedError,
    TimeSample,
    diagnostics_report,
    fit,
    predict,
    predict_time,
)
from costal.heatmap_analysis import StackFeatures

TRUE = (0.8, 0.4, 2.0)


def generate(n, sigma, seed=0, params=TRUE):
    rng = np.random.default_rng(seed)
    B = np.exp(rng.uniform(np.log(5), np.log(5000), n))
    M = rng.integers(1, 30, n).astype(float)
    a, b, g = params
    t = np.exp(a * np.log(B) + b * np.log(M) + g + rng.normal(0, sigma, n))
    return [TimeSample(float(x), float(m), float(y), f"s{i}") for i, (x, m, y) in enumerate(zip(B, M, t))]


def test_noiseless_recovery():
    p = fit(generate(50, 0.0))
    assert (p.alpha, p.beta, p.gamma) == pytest.approx(TRUE, abs=1e-9)
    assert p.r2 == pytest.approx(1.0, abs=1e-12)
    s = generate(5, 0.0, seed=3)[2]
    assert predict_time(p, s.B, s.M) == pytest.approx(s.t, rel=1e-9)


def test_noisy_recovery_within_three_standard_errors():
    samples = generate(200, 0.3, seed=11)
    p = fit(samples)
    for est, true, se in zip((p.alpha, p.beta, p.gamma), TRUE, p.stderr):
        assert abs(est - true) <= 3 * se
    resid = [r["residual"] for r in diagnostics_report(p, samples).rows]
    assert abs(stats.skew(resid)) < 0.5


def test_stderr_matches_independent_ols():
    samples = generate(80, 0.2, seed=5)
    X = np.column_stack([np.log([s.B for s in samples]), np.log([s.M for s in samples]), np.ones(80)])
    y = np.log([s.t for s in samples])
    coef, res, *_ = np.linalg.lstsq(X, y, rcond=None)
    s2 = res[0] / (80 - 3)
    se = np.sqrt(np.diag(s2 * np.linalg.inv(X.T @ X)))
    p = fit(samples)
    assert (p.alpha, p.beta, p.gamma) == pytest.approx(tuple(coef), abs=1e-10)
    assert p.stderr == pytest.approx(tuple(se), rel=1e-8)


def test_degenerate_designs():
    same = [TimeSample(10, 2, 30)] * 5
    with pytest.raises(FitError, match="constant"):
        fit(same)
    collinear = [TimeSample(b, b ** 2, 5.0 * b) for b in (2.0, 3.0, 5.0, 7.0)]
    with pytest.raises(FitError, match="affinely dependent"):
        fit(collinear)
    with pytest.raises(FitError):
        fit(generate(2, 0.0))
    with pytest.raises(ValueError):
        TimeSample(0, 1, 1)
    with pytest.raises(ValueError):
        TimeSample(1, 1, -3)


def test_predict_rules():
    p = fit(generate(30, 0.1, seed=2), floor_time=45.0)
    assert predict_time(p, 1, 1) == pytest.approx(math.exp(p.gamma))
    assert predict(p, StackFeatures("z", 0.0, 0.0)) == 45.0
    with pytest.raises(NotFittedError):
        predict_time(CostModelParams(), 3, 1)
    if p.alpha > 0 and p.beta > 0:
        assert predict_time(p, 20, 3) < predict_time(p, 40, 3) < predict_time(p, 40, 4)


def test_scale_equivariance():
    samples = generate(60, 0.25, seed=8)
    base = fit(samples)
    c = 7.5
    t_scaled = fit([TimeSample(s.B, s.M, s.t * c) for s in samples])
    assert (t_scaled.alpha, t_scaled.beta) == pytest.approx((base.alpha, base.beta), abs=1e-9)
    assert t_scaled.gamma == pytest.approx(base.gamma + math.log(c), abs=1e-9)
    b_scaled = fit([TimeSample(s.B * c, s.M, s.t) for s in samples])
    assert (b_scaled.alpha, b_scaled.beta) == pytest.approx((base.alpha, base.beta), abs=1e-9)
    assert b_scaled.gamma == pytest.approx(base.gamma - base.alpha * math.log(c), abs=1e-9)


def test_diagnostics():
    samples = generate(40, 0.3, seed=4)
    p = fit(samples)
    rep = diagnostics_report(p, samples)
    resid = np.array([r["residual"] for r in rep.rows])
    assert abs(resid.sum()) < 1e-9
    y = np.log([s.t for s in samples])
    assert rep.r2 == pytest.approx(1 - (resid ** 2).sum() / ((y - y.mean()) ** 2).sum(), abs=1e-12)
    assert 0.0 <= rep.r2 <= 1.0 and rep.r2 == pytest.approx(p.r2)
    assert json.loads(rep.to_json())["n"] == 40
    assert rep.to_csv().splitlines()[0] == "stack_id,B,M,t,log_t,fitted_log_t,residual"


def test_params_json_round_trip():
    p = fit(generate(20, 0.1, seed=9))
    q = CostModelParams.from_json(json.loads(json.dumps(p.to_json())))
    assert set(p.to_json()) == {"alpha", "beta", "gamma", "floor_time", "r2", "sigma", "n"}
    assert predict_time(q, 17, 2) == predict_time(p, 17, 2)
