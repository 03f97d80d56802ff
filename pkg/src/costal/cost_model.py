"""Log-linear labeling-time model.

    ln t = alpha * ln B + beta * ln M + gamma

fitted by ordinary least squares in log space, where B is the predicted-mask
boundary length and M the connected-component count. Stacks with no
predicted foreground get a fixed ``floor_time``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core_data import ConfigError
from .heatmap_analysis import StackFeatures

DEFAULT_FLOOR_TIME = 60.0
MAX_CONDITION = 1e8


class FitError(ValueError):
    """The design matrix cannot support a fit."""


class NotFittedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeSample:
    B: float
    M: float
    t: float
    stack_id: str = ""

    def __post_init__(self):
        for name in ("B", "M", "t"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"sample {self.stack_id or '?'}: {name} must be finite and > 0, got {v}")


@dataclass
class CostModelParams:
    alpha: float = float("nan")
    beta: float = float("nan")
    gamma: float = float("nan")
    floor_time: float = DEFAULT_FLOOR_TIME
    r2: float = float("nan")
    r2_B: float = float("nan")
    r2_M: float = float("nan")
    sigma: float = float("nan")
    n: int = 0
    stderr: tuple[float, float, float] = (float("nan"),) * 3

    def __post_init__(self):
        if not self.floor_time > 0:
            raise ConfigError(f"floor_time must be > 0, got {self.floor_time}")

    @property
    def fitted(self) -> bool:
        return self.n >= 3 and all(math.isfinite(v) for v in (self.alpha, self.beta, self.gamma))

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "floor_time": self.floor_time,
            "r2": self.r2,
            "sigma": self.sigma,
            "n": self.n,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CostModelParams":
        return cls(
            alpha=float(data["alpha"]),
            beta=float(data["beta"]),
            gamma=float(data["gamma"]),
            floor_time=float(data.get("floor_time", DEFAULT_FLOOR_TIME)),
            r2=float(data.get("r2", float("nan"))),
            sigma=float(data.get("sigma", float("nan"))),
            n=int(data.get("n", 0)),
        )


def _design(samples: Sequence[TimeSample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([[math.log(s.B), math.log(s.M), 1.0] for s in samples])
    y = np.array([math.log(s.t) for s in samples])
    return X, y


def _solve_normal(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solve (X'X) b = X'y; returns (b, inverse of X'X).

    Conditioning is judged on the unit-diagonal (Jacobi-scaled) normal matrix
    so that feature units don't trigger false rejections.
    """
    A = X.T @ X
    d = np.sqrt(np.diag(A))
    if np.any(d == 0):
        raise FitError(_collinearity_message(X, math.inf))
    scaled = A / np.outer(d, d)
    cond = np.linalg.cond(scaled)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise FitError(_collinearity_message(X, cond))
    inv = np.linalg.inv(scaled) / np.outer(d, d)
    return inv @ (X.T @ y), inv


def _collinearity_message(X: np.ndarray, cond: float) -> str:
    logb, logm = X[:, 0], X[:, 1]
    if np.ptp(logb) == 0 and np.ptp(logm) == 0:
        what = "log B and log M are both constant (collinear with the intercept)"
    elif np.ptp(logb) == 0:
        what = "log B is constant (collinear with the intercept)"
    elif np.ptp(logm) == 0:
        what = "log M is constant (collinear with the intercept)"
    else:
        what = "log B and log M are affinely dependent"
    return f"rank-deficient design: {what}; condition estimate {cond:.3g}"


def _r2(y: np.ndarray, resid: np.ndarray) -> float:
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def _simple_r2(x: np.ndarray, y: np.ndarray) -> float:
    if np.ptp(x) == 0:
        return 0.0
    slope, intercept = np.polyfit(x, y, 1)
    return _r2(y, y - (slope * x + intercept))


def fit(samples: Sequence[TimeSample], floor_time: float = DEFAULT_FLOOR_TIME) -> CostModelParams:
    """OLS fit of log time on (log B, log M) with intercept."""
    samples = list(samples)
    if len(samples) < 3:
        raise FitError(f"need at least 3 samples, got {len(samples)}")
    X, y = _design(samples)
    coef, inv = _solve_normal(X, y)
    resid = y - X @ coef
    n = len(samples)
    dof = n - 3
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    se = tuple(float(math.sqrt(max(s2 * inv[i, i], 0.0))) for i in range(3))
    return CostModelParams(
        alpha=float(coef[0]),
        beta=float(coef[1]),
        gamma=float(coef[2]),
        floor_time=floor_time,
        r2=_r2(y, resid),
        r2_B=_simple_r2(X[:, 0], y),
        r2_M=_simple_r2(X[:, 1], y),
        sigma=math.sqrt(s2),
        n=n,
        stderr=se,
    )


def predict_time(params: CostModelParams, B: float, M: float) -> float:
    """Predicted labeling time in seconds; ``floor_time`` when B or M is zero."""
    if not params.fitted:
        raise NotFittedError("cost model has not been fitted")
    if B < 0 or M < 0:
        raise ValueError(f"features must be >= 0, got B={B}, M={M}")
    if B == 0 or M == 0:
        return params.floor_time
    return math.exp(params.alpha * math.log(B) + params.beta * math.log(M) + params.gamma)


def predict(params: CostModelParams, features: StackFeatures) -> float:
    return predict_time(params, features.boundary_length, features.component_count)


@dataclass
class DiagnosticsReport:
    r2: float
    r2_B: float
    r2_M: float
    sigma: float
    n: int
    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["stack_id", "B", "M", "t", "log_t", "fitted_log_t", "residual"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()


def diagnostics_report(params: CostModelParams, samples: Sequence[TimeSample]) -> DiagnosticsReport:
    """Log-space residuals, R^2 and residual spread of ``params`` on ``samples``."""
    samples = list(samples)
    if not samples:
        raise ValueError("diagnostics need at least one sample")
    if not params.fitted:
        raise NotFittedError("cost model has not been fitted")
    X, y = _design(samples)
    fitted = X @ np.array([params.alpha, params.beta, params.gamma])
    resid = y - fitted
    dof = max(len(samples) - 3, 1)
    rows = [
        {
            "stack_id": s.stack_id,
            "B": s.B,
            "M": s.M,
            "t": s.t,
            "log_t": float(y[i]),
            "fitted_log_t": float(fitted[i]),
            "residual": float(resid[i]),
        }
        for i, s in enumerate(samples)
    ]
    return DiagnosticsReport(
        r2=_r2(y, resid),
        r2_B=_simple_r2(X[:, 0], y),
        r2_M=_simple_r2(X[:, 1], y),
        sigma=math.sqrt(float(resid @ resid) / dof),
        n=len(samples),
        rows=rows,
    )
