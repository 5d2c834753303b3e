"""Regression machinery and the spike / market-condition analyses built on it."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, special

from .features import zscore
from .marketdata import StockMeta, TradingDay

P_ZERO_T = 40.0
MIN_DIFF_SAMPLE = 10
MIN_PERF_ROWS = 30
FEATURE_NAMES = ("x1", "x2", "x3", "x4", "x5")


class RegressionError(ValueError):
    pass


def t_pvalue(t, dof: float) -> np.ndarray:
    """Two-sided p-value of Student-t statistics via the regularized incomplete beta.

    ``|t| > 40`` is reported as exactly 0.
    """
    t = np.asarray(t, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = special.betainc(dof / 2.0, 0.5, dof / (dof + t * t))
    p = np.where(np.isinf(t) | (np.abs(t) > P_ZERO_T), 0.0, p)
    return np.where(np.isnan(t), np.nan, p)


def f_pvalue(f: float, df_num: float, df_den: float) -> float:
    if not np.isfinite(f):
        return 0.0 if f > 0 else float("nan")
    return float(special.betainc(df_den / 2.0, df_num / 2.0, df_den / (df_den + df_num * f)))


@dataclass
class OLSResult:
    names: list[str]
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r2: float
    f_stat: float
    f_pvalue: float
    n: int
    dof: int
    intercept: bool
    residuals: np.ndarray = field(repr=False)

    def __getitem__(self, name: str) -> dict[str, float]:
        i = self.names.index(name)
        return {"coefficient": float(self.coef[i]), "std_error": float(self.se[i]),
                "t_stat": float(self.t[i]), "p_value": float(self.p[i])}

    def to_dict(self) -> dict:
        return {
            "rows": [{"variable": n, **self[n]} for n in self.names],
            "r2": self.r2, "f_stat": self.f_stat, "f_pvalue": self.f_pvalue,
            "n": self.n, "dof": self.dof, "intercept": self.intercept,
        }

    def table(self) -> str:
        lines = [f"{'Variable':<10}{'Coefficient':>13}{'Standard Error':>16}{'t-Statistic':>13}{'p-value':>10}"]
        for i, name in enumerate(self.names):
            lines.append(
                f"{name:<10}{self.coef[i]:>13.4f}{self.se[i]:>16.3f}{self.t[i]:>13.3f}{self.p[i]:>10.3f}"
            )
        lines.append(f"R-squared: {self.r2:.3f}  F-statistic: {self.f_stat:.3f}  "
                     f"Prob(F): {self.f_pvalue:.3g}  n: {self.n}  dof: {self.dof}")
        return "\n".join(lines)


def ols(X, y, intercept: bool = True, names: Sequence[str] | None = None) -> OLSResult:
    """Least squares via QR with classical (homoskedastic) inference."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    n, k = X.shape
    if len(y) != n:
        raise RegressionError(f"X has {n} rows but y has {len(y)}")
    names = list(names) if names is not None else [f"x{i + 1}" for i in range(k)]
    if len(names) != k:
        raise RegressionError("one name per regressor column is required")
    if intercept:
        X = np.column_stack([np.ones(n), X])
        names = ["const"] + names
    p = X.shape[1]
    dof = n - p
    if dof <= 0:
        raise RegressionError(f"need more observations ({n}) than coefficients ({p})")

    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * max(diag.max(), 1.0)
    bad = np.flatnonzero(diag <= tol)
    if bad.size:
        raise RegressionError(f"column {names[bad[0]]!r} is collinear with the preceding columns")
    beta = linalg.solve_triangular(R, Q.T @ y)
    resid = y - X @ beta
    ssr = float(resid @ resid)
    sigma2 = ssr / dof
    r_inv = linalg.solve_triangular(R, np.eye(p))
    se = np.sqrt(sigma2 * np.sum(r_inv * r_inv, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = beta / se
    sst = float(np.sum((y - y.mean()) ** 2)) if intercept else float(y @ y)
    r2 = 1.0 - ssr / sst if sst > 0 else float("nan")
    df_num = p - 1 if intercept else p
    if df_num > 0 and np.isfinite(r2):
        with np.errstate(divide="ignore"):
            f_stat = (r2 / df_num) / ((1.0 - r2) / dof) if r2 < 1.0 else float("inf")
        fp = f_pvalue(f_stat, df_num, dof)
    else:
        f_stat, fp = float("nan"), float("nan")
    return OLSResult(names, beta, se, t, t_pvalue(t, dof), r2, float(f_stat), fp, n, dof, intercept, resid)


# -- spike analyses -------------------------------------------------------


def spike_level_regression(pred_std, volume_ratio) -> OLSResult:
    """Volume ratio regressed on the predicted standard deviation (with intercept)."""
    s = np.asarray(pred_std, dtype=np.float64).ravel()
    r = np.asarray(volume_ratio, dtype=np.float64).ravel()
    if s.shape != r.shape:
        raise RegressionError("pred_std and volume_ratio must be aligned")
    if len(s) <= 10:
        raise RegressionError("need more than 10 observations")
    if np.ptp(s) == 0:
        raise RegressionError("predicted std has zero variance")
    return ols(s, r, names=["pred_std"])


def _within_group_diffs(pred_std, volume_ratio, groups):
    s = np.asarray(pred_std, dtype=np.float64).ravel()
    r = np.asarray(volume_ratio, dtype=np.float64).ravel()
    if s.shape != r.shape:
        raise RegressionError("pred_std and volume_ratio must be aligned")
    ds, dr = np.diff(s), np.diff(r)
    if groups is not None:
        g = np.asarray(groups).ravel()
        if g.shape != s.shape:
            raise RegressionError("groups must align with the series")
        keep = g[1:] == g[:-1]
        ds, dr = ds[keep], dr[keep]
    return ds, dr


def spike_diff_regression(pred_std, volume_ratio, groups=None) -> OLSResult:
    """First-differenced ratio on first-differenced std, over steps where the ratio rose.

    With ``groups`` (e.g. a day label per observation) differences are only
    taken between consecutive observations of the same group.
    """
    if np.size(pred_std) < 3:
        raise RegressionError("need aligned series of length >= 3")
    ds, dr = _within_group_diffs(pred_std, volume_ratio, groups)
    up = dr > 0
    if up.sum() < MIN_DIFF_SAMPLE:
        raise RegressionError(f"only {int(up.sum())} positive ratio increases; need {MIN_DIFF_SAMPLE}")
    if np.ptp(ds[up]) == 0:
        raise RegressionError("differenced std has zero variance on the subsample")
    return ols(ds[up], dr[up], names=["d_pred_std"])


def increase_history(pred_std, volume_ratio, groups=None) -> np.ndarray:
    """Changes in predicted std at the steps where the volume ratio increased."""
    ds, dr = _within_group_diffs(pred_std, volume_ratio, groups)
    return ds[dr > 0]


def spike_gate(pred_std, history) -> np.ndarray:
    """True where the step's std increase exceeds the historical median increase.

    ``history`` holds past std changes (see :func:`increase_history`). The
    first step has no change and is never gated.
    """
    history = np.asarray(history, dtype=np.float64).ravel()
    if history.size == 0:
        raise ValueError("gate history is empty")
    s = np.asarray(pred_std, dtype=np.float64).ravel()
    gate = np.zeros(len(s), dtype=bool)
    gate[1:] = np.diff(s) > np.median(history)
    return gate


# -- market-condition attribution -----------------------------------------


@dataclass(frozen=True)
class MarketFeatures:
    symbol: str
    date: dt.date
    x1: float  # close / open
    x2: float  # session high / low
    x3: float  # mean per-bar high / low
    x4: float  # std of per-bar high / low
    x5: float  # ln turnover

    def as_row(self) -> list[float]:
        return [self.x1, self.x2, self.x3, self.x4, self.x5]


def compute_market_features(day: TradingDay, meta: StockMeta) -> MarketFeatures:
    traded = day.volume > 0
    bar_ratio = day.high[traded] / day.low[traded]
    x3 = float(bar_ratio.mean()) if bar_ratio.size else 1.0
    x4 = float(bar_ratio.std()) if bar_ratio.size else 0.0
    return MarketFeatures(
        day.symbol, day.date,
        float(day.close[-1] / day.open[0]),
        float(day.high.max() / day.low.min()),
        x3, x4,
        float(np.log(day.total_volume / meta.shares_outstanding)),
    )


def performance_regression(features: Sequence[MarketFeatures], perf_bp) -> OLSResult:
    """Execution performance (bp) on z-scored market features, with intercept."""
    perf = np.asarray(perf_bp, dtype=np.float64).ravel()
    if len(features) != len(perf):
        raise RegressionError("one performance value per feature row is required")
    if len(perf) < MIN_PERF_ROWS:
        raise RegressionError(f"need at least {MIN_PERF_ROWS} rows, got {len(perf)}")
    X = np.array([f.as_row() for f in features], dtype=np.float64)
    Z, _ = zscore(X)
    return ols(Z, perf, names=list(FEATURE_NAMES))
