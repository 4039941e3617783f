"""Power-law rate fits on (N, mean error, stderr) triples."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError

DEGENERATE_ZERO = "degenerate: zero error"


@dataclass
class RateFit:
    """log(err) = intercept + slope * log(N), fitted by weighted least squares.

    ``points`` holds (log N, log error) pairs and ``weights`` the WLS
    weights, so the fit can be recomputed from the stored data. A fit
    with ``reason`` set is degenerate: numeric fields are NaN.
    """

    slope: float
    intercept: float
    r2: float
    slope_stderr: float
    points: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    reason: str | None = None

    @property
    def degenerate(self):
        return self.reason is not None

    def predict(self, N):
        return math.exp(self.intercept) * np.asarray(N, dtype=float) ** self.slope

    def as_dict(self):
        num = lambda v: None if math.isnan(v) else v
        return {"slope": num(self.slope), "intercept": num(self.intercept), "r2": num(self.r2),
                "slope_stderr": num(self.slope_stderr), "reason": self.reason or "",
                "n_points": len(self.points)}


def _degenerate(points, reason):
    nan = float("nan")
    return RateFit(nan, nan, nan, nan, points, [], reason)


def _wls(x, y, w):
    W = w.sum()
    xm = (w * x).sum() / W
    ym = (w * y).sum() / W
    sxx = (w * (x - xm) ** 2).sum()
    if sxx <= 0:
        raise ValidationError("fit", "need at least two distinct N values")
    slope = (w * (x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    ss_res = (w * resid ** 2).sum()
    ss_tot = (w * (y - ym) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    dof = len(x) - 2
    # residual-scaled slope uncertainty; exact data give zero
    s2 = ss_res / dof if dof > 0 else 0.0
    se = math.sqrt(s2 / sxx)
    return float(slope), float(intercept), float(r2), float(se)


def fit_rate(points):
    """Fit err ~ C N^slope from (N, mean error, stderr) triples.

    Weights are 1/stderr^2 on the log scale, where the delta method turns
    the error bar into stderr/mean; missing or zero stderrs fall back to
    equal weights. Any nonpositive mean error gives a degenerate report.
    """
    pts = [tuple(float(v) for v in p) for p in points]
    if len(pts) < 3:
        raise ValidationError("fit", f"need at least 3 points, got {len(pts)}")
    if any(len(p) != 3 for p in pts):
        raise ValidationError("fit", "each point must be (N, mean error, stderr)")
    N = np.array([p[0] for p in pts])
    err = np.array([p[1] for p in pts])
    se = np.array([p[2] for p in pts])
    if np.any(N <= 0) or not np.all(np.isfinite(N)):
        raise ValidationError("fit", "N values must be positive")
    if not np.all(np.isfinite(err)):
        raise ValidationError("fit", "errors must be finite")
    logpts = [(math.log(n), math.log(e) if e > 0 else float("-inf")) for n, e in zip(N, err)]
    if np.any(err <= 0):
        return _degenerate(logpts, DEGENERATE_ZERO)
    x = np.log(N)
    y = np.log(err)
    rel = se / err
    if np.all(np.isfinite(rel)) and np.all(rel > 0):
        w = 1.0 / rel ** 2
        w = w / w.max()
    else:
        w = np.ones_like(x)
    slope, intercept, r2, sse = _wls(x, y, w)
    return RateFit(slope, intercept, r2, sse, [(float(a), float(b)) for a, b in zip(x, y)],
                   [float(v) for v in w])


def refit(fit):
    """Recompute a fit from its stored points and weights."""
    x = np.array([p[0] for p in fit.points])
    y = np.array([p[1] for p in fit.points])
    return _wls(x, y, np.asarray(fit.weights, dtype=float))
