"""Aggregate evaluation statistics: macro AUROC, mutual information,
robustness of (mis)aligned pipelines, metric-consistency correlations, and
ordinary least squares with t-based significance tests.

The t-distribution CDF is computed from the regularized incomplete beta
function via its continued-fraction expansion, so p-values do not depend on
an external statistics library.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .metrics import AlignmentScores

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# classification performance
# ---------------------------------------------------------------------------

def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties averaged."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auroc(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mann-Whitney AUROC with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets)
    pos = targets == 1
    npos, nneg = int(pos.sum()), int((~pos).sum())
    if npos == 0 or nneg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - npos * (npos + 1) / 2) / (npos * nneg))


def per_label_auroc(scores: np.ndarray, targets: np.ndarray) -> List[Optional[float]]:
    """AUROC per label; None for labels missing a class."""
    scores, targets = np.atleast_2d(scores), np.atleast_2d(targets)
    out: List[Optional[float]] = []
    for k in range(scores.shape[1]):
        col = targets[:, k]
        if col.min() == col.max():
            out.append(None)
        else:
            out.append(binary_auroc(scores[:, k], col))
    return out


def macro_auroc(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean AUROC over labels that have both classes present."""
    per = per_label_auroc(scores, targets)
    excluded = [k for k, v in enumerate(per) if v is None]
    if excluded:
        logger.warning("macro AUROC: excluding single-class label(s) %s", excluded)
    valid = [v for v in per if v is not None]
    if not valid:
        raise ValueError("macro AUROC undefined: no label has both classes")
    return float(np.mean(valid))


def mutual_information(pred: np.ndarray, targets: np.ndarray) -> float:
    """Plug-in mutual information (bits) of the empirical 2x2 joint."""
    pred = np.asarray(pred).astype(int).reshape(-1)
    targets = np.asarray(targets).astype(int).reshape(-1)
    if pred.size == 0 or pred.shape != targets.shape:
        raise ValueError("pred and targets must be equal-length, non-empty")
    joint = np.zeros((2, 2))
    for a in (0, 1):
        for b in (0, 1):
            joint[a, b] = np.sum((pred == a) & (targets == b))
    joint /= joint.sum()
    rows = joint.sum(axis=1, keepdims=True)
    cols = joint.sum(axis=0, keepdims=True)
    mi = 0.0
    for a in (0, 1):
        for b in (0, 1):
            p = joint[a, b]
            if p > 0:
                mi += p * math.log2(p / (rows[a, 0] * cols[0, b]))
    return float(mi)


# ---------------------------------------------------------------------------
# pipeline reports and robustness
# ---------------------------------------------------------------------------

@dataclass
class PipelineReport:
    """Metric battery for one (model, explainer, scenario, label) combination."""

    model_id: str
    explainer_id: str
    pretrained: bool
    scenario: str
    label: int
    per_sample: Dict[str, AlignmentScores]
    macro_auroc: float
    mi: float
    seed: int = 0

    @property
    def mass_mean(self) -> Optional[float]:
        vals = [s.mass for s in self.per_sample.values() if s.mass is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def rank_mean(self) -> float:
        return float(np.mean([s.rank for s in self.per_sample.values()]))


def robustness(aligned: PipelineReport, misaligned: PipelineReport,
               metric: str) -> Tuple[float, Dict[str, float]]:
    """Mean per-sample difference aligned - misaligned for mass or rank.

    Returns the mean and the raw per-sample differences (for regression).
    Samples where mass is undefined on either side are dropped and counted.
    """
    if metric not in ("mass", "rank"):
        raise ValueError(f"metric must be mass or rank, got {metric!r}")
    ka, kb = set(aligned.per_sample), set(misaligned.per_sample)
    if ka != kb:
        missing = sorted(ka.symmetric_difference(kb))
        raise ValueError(f"sample mismatch between reports: {missing[:10]}"
                         + ("..." if len(missing) > 10 else ""))
    diffs: Dict[str, float] = {}
    dropped = 0
    for sid in sorted(ka):
        va = getattr(aligned.per_sample[sid], metric)
        vb = getattr(misaligned.per_sample[sid], metric)
        if va is None or vb is None:
            dropped += 1
            continue
        diffs[sid] = float(va) - float(vb)
    if dropped:
        logger.warning("robustness: dropped %d sample(s) with undefined %s",
                       dropped, metric)
    if not diffs:
        raise ValueError("robustness undefined: no sample has defined metrics")
    return float(np.mean(list(diffs.values()))), diffs


# ---------------------------------------------------------------------------
# correlations
# ---------------------------------------------------------------------------

def _pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc ** 2).sum() * (yc ** 2).sum())
    if denom == 0:
        return None
    return float((xc * yc).sum() / denom)


def correlations(x: Sequence[float], y: Sequence[float]):
    """(pearson, spearman); spearman is pearson on average-ranked values.

    Returns None for a coefficient when its variance vanishes.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("correlations need equal-length vectors of size >= 3")
    pearson = _pearson(x, y)
    spearman = _pearson(_average_ranks(x), _average_ranks(y))
    if pearson is None or spearman is None:
        logger.warning("correlation undefined for zero-variance input")
    return pearson, spearman


# ---------------------------------------------------------------------------
# Student-t CDF via continued-fraction incomplete beta
# ---------------------------------------------------------------------------

_CF_MAX_ITER = 300
_CF_EPS = 1e-15
_CF_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, dof: float) -> float:
    if dof <= 0:
        raise ValueError("dof must be positive")
    x = dof / (dof + t * t)
    tail = 0.5 * betainc_regularized(0.5 * dof, 0.5, x)
    return 1.0 - tail if t >= 0 else tail


def t_two_sided_pvalue(t: float, dof: float) -> float:
    return betainc_regularized(0.5 * dof, 0.5, dof / (dof + t * t))


# ---------------------------------------------------------------------------
# ordinary least squares
# ---------------------------------------------------------------------------

@dataclass
class RegressionResult:
    names: List[str]
    coef: np.ndarray
    std_err: np.ndarray
    tstat: np.ndarray
    pvalue: np.ndarray
    dof: int

    def __post_init__(self):
        n = len(self.names)
        if not (len(self.coef) == len(self.std_err) == len(self.tstat)
                == len(self.pvalue) == n):
            raise ValueError("regression result fields must have equal length")
        if np.any((self.pvalue < 0) | (self.pvalue > 1)):
            raise ValueError("p-values must lie in [0, 1]")


def ols_fit(design: np.ndarray, response: Sequence[float],
            names: Optional[List[str]] = None) -> RegressionResult:
    """QR least squares with classical standard errors and two-sided
    t-distribution p-values. Rejects rank-deficient designs, naming the
    collinear columns."""
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(response, dtype=np.float64).reshape(-1)
    n, p = X.shape
    if y.size != n:
        raise ValueError(f"response length {y.size} != rows {n}")
    if n <= p:
        raise ValueError(f"need more observations ({n}) than columns ({p})")
    names = names or [f"x{j}" for j in range(p)]

    _, r_piv, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_piv))
    tol = max(n, p) * np.finfo(np.float64).eps * (diag.max() if diag.size else 0.0)
    rank = int((diag > tol).sum())
    if rank < p:
        bad = sorted(piv[rank:])
        raise ValueError("design is rank deficient; collinear column(s): "
                         + ", ".join(names[j] for j in bad))

    q, r = np.linalg.qr(X)
    coef = scipy.linalg.solve_triangular(r, q.T @ y)
    resid = y - X @ coef
    dof = n - p
    sigma2 = float(resid @ resid) / dof
    rinv = scipy.linalg.solve_triangular(r, np.eye(p))
    cov = sigma2 * (rinv @ rinv.T)
    std_err = np.sqrt(np.diag(cov))
    tstat = coef / std_err
    pvalue = np.array([t_two_sided_pvalue(float(t), dof) for t in tstat])
    return RegressionResult(names=list(names), coef=coef, std_err=std_err,
                            tstat=tstat, pvalue=pvalue, dof=dof)


def regression_design(records: Sequence[dict],
                      model_baseline: str = "small_cnn",
                      explainer_baseline: str = "vg"):
    """Dummy-coded design matrix from factor dicts.

    Each record carries model, explainer, and pretrained keys. Baselines
    (CNN architecture, vanilla-gradient explainer) are absorbed into the
    intercept; factor levels that never vary are dropped so the design stays
    full rank.
    """
    names = ["intercept"]
    columns = [np.ones(len(records))]
    pre = np.array([1.0 if r["pretrained"] else 0.0 for r in records])
    if pre.min() != pre.max():
        names.append("pretrained")
        columns.append(pre)
    models = sorted({r["model"] for r in records} - {model_baseline})
    for mdl in models:
        names.append(f"model:{mdl}")
        columns.append(np.array([1.0 if r["model"] == mdl else 0.0 for r in records]))
    explainers = sorted({r["explainer"] for r in records} - {explainer_baseline})
    for expl in explainers:
        names.append(f"explainer:{expl}")
        columns.append(np.array([1.0 if r["explainer"] == expl else 0.0
                                 for r in records]))
    return np.column_stack(columns), names
