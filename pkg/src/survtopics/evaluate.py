"""Evaluation metrics: dynamic AUC, coefficient ROC, Kaplan-Meier, log-rank,
co-occurrence mutual information and topic summaries.

The dynamic AUC at time ``t`` compares cases (``T <= t``) against controls
(``T > t``) and, by default, counts a control with a hazard ratio *equal*
to the case's as concordant. Pass ``tie_half=True`` to score ties 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.optimize import linear_sum_assignment

from .corpus import Corpus


@dataclass(frozen=True)
class DynamicAucCurve:
    times: np.ndarray
    auc: np.ndarray  # NaN where undefined
    mean_auc: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.auc)


@dataclass(frozen=True)
class RocResult:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    area: float


@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=np.float64), side="right")
        return np.concatenate([[1.0], self.survival])[idx]


@dataclass(frozen=True)
class LogRankResult:
    chi_square: float
    p_value: float
    p_one_sided: float
    observed_a: float
    expected_a: float
    df: int = 1


# -- dynamic AUC --------------------------------------------------------------

def _groups(time, hr, t):
    time = np.asarray(time, dtype=np.float64)
    hr = np.asarray(hr, dtype=np.float64)
    if time.shape != hr.shape or time.ndim != 1:
        raise ValueError("time and hr must be 1-d arrays of equal length")
    if time.size < 2:
        raise ValueError("need at least two patients")
    case = time <= t
    return hr[case], hr[~case]


def dynamic_auc(time, hr, t: float, tie_half: bool = False) -> float | None:
    """Cumulative/dynamic AUC at ``t``; ``None`` when cases or controls are empty."""
    cases, controls = _groups(time, hr, t)
    if cases.size == 0 or controls.size == 0:
        return None
    ctl = np.sort(controls)
    le = np.searchsorted(ctl, cases, side="right")
    if tie_half:
        lt = np.searchsorted(ctl, cases, side="left")
        num = lt.sum() + 0.5 * (le - lt).sum()
    else:
        num = le.sum()
    return float(num / (cases.size * controls.size))


def dynamic_auc_bruteforce(time, hr, t: float, tie_half: bool = False) -> float | None:
    """Quadratic double loop over (case, control) pairs."""
    cases, controls = _groups(time, hr, t)
    if cases.size == 0 or controls.size == 0:
        return None
    num = 0.0
    for hi in cases:
        for hj in controls:
            if tie_half:
                num += 1.0 if hj < hi else (0.5 if hj == hi else 0.0)
            else:
                num += 1.0 if hj <= hi else 0.0
    return num / (cases.size * controls.size)


def dynamic_auc_curve(time, hr, grid, tie_half: bool = False) -> DynamicAucCurve:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or (np.diff(grid) <= 0).any():
        raise ValueError("grid must be strictly increasing")
    vals = [dynamic_auc(time, hr, t, tie_half) for t in grid]
    auc = np.array([np.nan if v is None else v for v in vals])
    if np.isnan(auc).all():
        raise ValueError("degenerate grid: no time point has both cases and controls")
    return DynamicAucCurve(grid, auc, float(np.nanmean(auc)))


def step_grid(start: float, stop: float, step: float) -> np.ndarray:
    """``start, start+step, ...`` up to and including ``stop``."""
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(n)


# -- coefficient recovery -----------------------------------------------------

def coefficient_roc(w_est, support, signed: bool = False) -> RocResult:
    """ROC of ``|w_est|`` (or ``w_est`` when ``signed``) against a boolean support."""
    score = np.asarray(w_est, dtype=np.float64)
    if not signed:
        score = np.abs(score)
    y = np.asarray(support, dtype=bool)
    if score.shape != y.shape:
        raise ValueError("w_est and support must have the same shape")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("support needs at least one positive and one negative")
    order = np.argsort(-score, kind="stable")
    s, yy = score[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(yy)[last]
    fp = np.cumsum(~yy)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return RocResult(fpr, tpr, np.r_[np.inf, s[last]], float(np.trapezoid(tpr, fpr)))


def match_topics(phi_est, phi_true) -> np.ndarray:
    """Permutation ``p`` with ``phi_est[p[k]]`` best matching ``phi_true[k]``.

    Uses the Hungarian algorithm on the Hellinger affinity of rows.
    """
    a = np.sqrt(np.asarray(phi_est, dtype=np.float64))
    b = np.sqrt(np.asarray(phi_true, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("topic matrices differ in shape")
    rows, cols = linear_sum_assignment(-(b @ a.T))
    perm = np.empty(a.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


# -- Kaplan-Meier and log-rank ------------------------------------------------

def _event_table(time, event):
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    if time.size == 0:
        raise ValueError("no observations")
    uniq, inv = np.unique(time, return_inverse=True)
    d = np.bincount(inv, weights=event, minlength=uniq.size)
    n_at = np.bincount(inv, minlength=uniq.size)
    at_risk = time.size - np.r_[0, np.cumsum(n_at)[:-1]]
    return uniq, d, at_risk


def kaplan_meier(time, event=None) -> KmCurve:
    """Product-limit estimate over the distinct observed times."""
    time = np.asarray(time, dtype=np.float64)
    event = np.ones(time.size, np.int64) if event is None else np.asarray(event, dtype=np.int64)
    uniq, d, at_risk = _event_table(time, event)
    surv = np.cumprod(1.0 - d / at_risk)
    return KmCurve(uniq, surv, at_risk.astype(np.int64), d.astype(np.int64))


def log_rank_test(time_a, event_a, time_b, event_b) -> LogRankResult:
    """Two-group log-rank test.

    ``p_one_sided`` tests whether group A has the higher hazard.
    """
    ta, tb = np.asarray(time_a, dtype=np.float64), np.asarray(time_b, dtype=np.float64)
    ea, eb = np.asarray(event_a, dtype=np.int64), np.asarray(event_b, dtype=np.int64)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be nonempty")
    t = np.r_[ta, tb]
    e = np.r_[ea, eb]
    if e.sum() == 0:
        raise ValueError("no events")
    g = np.r_[np.ones(ta.size, bool), np.zeros(tb.size, bool)]
    times = np.unique(t[e == 1])
    obs = exp = var = 0.0
    for s in times:
        risk = t >= s
        n, na = risk.sum(), (risk & g).sum()
        at = (t == s) & (e == 1)
        d, da = at.sum(), (at & g).sum()
        obs += da
        exp += d * na / n
        if n > 1:
            var += d * (na / n) * (1 - na / n) * (n - d) / (n - 1)
    if var <= 0:
        return LogRankResult(0.0, 1.0, 0.5, float(obs), float(exp))
    chi = (obs - exp) ** 2 / var
    z = (obs - exp) / np.sqrt(var)
    return LogRankResult(float(chi), float(stats.chi2.sf(chi, 1)), float(stats.norm.sf(z)),
                         float(obs), float(exp))


def group_split_by_topic(theta, k: int, quantile: float = 0.70) -> tuple[np.ndarray, np.ndarray]:
    """Indices of patients at or above the ``quantile`` of topic ``k``, and the rest."""
    theta = np.asarray(theta, dtype=np.float64)
    if not 0 <= k < theta.shape[1]:
        raise ValueError(f"topic {k} out of range")
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must lie in [0, 1]")
    col = theta[:, k]
    if np.all(col == col[0]):
        raise ValueError("no split: all patients share the same topic proportion")
    high = col >= np.quantile(col, quantile)
    return np.flatnonzero(high), np.flatnonzero(~high)


# -- topic coherence ----------------------------------------------------------

def presence_mutual_information(presence) -> np.ndarray:
    """Pairwise plug-in MI (nats) between binary columns; diagonal is NaN."""
    X = np.asarray(presence, dtype=bool).astype(np.float64)
    P = X.shape[0]
    n11 = X.T @ X
    n1 = X.sum(axis=0)
    n10 = n1[:, None] - n11
    n01 = n1[None, :] - n11
    n00 = P - n11 - n10 - n01
    p1 = n1 / P
    mi = np.zeros_like(n11)
    for nab, pa, pb in ((n11, p1[:, None], p1[None, :]),
                        (n10, p1[:, None], 1 - p1[None, :]),
                        (n01, 1 - p1[:, None], p1[None, :]),
                        (n00, 1 - p1[:, None], 1 - p1[None, :])):
        pab = nab / P
        with np.errstate(divide="ignore", invalid="ignore"):
            term = pab * np.log(pab / (pa * pb))
        mi += np.where(pab > 0, term, 0.0)
    # rounding can leave tiny negatives; a constant column carries no information
    mi = np.maximum(mi, 0.0)
    const = (n1 == 0) | (n1 == P)
    mi[const, :] = 0.0
    mi[:, const] = 0.0
    np.fill_diagonal(mi, np.nan)
    return mi


def mutual_information(corpus: Corpus, modality, features) -> np.ndarray:
    """MI between presence indicators of ``features`` (ids or indices) in one modality."""
    m = corpus.modality_index(modality)
    vocab = corpus.vocabularies[m]
    idx = [vocab.index[f] if isinstance(f, str) else int(f) for f in features]
    return presence_mutual_information(corpus.dense(m)[:, idx] > 0)


def top_features(model, k: int, m: int, n: int) -> list[tuple[str, float]]:
    """Highest-probability features of topic ``k`` in modality ``m``."""
    row = model.phi[m][k]
    ids = model.vocabularies[m].feature_ids
    order = sorted(range(row.size), key=lambda v: (-row[v], ids[v]))
    return [(ids[v], float(row[v])) for v in order[: max(n, 0)]]
