"""Penalized Cox proportional hazards and the Breslow baseline hazard.

The coefficient objective is the Breslow partial log-likelihood with an
elastic-net penalty written without the conventional one-half::

    f(w) = l(w) - lambda2 * ||w||_2^2 - lambda1 * ||w||_1

It is maximized by cyclic coordinate descent. Each coordinate takes a Newton
step on the exact one-dimensional curvature, soft-thresholded for the L1
term, and halves the step until the penalized objective does not decrease.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

ETA_CLIP = 700.0


class NoEventsError(ValueError):
    pass


@dataclass
class CoxFit:
    w: np.ndarray
    lambda1: float
    lambda2: float
    n_iter: int
    converged: bool
    objective: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class BaselineHazard:
    """Right-continuous cumulative baseline hazard, zero before the first event."""

    event_times: np.ndarray
    cumulative: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.event_times, t, side="right")
        return np.concatenate([[0.0], self.cumulative])[idx]

    def pairs(self) -> list[tuple[float, float]]:
        return [(float(a), float(b)) for a, b in zip(self.event_times, self.cumulative)]

    @classmethod
    def from_pairs(cls, pairs) -> "BaselineHazard":
        arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
        return cls(arr[:, 0].copy(), arr[:, 1].copy())

    @classmethod
    def zero(cls) -> "BaselineHazard":
        return cls(np.zeros(0), np.zeros(0))


class SurvivalCurve:
    """``S(t) = exp(-H0(t) * hr)`` as a step function."""

    def __init__(self, baseline: BaselineHazard, hr: float):
        if not hr > 0:
            raise ValueError("hazard ratio must be positive")
        self.baseline = baseline
        self.hr = float(hr)

    def __call__(self, t):
        return np.exp(-self.baseline(t) * self.hr)

    @property
    def times(self) -> np.ndarray:
        return self.baseline.event_times

    @property
    def values(self) -> np.ndarray:
        return np.exp(-self.baseline.cumulative * self.hr)


def _sorted_design(time, event):
    """Ascending time order plus first sorted index and size of each event-time group."""
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    order = np.argsort(time, kind="stable")
    ts, es = time[order], event[order]
    uniq, first = np.unique(ts, return_index=True)
    d = np.add.reduceat(es, first) if ts.size else np.zeros(0, np.int64)
    keep = d > 0
    return order, uniq[keep], first[keep].astype(np.int64), d[keep].astype(np.float64)


@numba.njit(cache=True)
def _risk_sums(eta, x):
    """Reverse cumulative ``log S0`` and ratios ``S1/S0``, ``S2/S0``.

    A running maximum keeps every risk set's sum representable even when
    the linear predictors span more than the float exponent range.
    """
    n = eta.shape[0]
    log_s0 = np.empty(n)
    r1 = np.empty(n)
    r2 = np.empty(n)
    top = -np.inf
    s0 = s1 = s2 = 0.0
    for i in range(n - 1, -1, -1):
        if eta[i] > top:
            scale = np.exp(top - eta[i])
            s0 *= scale
            s1 *= scale
            s2 *= scale
            top = eta[i]
        e = np.exp(eta[i] - top)
        s0 += e
        s1 += e * x[i]
        s2 += e * x[i] * x[i]
        log_s0[i] = top + np.log(s0)
        r1[i] = s1 / s0
        r2[i] = s2 / s0
    return log_s0, r1, r2


def _group_weights(n, start, d):
    """Event count of each tied group, placed at the group's first sorted index."""
    dpos = np.zeros(n)
    dpos[start] = d
    return dpos


@numba.njit(cache=True)
def _loglik(eta, event, dpos):
    # one reverse pass over the risk sets, rescaled by a running maximum
    top = -np.inf
    s0 = 0.0
    ll = 0.0
    for i in range(eta.shape[0] - 1, -1, -1):
        if eta[i] > top:
            s0 *= np.exp(top - eta[i])
            top = eta[i]
        s0 += np.exp(eta[i] - top)
        if event[i]:
            ll += eta[i]
        if dpos[i] > 0.0:
            ll -= dpos[i] * (top + np.log(s0))
    return ll


@numba.njit(cache=True)
def _penalized(eta, event, dpos, w, lam1, lam2):
    return _loglik(eta, event, dpos) - lam2 * np.sum(w * w) - lam1 * np.sum(np.abs(w))


@numba.njit(cache=True)
def _coord_derivs(eta, x, event, dpos):
    """Score and (nonnegative) curvature of the partial likelihood along one coordinate."""
    top = -np.inf
    s0 = s1 = s2 = 0.0
    g = 0.0
    h = 0.0
    for i in range(eta.shape[0] - 1, -1, -1):
        if eta[i] > top:
            scale = np.exp(top - eta[i])
            s0 *= scale
            s1 *= scale
            s2 *= scale
            top = eta[i]
        e = np.exp(eta[i] - top)
        s0 += e
        s1 += e * x[i]
        s2 += e * x[i] * x[i]
        if event[i]:
            g += x[i]
        if dpos[i] > 0.0:
            r1 = s1 / s0
            g -= dpos[i] * r1
            h += dpos[i] * (s2 / s0 - r1 * r1)
    return g, max(h, 0.0)


@numba.njit(cache=True)
def _soft(z, lam):
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


@numba.njit(cache=True)
def _cox_cd(XT, event, dpos, w, lam1, lam2, max_cycles, tol, obj_tol):
    # XT holds one contiguous row per coefficient
    K, P = XT.shape
    eta = np.zeros(P)
    for k in range(K):
        if w[k] != 0.0:
            eta += w[k] * XT[k]
    obj = _penalized(eta, event, dpos, w, lam1, lam2)
    history = np.empty(max_cycles + 1)
    history[0] = obj
    new_eta = np.empty(P)
    cycles = 0
    converged = False
    for cycle in range(max_cycles):
        cycles = cycle + 1
        max_change = 0.0
        for k in range(K):
            x = XT[k]
            g, h = _coord_derivs(eta, x, event, dpos)
            denom = h + 2.0 * lam2
            if denom <= 1e-300:
                continue
            target = _soft(h * w[k] + g, lam1) / denom
            delta = target - w[k]
            if delta == 0.0:
                continue
            old_wk = w[k]
            accepted = False
            for _ in range(60):
                w[k] = old_wk + delta
                for i in range(P):
                    new_eta[i] = eta[i] + delta * x[i]
                new_obj = _penalized(new_eta, event, dpos, w, lam1, lam2)
                if new_obj >= obj - 1e-12 * max(1.0, abs(obj)):
                    accepted = True
                    break
                delta *= 0.5
            if not accepted:
                w[k] = old_wk
                continue
            eta, new_eta = new_eta, eta
            obj = new_obj
            if abs(delta) > max_change:
                max_change = abs(delta)
        gain = obj - history[cycles - 1]
        history[cycles] = obj
        if max_change < tol or (obj_tol > 0.0 and gain <= obj_tol * max(1.0, abs(obj))):
            converged = True
            break
    return w, cycles, converged, history[: cycles + 1]


def _check_features(features):
    X = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    if X.ndim != 2:
        raise ValueError("features must be a (P, K) matrix")
    if not np.isfinite(X).all():
        raise ValueError("features contain non-finite values")
    return X


def partial_log_likelihood(features, time, event, w) -> float:
    """Breslow partial log-likelihood of coefficients ``w``."""
    X = _check_features(features)
    order, _, start, d = _sorted_design(time, event)
    eta = np.clip(X[order] @ np.asarray(w, dtype=np.float64), -ETA_CLIP, ETA_CLIP)
    return float(_loglik(eta, np.asarray(event, dtype=np.int64)[order], _group_weights(eta.size, start, d)))


def partial_score(features, time, event, w) -> np.ndarray:
    """Gradient of :func:`partial_log_likelihood` with respect to ``w``."""
    X = _check_features(features)
    order, _, start, d = _sorted_design(time, event)
    Xs = X[order]
    ev = np.asarray(event, dtype=np.int64)[order]
    eta = Xs @ np.asarray(w, dtype=np.float64)
    dpos = _group_weights(eta.size, start, d)
    return np.array([_coord_derivs(eta, np.ascontiguousarray(Xs[:, k]), ev, dpos)[0]
                     for k in range(X.shape[1])])


def fit_cox_elastic_net(features, time, event, lambda1: float = 1e-3, lambda2: float = 1e-3,
                        w0=None, max_cycles: int = 10_000, tol: float = 1e-7,
                        obj_tol: float = 0.0) -> CoxFit:
    """Elastic-net Cox regression with Breslow ties.

    Parameters
    ----------
    features : (P, K) array
        Covariates, typically per-patient topic proportions.
    time, event : (P,) arrays
        Observed times and event indicators (1 = event).
    lambda1, lambda2 : float
        L1 and squared-L2 penalty weights.
    w0 : (K,) array, optional
        Warm start.
    max_cycles : int
        Upper bound on full coordinate sweeps.
    tol, obj_tol : float
        Stop when no coefficient moves by more than ``tol`` in a sweep, or,
        if ``obj_tol > 0``, when a sweep raises the objective by at most
        ``obj_tol`` relative.
    """
    X = _check_features(features)
    event = np.asarray(event, dtype=np.int64)
    if event.sum() == 0:
        raise NoEventsError("no events")
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("penalty weights must be nonnegative")
    order, _, start, d = _sorted_design(time, event)
    w = np.zeros(X.shape[1]) if w0 is None else np.array(w0, dtype=np.float64)
    w, cycles, converged, history = _cox_cd(
        np.ascontiguousarray(X[order].T), event[order], _group_weights(X.shape[0], start, d), w,
        float(lambda1), float(lambda2), int(max_cycles), float(tol), float(obj_tol))
    if not np.isfinite(history).all():
        raise ValueError("non-finite Cox objective")
    return CoxFit(w, float(lambda1), float(lambda2), int(cycles), bool(converged), list(history))


def breslow_baseline(features, time, event, w) -> BaselineHazard:
    """Breslow cumulative baseline hazard for coefficients ``w``."""
    X = _check_features(features)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=np.int64)
    order, times, start, d = _sorted_design(time, event)
    if times.size == 0:
        return BaselineHazard.zero()
    eta = np.clip(X[order] @ np.asarray(w, dtype=np.float64), -ETA_CLIP, ETA_CLIP)
    log_s0, _, _ = _risk_sums(eta, eta)
    return BaselineHazard(times, np.cumsum(d * np.exp(-log_s0[start])))


def hazard_ratio(w, zbar) -> float | np.ndarray:
    """``exp(w . zbar)`` with the linear predictor clipped to +-700."""
    eta = np.asarray(zbar, dtype=np.float64) @ np.asarray(w, dtype=np.float64)
    hr = np.exp(np.clip(eta, -ETA_CLIP, ETA_CLIP))
    return float(hr) if np.ndim(hr) == 0 else hr


def survival_function(baseline: BaselineHazard, hr: float) -> SurvivalCurve:
    return SurvivalCurve(baseline, hr)
