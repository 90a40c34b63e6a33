"""Topic inference for held-out patients and personalized risk.

With the topic distributions and hyperparameters fixed, each patient's
responsibilities are refined by a deterministic leave-one-out fixed-point
loop (no survival factor: the outcome is unknown at prediction time), and
the resulting mean responsibilities feed the Cox head.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .corpus import Corpus, DataError, PatientRecord, phecode_counts
from .inference import TrainedModel
from .survival import SurvivalCurve, hazard_ratio

HELDOUT_TOL = 1e-6
HELDOUT_MAX_ITER = 200


@dataclass
class PredictionResult:
    gamma_bar: np.ndarray
    theta: np.ndarray
    hazard_ratio: float | None
    log_marginal: float
    n_iters: int
    flagged: bool = False
    history: list = field(default_factory=list, repr=False)


@dataclass
class RiskPredictions:
    """Per-patient predictions for a whole corpus, aligned to ``patient_ids``."""

    patient_ids: tuple
    gamma_bar: np.ndarray
    theta: np.ndarray
    hazard_ratio: np.ndarray | None
    log_marginal: np.ndarray
    flagged: np.ndarray
    baseline: object = None

    def curve(self, j: int) -> SurvivalCurve:
        if self.hazard_ratio is None or self.baseline is None:
            raise ValueError("no survival head")
        return SurvivalCurve(self.baseline, self.hazard_ratio[j])

    def curves(self) -> list[SurvivalCurve]:
        return [self.curve(j) for j in range(len(self.patient_ids))]


@numba.njit(cache=True)
def _heldout_loop(word, count, phi, prior, tol, max_iter, history):
    E = word.shape[0]
    K = prior.shape[0]
    gamma = np.empty((E, K))
    n = np.zeros(K)
    for e in range(E):
        s = 0.0
        for k in range(K):
            gamma[e, k] = prior[k] * phi[word[e], k]
            s += gamma[e, k]
        for k in range(K):
            gamma[e, k] = gamma[e, k] / s if s > 0.0 else 1.0 / K
            n[k] += count[e] * gamma[e, k]
    p = np.empty(K)
    prev = _step3(word, count, phi, n)
    history[0] = prev
    it = 0
    for it in range(1, max_iter + 1):
        for e in range(E):
            c = count[e]
            total = 0.0
            for k in range(K):
                a = n[k] - c * gamma[e, k]
                if a < 0.0:
                    a = 0.0
                p[k] = (prior[k] + a) * phi[word[e], k]
                total += p[k]
            for k in range(K):
                new = p[k] / total if total > 0.0 else 1.0 / K
                n[k] += c * (new - gamma[e, k])
                gamma[e, k] = new
        cur = _step3(word, count, phi, n)
        history[it] = cur
        if abs(cur - prev) < tol * abs(prev):
            break
        prev = cur
    return gamma, n, it


@numba.njit(cache=True)
def _step3(word, count, phi, n):
    K = n.shape[0]
    tot = 0.0
    for k in range(K):
        tot += n[k]
    ll = 0.0
    for e in range(word.shape[0]):
        s = 0.0
        for k in range(K):
            s += n[k] / tot * phi[word[e], k]
        ll += count[e] * np.log(s)
    return ll


def _stacked_phi(model: TrainedModel) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.concatenate([[0], np.cumsum([p.shape[1] for p in model.phi])]).astype(np.int64)
    return np.ascontiguousarray(np.concatenate([p.T for p in model.phi], axis=0)), offsets


def infer_heldout_topics(model: TrainedModel, patient: PatientRecord, prior_row=None,
                         tol: float = HELDOUT_TOL, max_iter: int = HELDOUT_MAX_ITER,
                         _phi=None) -> PredictionResult:
    """Fixed-point topic inference for one patient under a trained model.

    Parameters
    ----------
    model : TrainedModel
    patient : PatientRecord
        Feature indices must refer to the model's vocabularies.
    prior_row : (K,) array, optional
        Guide probabilities for this patient; uniform when omitted.
    tol, max_iter
        Stop once the log marginal likelihood changes by less than ``tol``
        relative, or after ``max_iter`` passes.
    """
    K = model.K
    pi = np.full(K, 1.0 / K) if prior_row is None else np.asarray(prior_row, dtype=np.float64)
    if pi.shape != (K,):
        raise ValueError(f"prior row has shape {pi.shape}, expected {(K,)}")
    phi, offsets = _stacked_phi(model) if _phi is None else _phi
    if len(patient.words) != len(model.phi):
        raise DataError(f"patient {patient.patient_id!r} has {len(patient.words)} modalities, "
                        f"model has {len(model.phi)}")
    for m, words in enumerate(patient.words):
        if words.size and (words.min() < 0 or words.max() >= model.phi[m].shape[1]):
            raise DataError(f"patient {patient.patient_id!r} has features outside modality {m}'s vocabulary")

    alpha_pi = model.hyperparams.alpha * pi
    lengths = patient.lengths
    w = model.w
    if lengths.sum() == 0:
        gb = alpha_pi / alpha_pi.sum()
        hr = None if w is None else hazard_ratio(w, gb)
        return PredictionResult(gb, gb.copy(), hr, 0.0, 0, flagged=True)

    word = np.concatenate([words + offsets[m] for m, words in enumerate(patient.words)]).astype(np.int64)
    count = np.concatenate(patient.counts).astype(np.float64)
    mod = np.repeat(np.arange(len(patient.words)), [w_.size for w_ in patient.words])
    history = np.empty(max_iter + 1)
    gamma, n, iters = _heldout_loop(word, count, phi, alpha_pi, float(tol), int(max_iter), history)

    # mean responsibility per modality, then back onto the simplex
    weighted = count[:, None] * gamma
    gb = np.zeros(K)
    for m in np.flatnonzero(lengths > 0):
        gb += weighted[mod == m].sum(axis=0) / lengths[m]
    gb /= gb.sum()
    theta = n / n.sum()
    hr = None if w is None else hazard_ratio(w, gb)
    return PredictionResult(gb, theta, hr, float(history[iters]), int(iters),
                            history=list(history[: iters + 1]))


def _check_vocabularies(model: TrainedModel, corpus: Corpus) -> None:
    if len(model.vocabularies) != corpus.n_modalities:
        raise DataError("corpus modalities do not match the model")
    for a, b in zip(model.vocabularies, corpus.vocabularies):
        if a.feature_ids != b.feature_ids:
            raise DataError(f"vocabulary of modality {b.name!r} does not match the model")


def heldout_prior(model: TrainedModel, corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    """Guide probabilities for new patients from the stored mixture fits.

    Returns the ``(P, K)`` prior and a boolean flag per patient marking
    those without guide-modality tokens, which receive ``1/K``.
    """
    P, K = corpus.n_patients, model.K
    if not model.config.guided:
        return np.full((P, K), 1.0 / K), np.zeros(P, dtype=bool)
    if model.prior_model is None or model.guide is None:
        raise ValueError("guided model lacks a stored prior model and guide map")
    m = model.guide_modality or 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        U = phecode_counts(corpus, model.guide, m)
    col = {p: k for k, p in enumerate(U.phenotype_ids)}
    u = U.counts[:, [col[p] for p in model.prior_model.phenotype_ids]]
    pi = model.prior_model.apply(u)
    empty = corpus.lengths()[:, m] == 0
    pi[empty] = 1.0 / K
    return pi, empty


def predict_topics(model: TrainedModel, corpus: Corpus, prior=None) -> RiskPredictions:
    """Held-out inference for every patient of ``corpus``."""
    _check_vocabularies(model, corpus)
    P, K = corpus.n_patients, model.K
    flagged = np.zeros(P, dtype=bool)
    if prior is None:
        prior, flagged = heldout_prior(model, corpus)
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != (P, K):
        raise ValueError(f"prior has shape {prior.shape}, expected {(P, K)}")
    stacked = _stacked_phi(model)
    gb, th, ll = np.zeros((P, K)), np.zeros((P, K)), np.zeros(P)
    for j, rec in enumerate(corpus):
        r = infer_heldout_topics(model, rec, prior[j], _phi=stacked)
        gb[j], th[j], ll[j] = r.gamma_bar, r.theta, r.log_marginal
        flagged[j] |= r.flagged
    hr = None if model.w is None else hazard_ratio(model.w, gb)
    return RiskPredictions(corpus.patient_ids, gb, th, hr, ll, flagged, model.baseline)


def predict_risk(model: TrainedModel, corpus: Corpus, prior=None) -> RiskPredictions:
    """Hazard ratios and survival curves for every patient of ``corpus``."""
    if model.w is None or model.baseline is None:
        raise ValueError("no survival head")
    return predict_topics(model, corpus, prior)
