"""Collapsed variational inference for survival-supervised guided topic models.

One engine covers four variants by toggling two switches:

=============  ============  ==============
variant        guide prior   survival term
=============  ============  ==============
mixehr         no            no
mixehr_g       yes           no
mixehr_surv    no            yes
mixehr_surg    yes           yes
=============  ============  ==============

Tokens are stored by type: a (patient, modality, feature) entry with count
``c`` carries one responsibility vector and contributes ``c * gamma`` to the
sufficient statistics. Its leave-one-out exclusion removes the full
``c * gamma``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numba
import numpy as np
from scipy.special import digamma

from .corpus import Corpus, GuideMap
from .prior import PriorModel
from .survival import BaselineHazard, breslow_baseline, fit_cox_elastic_net

log = logging.getLogger(__name__)

VARIANTS = ("mixehr", "mixehr_g", "mixehr_surv", "mixehr_surg")
HYPER_FLOOR = 1e-10
LOG_FACTOR_CLIP = 700.0


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    K: int
    max_sweeps: int = 200
    tol: float = 1e-6
    lambda1: float = 1e-3
    lambda2: float = 1e-3
    variant: str = "mixehr_surg"
    seed: int = 0
    cox_refit_every: int = 1
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    a_beta: float = 1.0
    b_beta: float = 1.0
    update_hyperparams: bool = True
    mode: str = "sequential"
    cox_max_cycles: int = 50
    cox_obj_tol: float = 1e-12

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.tol <= 0 or min(self.max_sweeps, self.cox_refit_every, self.cox_max_cycles) < 1:
            raise ValueError("tol, max_sweeps, cox_refit_every and cox_max_cycles must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty weights must be nonnegative")
        if min(self.a_alpha, self.b_alpha, self.a_beta, self.b_beta) <= 0:
            raise ValueError("Gamma hyper-hyperparameters must be positive")
        if self.mode not in ("sequential", "parallel"):
            raise ValueError("mode must be 'sequential' or 'parallel'")

    @property
    def guided(self) -> bool:
        return self.variant in ("mixehr_g", "mixehr_surg")

    @property
    def supervised(self) -> bool:
        return self.variant in ("mixehr_surv", "mixehr_surg")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Hyperparams:
    alpha: np.ndarray
    beta: list
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    a_beta: float = 1.0
    b_beta: float = 1.0


@dataclass(frozen=True)
class TokenTable:
    """All modalities flattened patient-major; ``word`` is a global index."""

    indptr: np.ndarray
    modality: np.ndarray
    word: np.ndarray
    count: np.ndarray
    offsets: np.ndarray
    lengths: np.ndarray

    @classmethod
    def from_corpus(cls, corpus: Corpus) -> "TokenTable":
        P, M = corpus.n_patients, corpus.n_modalities
        offsets = np.concatenate([[0], np.cumsum([v.size for v in corpus.vocabularies])]).astype(np.int64)
        mods, words, counts, sizes = [], [], [], np.zeros(P, dtype=np.int64)
        for j in range(P):
            for m, mod in enumerate(corpus.modalities):
                s = slice(mod.indptr[j], mod.indptr[j + 1])
                words.append(mod.words[s] + offsets[m])
                counts.append(mod.counts[s])
                mods.append(np.full(mod.indptr[j + 1] - mod.indptr[j], m, dtype=np.int64))
                sizes[j] += mod.indptr[j + 1] - mod.indptr[j]
        cat = lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt)  # noqa: E731
        return cls(
            np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64),
            cat(mods, np.int64), cat(words, np.int64), cat(counts, np.float64),
            offsets, corpus.lengths().astype(np.float64).reshape(P, M),
        )

    @property
    def n_patients(self) -> int:
        return len(self.indptr) - 1

    @property
    def totals(self) -> np.ndarray:
        return self.lengths.sum(axis=1)


@dataclass
class VariationalState:
    tokens: TokenTable
    gamma: np.ndarray
    n_jk: np.ndarray
    n_wk: np.ndarray
    n_k: np.ndarray
    gamma_bar: np.ndarray

    def n_wk_modality(self, m: int) -> np.ndarray:
        o = self.tokens.offsets
        return self.n_wk[o[m]:o[m + 1]]

    def refresh(self) -> None:
        """Recompute every sufficient statistic from ``gamma``."""
        _accumulate(self.tokens.indptr, self.tokens.modality, self.tokens.word, self.tokens.count,
                    self.gamma, self.n_jk, self.n_wk, self.n_k)
        self.gamma_bar = _gamma_bar(self.n_jk, self.tokens.totals)


@dataclass(frozen=True)
class SurvivalContext:
    """Per-patient quantities held fixed during one sweep."""

    w: np.ndarray
    cum_hazard: np.ndarray
    event: np.ndarray
    linear: np.ndarray


@dataclass
class TrainedModel:
    config: TrainConfig
    vocabularies: tuple
    hyperparams: Hyperparams
    phi: list
    w: np.ndarray | None = None
    baseline: BaselineHazard | None = None
    prior_model: PriorModel | None = None
    guide_modality: int | None = None
    guide: GuideMap | None = None
    history: list = field(default_factory=list)
    n_sweeps: int = 0
    converged: bool = False
    train_gamma_bar: np.ndarray | None = field(default=None, repr=False)

    @property
    def K(self) -> int:
        return self.config.K


# -- numba kernels ------------------------------------------------------------

@numba.njit(cache=True)
def _accumulate(indptr, modality, word, count, gamma, n_jk, n_wk, n_k):
    n_jk[:] = 0.0
    n_wk[:] = 0.0
    n_k[:] = 0.0
    K = gamma.shape[1]
    for j in range(indptr.shape[0] - 1):
        for e in range(indptr[j], indptr[j + 1]):
            m, v, c = modality[e], word[e], count[e]
            for k in range(K):
                x = c * gamma[e, k]
                n_jk[j, k] += x
                n_wk[v, k] += x
                n_k[m, k] += x


@numba.njit(cache=True)
def _token_update(j, e, m, v, c, gamma, n_jk, n_wk, n_k, alpha, pi, beta, beta_sum,
                  supervised, w, cum_hazard, event, linear, n_jm, out):
    K = gamma.shape[1]
    if supervised:
        scale = cum_hazard[j] * (linear[j] + 1.0)
        top = -np.inf
        for k in range(K):
            r = w[k] / n_jm
            s = event[j] * r - scale * np.exp(r)
            if s > LOG_FACTOR_CLIP:
                s = LOG_FACTOR_CLIP
            elif s < -LOG_FACTOR_CLIP:
                s = -LOG_FACTOR_CLIP
            out[k] = s
            if s > top:
                top = s
        for k in range(K):
            out[k] = np.exp(out[k] - top)
    total = 0.0
    for k in range(K):
        g = c * gamma[e, k]
        a = n_jk[j, k] - g
        b = n_wk[v, k] - g
        t = n_k[m, k] - g
        if a < 0.0:
            a = 0.0
        if b < 0.0:
            b = 0.0
        if t < 0.0:
            t = 0.0
        val = (alpha[k] * pi[j, k] + a) * (beta[v] + b) / (beta_sum[m] + t)
        if supervised:
            val *= out[k]
        out[k] = val
        total += val
    for k in range(K):
        out[k] /= total


@numba.njit(cache=True)
def _sweep_sequential(indptr, modality, word, count, lengths, gamma, n_jk, n_wk, n_k,
                      alpha, pi, beta, beta_sum, supervised, w, cum_hazard, event, linear):
    K = gamma.shape[1]
    out = np.empty(K)
    for j in range(indptr.shape[0] - 1):
        for e in range(indptr[j], indptr[j + 1]):
            m, v, c = modality[e], word[e], count[e]
            _token_update(j, e, m, v, c, gamma, n_jk, n_wk, n_k, alpha, pi, beta, beta_sum,
                          supervised, w, cum_hazard, event, linear, lengths[j, m], out)
            for k in range(K):
                d = c * (out[k] - gamma[e, k])
                n_jk[j, k] += d
                n_wk[v, k] += d
                n_k[m, k] += d
                gamma[e, k] = out[k]


@numba.njit(cache=True, parallel=True)
def _sweep_parallel(indptr, modality, word, count, lengths, gamma, n_jk, n_wk, n_k,
                    alpha, pi, beta, beta_sum, supervised, w, cum_hazard, event, linear):
    # statistics stay frozen for the whole sweep; callers refresh afterwards
    K = gamma.shape[1]
    P = indptr.shape[0] - 1
    new = np.empty_like(gamma)
    for j in numba.prange(P):
        out = np.empty(K)
        for e in range(indptr[j], indptr[j + 1]):
            m, v, c = modality[e], word[e], count[e]
            _token_update(j, e, m, v, c, gamma, n_jk, n_wk, n_k, alpha, pi, beta, beta_sum,
                          supervised, w, cum_hazard, event, linear, lengths[j, m], out)
            for k in range(K):
                new[e, k] = out[k]
    gamma[:] = new


@numba.njit(cache=True)
def _log_marginal(indptr, modality, word, count, n_jk, n_wk, n_k, beta, beta_sum, per_patient):
    K = n_jk.shape[1]
    total = 0.0
    for j in range(indptr.shape[0] - 1):
        nj = 0.0
        for k in range(K):
            nj += n_jk[j, k]
        acc = 0.0
        if nj > 0.0:
            for e in range(indptr[j], indptr[j + 1]):
                m, v = modality[e], word[e]
                s = 0.0
                for k in range(K):
                    s += n_jk[j, k] / nj * (beta[v] + n_wk[v, k]) / (beta_sum[m] + n_k[m, k])
                acc += count[e] * np.log(s)
        per_patient[j] = acc
        total += acc
    return total


def _gamma_bar(n_jk: np.ndarray, totals: np.ndarray) -> np.ndarray:
    K = n_jk.shape[1]
    out = np.full(n_jk.shape, 1.0 / K)
    nz = totals > 0
    out[nz] = n_jk[nz] / n_jk[nz].sum(axis=1, keepdims=True)
    return out


# -- public operations --------------------------------------------------------

def init_state(corpus: Corpus, config: TrainConfig, seed: int | None = None
               ) -> tuple[VariationalState, Hyperparams]:
    """Random responsibilities and Gamma-drawn hyperparameters."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    K = config.K
    alpha = rng.gamma(config.a_alpha, 1.0 / config.b_alpha, size=K)
    beta = [rng.gamma(config.a_beta, 1.0 / config.b_beta, size=v.size) for v in corpus.vocabularies]
    tokens = TokenTable.from_corpus(corpus)
    gamma = rng.uniform(0.0, 1.0, size=(tokens.word.size, K))
    gamma /= gamma.sum(axis=1, keepdims=True)
    state = VariationalState(
        tokens, gamma,
        np.zeros((tokens.n_patients, K)),
        np.zeros((int(tokens.offsets[-1]), K)),
        np.zeros((corpus.n_modalities, K)),
        np.zeros((tokens.n_patients, K)),
    )
    state.refresh()
    hyper = Hyperparams(np.maximum(alpha, HYPER_FLOOR), [np.maximum(b, HYPER_FLOOR) for b in beta],
                        config.a_alpha, config.b_alpha, config.a_beta, config.b_beta)
    return state, hyper


def _flat_beta(hyper: Hyperparams) -> tuple[np.ndarray, np.ndarray]:
    return np.concatenate(hyper.beta), np.array([b.sum() for b in hyper.beta])


def uniform_prior(P: int, K: int) -> np.ndarray:
    return np.full((P, K), 1.0 / K)


def update_gamma(state: VariationalState, hyper: Hyperparams, pi: np.ndarray, j: int, e: int,
                 survival: SurvivalContext | None = None) -> np.ndarray:
    """Responsibility update for token-type entry ``e`` of patient ``j``.

    Pure NumPy counterpart of the compiled sweep; it does not modify ``state``.
    """
    tk = state.tokens
    m, v, c = int(tk.modality[e]), int(tk.word[e]), float(tk.count[e])
    beta, beta_sum = _flat_beta(hyper)
    own = c * state.gamma[e]
    a = np.maximum(state.n_jk[j] - own, 0.0)
    b = np.maximum(state.n_wk[v] - own, 0.0)
    t = np.maximum(state.n_k[m] - own, 0.0)
    p = (hyper.alpha * pi[j] + a) * (beta[v] + b) / (beta_sum[m] + t)
    if survival is not None:
        r = survival.w / tk.lengths[j, m]
        s = survival.event[j] * r - survival.cum_hazard[j] * (survival.linear[j] + 1.0) * np.exp(r)
        s = np.clip(s, -LOG_FACTOR_CLIP, LOG_FACTOR_CLIP)
        p = p * np.exp(s - s.max())
    return p / p.sum()


def e_step(state: VariationalState, hyper: Hyperparams, pi: np.ndarray,
           survival: SurvivalContext | None = None, mode: str = "sequential") -> None:
    tk = state.tokens
    beta, beta_sum = _flat_beta(hyper)
    K = state.gamma.shape[1]
    if survival is None:
        zeros = np.zeros(tk.n_patients)
        sv = (False, np.zeros(K), zeros, zeros, zeros)
    else:
        sv = (True, survival.w.astype(np.float64), survival.cum_hazard.astype(np.float64),
              survival.event.astype(np.float64), survival.linear.astype(np.float64))
    kernel = _sweep_sequential if mode == "sequential" else _sweep_parallel
    kernel(tk.indptr, tk.modality, tk.word, tk.count, tk.lengths, state.gamma, state.n_jk,
           state.n_wk, state.n_k, hyper.alpha, np.ascontiguousarray(pi, dtype=np.float64),
           beta, beta_sum, *sv)
    state.refresh()


def update_alpha(state: VariationalState, hyper: Hyperparams) -> np.ndarray:
    """One digamma fixed-point step for the topic hyperparameter."""
    alpha = hyper.alpha
    n = state.n_jk
    num = hyper.a_alpha - 1.0 + alpha * (digamma(alpha[None, :] + n) - digamma(alpha)[None, :]).sum(axis=0)
    a0 = alpha.sum()
    den = hyper.b_alpha + (digamma(a0 + n.sum(axis=1)) - digamma(a0)).sum()
    new = num / den
    if not np.isfinite(new).all():
        raise TrainingError("non-finite alpha update; sufficient statistics are corrupted")
    return np.maximum(new, HYPER_FLOOR)


def update_beta(state: VariationalState, hyper: Hyperparams) -> list:
    """One digamma fixed-point step per modality for the feature hyperparameters."""
    out = []
    for m, beta in enumerate(hyper.beta):
        n = state.n_wk_modality(m)
        num = hyper.a_beta - 1.0 + beta * (digamma(beta[:, None] + n) - digamma(beta)[:, None]).sum(axis=1)
        b0 = beta.sum()
        den = hyper.b_beta + (digamma(b0 + n.sum(axis=0)) - digamma(b0)).sum()
        new = num / den
        if not np.isfinite(new).all():
            raise TrainingError(f"non-finite beta update in modality {m}")
        out.append(np.maximum(new, HYPER_FLOOR))
    return out


def estimate_phi(state: VariationalState, hyper: Hyperparams) -> list:
    """Posterior-mean topic distributions, one ``(K, V_m)`` matrix per modality."""
    phi = []
    for m, beta in enumerate(hyper.beta):
        n = state.n_wk_modality(m)
        num = beta[:, None] + n
        phi.append(np.ascontiguousarray((num / num.sum(axis=0, keepdims=True)).T))
    return phi


def log_marginal_proxy(state: VariationalState, hyper: Hyperparams, per_patient: bool = False):
    """Sum over tokens of ``log sum_k theta_jk phi_k,x`` with ``theta`` from counts."""
    tk = state.tokens
    beta, beta_sum = _flat_beta(hyper)
    pp = np.zeros(tk.n_patients)
    total = _log_marginal(tk.indptr, tk.modality, tk.word, tk.count, state.n_jk, state.n_wk,
                          state.n_k, beta, beta_sum, pp)
    return (total, pp) if per_patient else total


def _survival_context(state, time, event, w, baseline) -> SurvivalContext:
    return SurvivalContext(w, baseline(time), event.astype(np.float64), state.gamma_bar @ w)


def _refit_cox(state, time, event, config, w, final=False):
    # in-loop refits are warm-started and capped; the last one runs to convergence
    active = state.tokens.totals > 0
    cycles = 10_000 if final else config.cox_max_cycles
    fit = fit_cox_elastic_net(state.gamma_bar[active], time[active], event[active],
                              config.lambda1, config.lambda2, w0=w, max_cycles=cycles,
                              obj_tol=config.cox_obj_tol)
    base = breslow_baseline(state.gamma_bar[active], time[active], event[active], fit.w)
    return fit.w, base


def train(corpus: Corpus, survival=None, prior: np.ndarray | None = None,
          config: TrainConfig | None = None, prior_model: PriorModel | None = None,
          guide_modality: int | None = None, guide: GuideMap | None = None,
          callback=None) -> TrainedModel:
    """Fit a model by alternating full responsibility sweeps and M-steps.

    Parameters
    ----------
    corpus : Corpus
    survival : tuple of (time, event) arrays or list of SurvivalOutcome, optional
        Required for the survival-supervised variants.
    prior : (P, K) array, optional
        Guide probabilities; required for the guided variants.
    config : TrainConfig
    prior_model, guide_modality, guide : optional
        Stored with guided models so held-out priors can be recomputed.
    callback : callable, optional
        Called as ``callback(sweep, state, hyper)`` after every sweep.
    """
    if config is None:
        raise ValueError("config is required")
    P, K = corpus.n_patients, config.K
    if config.guided:
        if prior is None:
            raise ValueError(f"variant {config.variant} needs a prior matrix")
        pi = np.asarray(prior, dtype=np.float64)
        if pi.shape != (P, K):
            raise ValueError(f"prior has shape {pi.shape}, expected {(P, K)}")
        if not (pi > 0).all():
            raise ValueError("prior entries must be positive")
    else:
        pi = uniform_prior(P, K)

    time = event = None
    if config.supervised:
        if survival is None:
            raise ValueError(f"variant {config.variant} needs survival outcomes")
        time, event = _survival_pair(survival)
        if time.shape[0] != P:
            raise ValueError("survival outcomes are not aligned to the corpus")
        if event[corpus.lengths().sum(axis=1) > 0].sum() == 0:
            raise ValueError("no events among non-empty patients")

    state, hyper = init_state(corpus, config)
    w = np.zeros(K)
    baseline = BaselineHazard.zero()
    history: list[float] = []
    converged = False
    sweep = 0
    for sweep in range(1, config.max_sweeps + 1):
        ctx = _survival_context(state, time, event, w, baseline) if config.supervised else None
        e_step(state, hyper, pi, ctx, config.mode)
        if config.update_hyperparams:
            hyper.alpha = update_alpha(state, hyper)
            hyper.beta = update_beta(state, hyper)
        if config.supervised and sweep % config.cox_refit_every == 0:
            w, baseline = _refit_cox(state, time, event, config, w)
        total, pp = log_marginal_proxy(state, hyper, per_patient=True)
        if not np.isfinite(total):
            bad = int(np.flatnonzero(~np.isfinite(pp))[0]) if (~np.isfinite(pp)).any() else -1
            who = corpus.patient_ids[bad] if bad >= 0 else "?"
            raise TrainingError(f"non-finite log-likelihood at sweep {sweep}, patient {who}")
        history.append(float(total))
        log.debug("sweep %d: log-marginal %.6f", sweep, total)
        if callback is not None:
            callback(sweep, state, hyper)
        if len(history) > 1 and abs(history[-1] - history[-2]) < config.tol * abs(history[-2]):
            converged = True
            break
    if config.supervised:
        w, baseline = _refit_cox(state, time, event, config, w, final=True)

    return TrainedModel(
        config=config,
        vocabularies=tuple(corpus.vocabularies),
        hyperparams=hyper,
        phi=estimate_phi(state, hyper),
        w=w if config.supervised else None,
        baseline=baseline if config.supervised else None,
        prior_model=prior_model if config.guided else None,
        guide_modality=guide_modality if config.guided else None,
        guide=guide if config.guided else None,
        history=history,
        n_sweeps=sweep,
        converged=converged,
        train_gamma_bar=state.gamma_bar.copy(),
    )


def attach_cox(model: TrainedModel, features: np.ndarray, survival,
               lambda1: float | None = None, lambda2: float | None = None) -> TrainedModel:
    """Two-stage pipeline: fit a Cox head on fixed topic proportions."""
    time, event = _survival_pair(survival)
    l1 = model.config.lambda1 if lambda1 is None else lambda1
    l2 = model.config.lambda2 if lambda2 is None else lambda2
    fit = fit_cox_elastic_net(features, time, event, l1, l2, obj_tol=model.config.cox_obj_tol)
    base = breslow_baseline(features, time, event, fit.w)
    return replace(model, w=fit.w, baseline=base)


def _survival_pair(survival) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(survival, tuple) and len(survival) == 2:
        return np.asarray(survival[0], dtype=np.float64), np.asarray(survival[1], dtype=np.int64)
    time = np.array([o.time for o in survival], dtype=np.float64)
    event = np.array([o.event for o in survival], dtype=np.int64)
    return time, event


__all__ = [
    "VARIANTS", "TrainConfig", "Hyperparams", "TokenTable", "VariationalState", "SurvivalContext",
    "TrainedModel", "TrainingError", "init_state", "update_gamma", "e_step", "update_alpha",
    "update_beta", "estimate_phi", "log_marginal_proxy", "train", "attach_cox", "uniform_prior",
]
