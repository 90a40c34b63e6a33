"""Synthetic corpora with planted survival topics.

Design 1 draws everything from the generative model with Gamma-distributed
Dirichlet hyperparameters. Design 2 builds topic distributions from a
feature-to-phenotype map and takes patient topic mixtures and record counts
from empirical per-patient files. Both sample survival times by inverting an
exponential baseline cumulative hazard ``H0(t) = lambda * t``.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import (
    Corpus, DataError, GuideMap, SurvivalOutcome, Vocabulary, _data_lines, build_corpus,
    load_guide_map,
)


@dataclass(frozen=True)
class SimConfig1:
    V: int = 1000
    K: int = 500
    P: int = 8000
    tokens_per_patient: int = 100
    n_nonzero: int = 50
    w_value: float = 6.0
    alpha_shape: float = 10.0
    alpha_scale: float = 1.0
    beta_shape: float = 2.0
    beta_scale: float = 500.0
    lambda_baseline: float = 1.0
    censor_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_nonzero > self.K:
            raise ValueError("n_nonzero cannot exceed K")
        if min(self.V, self.K, self.P, self.tokens_per_patient) < 1:
            raise ValueError("dimensions must be positive")
        if min(self.alpha_shape, self.alpha_scale, self.beta_shape, self.beta_scale,
               self.lambda_baseline) <= 0:
            raise ValueError("distribution parameters must be positive")

    def scaled(self, factor: float, **overrides) -> "SimConfig1":
        base = dict(
            V=max(1, round(self.V * factor)), K=max(1, round(self.K * factor)),
            P=max(1, round(self.P * factor)), n_nonzero=max(1, round(self.n_nonzero * factor)),
        )
        base.update(overrides)
        return SimConfig1(**{**asdict(self), **base})


@dataclass(frozen=True)
class SimConfig2:
    guide_map: str
    frequencies: str
    record_counts: str
    beta_scale: float = 3.0
    beta_offset: float = 0.6
    nonzero_fraction: float = 0.10
    w_value: float = 6.0
    lambda_baseline: float = 1.0
    theta_concentration: float | None = None
    censor_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.beta_scale <= 0 or self.beta_offset <= 0:
            raise ValueError("beta_scale and beta_offset must be positive")


@dataclass
class SimulatedDataset:
    corpus: Corpus
    survival: list
    w: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    zbar: np.ndarray
    z: np.ndarray
    z_indptr: np.ndarray
    guide: GuideMap | None = None
    flags: dict = field(default_factory=dict)

    @property
    def time(self) -> np.ndarray:
        return np.array([o.time for o in self.survival])

    @property
    def event(self) -> np.ndarray:
        return np.array([o.event for o in self.survival], dtype=np.int64)


def sample_survival_times(zbar, w, lam: float, rng: np.random.Generator) -> np.ndarray:
    """``T = -log(U) * exp(-w . zbar) / lambda`` with ``U ~ Uniform(0, 1)``."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    eta = np.asarray(zbar, dtype=np.float64) @ np.asarray(w, dtype=np.float64)
    u = rng.uniform(size=eta.shape[0])
    while (zero := u == 0.0).any():
        u[zero] = rng.uniform(size=int(zero.sum()))
    return -np.log(u) * np.exp(-eta) / lam


def _sample_tokens(rng, theta, phi, lengths):
    """Topic then word per token; returns ``z``, ``x`` flat plus patient pointers."""
    P, K = theta.shape
    indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    z = np.empty(indptr[-1], dtype=np.int64)
    for j in range(P):
        if lengths[j]:
            z[indptr[j]:indptr[j + 1]] = rng.choice(K, size=lengths[j], p=theta[j])
    x = np.empty_like(z)
    for k in range(K):
        sel = np.flatnonzero(z == k)
        if sel.size:
            x[sel] = rng.choice(phi.shape[1], size=sel.size, p=phi[k])
    return z, x, indptr


def _assemble(rng, theta, phi, lengths, w, lam, censor_rate, patient_ids, vocab, guide=None, flags=None):
    P, K = theta.shape
    z, x, indptr = _sample_tokens(rng, theta, phi, lengths)
    zbar = np.zeros((P, K))
    for j in range(P):
        if lengths[j]:
            zbar[j] = np.bincount(z[indptr[j]:indptr[j + 1]], minlength=K) / lengths[j]
    T = sample_survival_times(zbar, w, lam, rng)
    delta = np.ones(P, dtype=np.int64)
    if censor_rate > 0:
        C = rng.exponential(1.0 / censor_rate, size=P)
        delta = (T <= C).astype(np.int64)
        T = np.minimum(T, C)
    rows = np.repeat(np.arange(P), lengths)
    triples = [(patient_ids[j], 0, int(v), 1) for j, v in zip(rows, x)]
    corpus = build_corpus((vocab,), triples, patient_ids)
    survival = [SurvivalOutcome(patient_ids[j], float(T[j]), int(delta[j])) for j in range(P)]
    return SimulatedDataset(corpus, survival, w, theta, phi, zbar, z, indptr, guide, flags or {})


def _ids(prefix: str, n: int) -> list[str]:
    width = max(1, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def simulate_design1(config: SimConfig1 = SimConfig1()) -> SimulatedDataset:
    """Generative-model simulation with a sparse planted coefficient vector."""
    rng = np.random.default_rng(config.seed)
    K, V, P = config.K, config.V, config.P
    alpha = rng.gamma(config.alpha_shape, config.alpha_scale, size=K)
    beta = rng.gamma(config.beta_shape, config.beta_scale, size=V)
    theta = rng.dirichlet(alpha, size=P)
    phi = rng.dirichlet(beta, size=K)
    w = np.zeros(K)
    w[rng.choice(K, size=config.n_nonzero, replace=False)] = config.w_value
    vocab = Vocabulary(0, "word", tuple(_ids("w", V)))
    lengths = np.full(P, config.tokens_per_patient, dtype=np.int64)
    return _assemble(rng, theta, phi, lengths, w, config.lambda_baseline, config.censor_rate,
                     _ids("p", P), vocab)


def _read_patient_table(path, value_cols: int):
    lines = _data_lines(path)
    next(lines, None)
    rows = []
    for lineno, fields in lines:
        if len(fields) != value_cols + 1:
            raise DataError(f"expected {value_cols + 1} fields, got {len(fields)}", path, lineno)
        rows.append((lineno, fields))
    return rows


def load_frequencies(path, phenotype_ids) -> tuple[list[str], np.ndarray]:
    """Per-patient phenotype frequencies: TSV ``patient_id  phenotype_id  count``."""
    col = {p: k for k, p in enumerate(phenotype_ids)}
    table: dict[str, np.ndarray] = {}
    for lineno, (pid, ph, raw) in _read_patient_table(path, 2):
        if ph not in col:
            raise DataError(f"unknown phenotype {ph!r}", path, lineno)
        try:
            val = float(raw)
        except ValueError:
            raise DataError(f"frequency {raw!r} is not a number", path, lineno) from None
        if val < 0:
            raise DataError("frequencies must be nonnegative", path, lineno)
        table.setdefault(pid, np.zeros(len(col)))[col[ph]] += val
    ids = sorted(table)
    return ids, np.array([table[p] for p in ids]).reshape(len(ids), len(col))


def load_record_counts(path) -> dict[str, int]:
    """Per-patient record counts: TSV ``patient_id  n_records``."""
    out = {}
    for lineno, (pid, raw) in _read_patient_table(path, 1):
        try:
            n = int(raw)
        except ValueError:
            raise DataError(f"record count {raw!r} is not an integer", path, lineno) from None
        if n < 0:
            raise DataError("record counts must be nonnegative", path, lineno)
        out[pid] = n
    return out


def design2_beta(guide: GuideMap, vocab: Vocabulary, scale: float = 3.0, offset: float = 0.6) -> np.ndarray:
    """``(K, V)`` Dirichlet parameters: ``scale * mapped + offset``."""
    B = np.zeros((guide.n_topics, vocab.size))
    for f, ks in guide.mapping.items():
        B[list(ks), vocab.index[f]] = 1.0
    return B * scale + offset


def simulate_design2(config: SimConfig2) -> SimulatedDataset:
    """Simulation driven by a guide map and empirical per-patient inputs."""
    rng = np.random.default_rng(config.seed)
    guide = load_guide_map(config.guide_map)
    vocab = Vocabulary(0, "icd", tuple(sorted(guide.mapping)))
    K = guide.n_topics
    beta = design2_beta(guide, vocab, config.beta_scale, config.beta_offset)
    phi = np.array([rng.dirichlet(b) for b in beta])
    ids, freq = load_frequencies(config.frequencies, guide.phenotype_ids)
    counts = load_record_counts(config.record_counts)
    missing = [p for p in ids if p not in counts]
    if missing:
        raise DataError(f"no record count for patient {missing[0]!r}", config.record_counts)
    totals = freq.sum(axis=1)
    empty = totals == 0
    if empty.any():
        warnings.warn(f"{int(empty.sum())} patients have all-zero frequencies; using uniform topic mixtures")
    theta = np.where(empty[:, None], 1.0 / K, freq / np.where(empty, 1.0, totals)[:, None])
    if config.theta_concentration is not None:
        theta = np.array([rng.dirichlet(config.theta_concentration * t + 1e-12) for t in theta])
    n_nonzero = int(round(config.nonzero_fraction * K))
    w = np.zeros(K)
    w[rng.choice(K, size=n_nonzero, replace=False)] = config.w_value
    lengths = np.array([counts[p] for p in ids], dtype=np.int64)
    flags = {"uniform_theta_patients": [p for p, e in zip(ids, empty) if e]}
    return _assemble(rng, theta, phi, lengths, w, config.lambda_baseline, config.censor_rate,
                     ids, vocab, guide, flags)


def make_design2_inputs(out_dir, P: int = 500, K: int = 40, V: int = 200, seed: int = 0) -> dict:
    """Write a synthetic stand-in for the empirical Design-2 inputs.

    Every phenotype gets 2-6 defining features, each feature maps to one or
    two phenotypes, patients carry a handful of phenotypes with Poisson
    counts, and record counts are ``1 + Poisson(12)``.
    """
    from pathlib import Path

    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if V < K:
        raise ValueError("need at least one feature per phenotype")
    feats = _ids("icd", V)
    phenos = _ids("ph", K)
    pairs = set()
    perm = rng.permutation(V)
    for k in range(K):
        pairs.add((feats[perm[k]], phenos[k]))
    for v in perm[K:]:
        for k in rng.choice(K, size=1 + int(rng.uniform() < 0.2), replace=False):
            pairs.add((feats[v], phenos[k]))
    paths = {"guide_map": out / "guide_map.tsv", "frequencies": out / "frequencies.tsv",
             "record_counts": out / "record_counts.tsv"}
    with open(paths["guide_map"], "w") as fh:
        fh.write("feature_id\tphenotype_id\n")
        for f, p in sorted(pairs):
            fh.write(f"{f}\t{p}\n")
    pids = _ids("p", P)
    with open(paths["frequencies"], "w") as fh, open(paths["record_counts"], "w") as fc:
        fh.write("patient_id\tphenotype_id\tcount\n")
        fc.write("patient_id\tn_records\n")
        for pid in pids:
            for k in rng.choice(K, size=min(K, 1 + rng.poisson(3)), replace=False):
                fh.write(f"{pid}\t{phenos[k]}\t{1 + rng.poisson(2)}\n")
            fc.write(f"{pid}\t{1 + rng.poisson(12)}\n")
    return {k: str(v) for k, v in paths.items()}
