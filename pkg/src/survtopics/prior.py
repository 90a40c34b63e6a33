"""Per-patient phenotype guide probabilities from phenotype count data.

Each phenotype column of the count matrix is explained by two parallel
two-component mixtures: a Poisson mixture on the raw counts and a Gaussian
mixture on ``log(u + 1)``. The foreground (larger mean) responsibility of
each patient under the two fits is averaged into the guide probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

PI_FLOOR = 1e-6
SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class EMConfig:
    tol: float = 1e-8
    max_iter: int = 500
    sigma_floor: float = SIGMA_FLOOR


@dataclass
class PoissonMixtureFit:
    rho0: float
    rho1: float
    weight: float
    responsibilities: np.ndarray = field(repr=False)
    degenerate: bool = False
    n_iter: int = 0
    loglik: list = field(default_factory=list, repr=False)

    def params(self) -> dict:
        return {"rho0": self.rho0, "rho1": self.rho1, "weight": self.weight,
                "degenerate": self.degenerate}

    def posterior(self, counts) -> np.ndarray:
        """Foreground responsibility of new counts under the fitted mixture."""
        u = np.asarray(counts, dtype=np.float64)
        if self.degenerate:
            return np.full(u.shape, 0.5)
        return _poisson_estep(u, self.rho0, self.rho1, self.weight)[0]


@dataclass
class GaussianMixtureFit:
    mu0: float
    mu1: float
    sigma0: float
    sigma1: float
    weight: float
    responsibilities: np.ndarray = field(repr=False)
    degenerate: bool = False
    n_iter: int = 0
    loglik: list = field(default_factory=list, repr=False)

    def params(self) -> dict:
        return {"mu0": self.mu0, "mu1": self.mu1, "sigma0": self.sigma0,
                "sigma1": self.sigma1, "weight": self.weight, "degenerate": self.degenerate}

    def posterior(self, counts) -> np.ndarray:
        x = transform_counts(counts)
        if self.degenerate:
            return np.full(x.shape, 0.5)
        return _gauss_estep(x, self.mu0, self.mu1, self.sigma0, self.sigma1, self.weight)[0]


def transform_counts(counts) -> np.ndarray:
    """``log(u + 1)``, defined at the zero counts that dominate EHR data."""
    return np.log1p(np.asarray(counts, dtype=np.float64))


def _init_means(x: np.ndarray, offset: float) -> tuple[float, float]:
    lo = float(np.percentile(x, 25)) + offset
    hi = float(np.percentile(x, 90)) + offset
    if hi <= lo:
        # sparse columns: the 25th and 90th percentiles coincide at zero
        hi = float(x.max()) + offset
    return lo, hi


def _poisson_estep(u, rho0, rho1, weight):
    lf = np.log(weight) + u * np.log(rho1) - rho1 - gammaln(u + 1)
    lb = np.log1p(-weight) + u * np.log(rho0) - rho0 - gammaln(u + 1)
    norm = np.logaddexp(lf, lb)
    return np.exp(lf - norm), float(norm.sum())


def _gauss_logpdf(x, mu, sigma):
    return -0.5 * np.log(2 * np.pi * sigma**2) - (x - mu) ** 2 / (2 * sigma**2)


def _gauss_estep(x, mu0, mu1, s0, s1, weight):
    lf = np.log(weight) + _gauss_logpdf(x, mu1, s1)
    lb = np.log1p(-weight) + _gauss_logpdf(x, mu0, s0)
    norm = np.logaddexp(lf, lb)
    return np.exp(lf - norm), float(norm.sum())


def _clip_weight(w):
    return float(np.clip(w, 1e-12, 1 - 1e-12))


def _collapsed(a: float, b: float) -> bool:
    """True when two fitted component locations are numerically indistinguishable."""
    return abs(b - a) <= 1e-6 * max(1.0, abs(a), abs(b))


def fit_poisson_mixture(counts, config: EMConfig = EMConfig()) -> PoissonMixtureFit:
    """Two-component Poisson mixture by EM; the larger rate is the foreground.

    Returns responsibilities of 0.5 with ``degenerate=True`` when all counts
    are identical.
    """
    u = np.asarray(counts, dtype=np.float64)
    if u.size == 0 or np.unique(u).size < 2:
        return PoissonMixtureFit(float(u.mean()) if u.size else 0.0, float(u.mean()) if u.size else 0.0,
                                 0.5, np.full(u.shape, 0.5), degenerate=True)
    tiny = 1e-12
    rho0, rho1 = _init_means(u, 0.1)
    weight = 0.5
    history = []
    prev = -np.inf
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        r, ll = _poisson_estep(u, rho0, rho1, weight)
        history.append(ll)
        if np.isfinite(prev) and abs(ll - prev) <= config.tol * abs(prev):
            break
        prev = ll
        weight = _clip_weight(r.mean())
        rho1 = max(float((r * u).sum() / max(r.sum(), tiny)), tiny)
        rho0 = max(float(((1 - r) * u).sum() / max((1 - r).sum(), tiny)), tiny)
    r, _ = _poisson_estep(u, rho0, rho1, weight)
    if rho0 > rho1:
        rho0, rho1, weight, r = rho1, rho0, 1 - weight, 1 - r
    if _collapsed(rho0, rho1):
        # both components converged onto one rate: no separation to report
        return PoissonMixtureFit(rho0, rho1, weight, np.full(u.shape, 0.5), True, n_iter, history)
    return PoissonMixtureFit(rho0, rho1, weight, r, False, n_iter, history)


def _fit_gaussian_em(x: np.ndarray, config: EMConfig) -> GaussianMixtureFit:
    if x.size == 0 or np.unique(x).size < 2:
        m = float(x.mean()) if x.size else 0.0
        return GaussianMixtureFit(m, m, config.sigma_floor, config.sigma_floor, 0.5,
                                  np.full(x.shape, 0.5), degenerate=True)
    floor = config.sigma_floor
    mu0, mu1 = _init_means(x, 0.0)
    s0 = s1 = max(float(x.std()), floor)
    weight = 0.5
    history = []
    prev = -np.inf
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        r, ll = _gauss_estep(x, mu0, mu1, s0, s1, weight)
        history.append(ll)
        if np.isfinite(prev) and abs(ll - prev) <= config.tol * abs(prev):
            break
        prev = ll
        weight = _clip_weight(r.mean())
        w1, w0 = r.sum(), (1 - r).sum()
        if w1 > 0:
            mu1 = float((r * x).sum() / w1)
            s1 = max(float(np.sqrt((r * (x - mu1) ** 2).sum() / w1)), floor)
        if w0 > 0:
            mu0 = float(((1 - r) * x).sum() / w0)
            s0 = max(float(np.sqrt(((1 - r) * (x - mu0) ** 2).sum() / w0)), floor)
    r, _ = _gauss_estep(x, mu0, mu1, s0, s1, weight)
    if mu0 > mu1:
        mu0, mu1, s0, s1, weight, r = mu1, mu0, s1, s0, 1 - weight, 1 - r
    if _collapsed(mu0, mu1):
        return GaussianMixtureFit(mu0, mu1, s0, s1, weight, np.full(x.shape, 0.5), True, n_iter, history)
    return GaussianMixtureFit(mu0, mu1, s0, s1, weight, r, False, n_iter, history)


def fit_gaussian_mixture(counts, config: EMConfig = EMConfig()) -> GaussianMixtureFit:
    """Two-component Gaussian mixture on log-transformed counts."""
    return _fit_gaussian_em(transform_counts(counts), config)


# -- prior matrices ---------------------------------------------------------

@dataclass
class PriorModel:
    """Fitted per-phenotype mixtures, reusable on held-out patients.

    ``kind`` is ``"mixture"`` or ``"binary"``.
    """

    kind: str
    phenotype_ids: tuple
    epsilon: float = PI_FLOOR
    poisson: list = field(default_factory=list)
    gaussian: list = field(default_factory=list)

    def apply(self, counts: np.ndarray) -> np.ndarray:
        """Guide probabilities for rows of phenotype counts ``(n, K)``."""
        u = np.atleast_2d(np.asarray(counts))
        if self.kind == "binary":
            return np.where(u > 0, 1.0, self.epsilon)
        out = np.empty(u.shape, dtype=np.float64)
        for k, (pf, gf) in enumerate(zip(self.poisson, self.gaussian)):
            if pf.degenerate and gf.degenerate:
                out[:, k] = np.where(u[:, k] > 0, 1.0, self.epsilon)
            else:
                out[:, k] = 0.5 * (pf.posterior(u[:, k]) + gf.posterior(u[:, k]))
        return np.clip(out, self.epsilon, 1.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "phenotype_ids": list(self.phenotype_ids),
            "epsilon": self.epsilon,
            "poisson": [f.params() for f in self.poisson],
            "gaussian": [f.params() for f in self.gaussian],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PriorModel":
        pois = [PoissonMixtureFit(d["rho0"], d["rho1"], d["weight"], np.zeros(0), d["degenerate"])
                for d in doc.get("poisson", [])]
        gaus = [GaussianMixtureFit(d["mu0"], d["mu1"], d["sigma0"], d["sigma1"], d["weight"],
                                   np.zeros(0), d["degenerate"])
                for d in doc.get("gaussian", [])]
        return cls(doc["kind"], tuple(doc["phenotype_ids"]), doc["epsilon"], pois, gaus)


def _counts_matrix(u) -> tuple[np.ndarray, tuple]:
    if hasattr(u, "counts"):
        return np.asarray(u.counts), tuple(u.phenotype_ids)
    arr = np.asarray(u)
    return arr, tuple(str(k) for k in range(arr.shape[1]))


def binary_prior(u, epsilon: float = PI_FLOOR) -> np.ndarray:
    """1 where the phenotype was observed, ``epsilon`` elsewhere."""
    counts, _ = _counts_matrix(u)
    return np.where(counts > 0, 1.0, epsilon)


def fit_prior_model(u, config: EMConfig = EMConfig(), epsilon: float = PI_FLOOR) -> PriorModel:
    counts, phenos = _counts_matrix(u)
    if counts.ndim != 2 or counts.shape[1] < 1:
        raise ValueError("phenotype count matrix needs at least one column")
    pois = [fit_poisson_mixture(counts[:, k], config) for k in range(counts.shape[1])]
    gaus = [fit_gaussian_mixture(counts[:, k], config) for k in range(counts.shape[1])]
    return PriorModel("mixture", phenos, epsilon, pois, gaus)


def compute_prior(u, config: EMConfig = EMConfig(), epsilon: float = PI_FLOOR,
                  return_model: bool = False):
    """Average of the Poisson and Gaussian foreground responsibilities.

    Columns where both fits are degenerate fall back to the binary rule.
    """
    model = fit_prior_model(u, config, epsilon)
    counts, _ = _counts_matrix(u)
    pi = np.empty(counts.shape, dtype=np.float64)
    for k, (pf, gf) in enumerate(zip(model.poisson, model.gaussian)):
        if pf.degenerate and gf.degenerate:
            pi[:, k] = np.where(counts[:, k] > 0, 1.0, epsilon)
        else:
            pi[:, k] = 0.5 * (pf.responsibilities + gf.responsibilities)
    pi = np.clip(pi, epsilon, 1.0)
    return (pi, model) if return_model else pi


def write_prior(pi: np.ndarray, patient_ids, phenotype_ids, path, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("patient_id\tphenotype_id\tpi\n")
        for j, pid in enumerate(patient_ids):
            for k, ph in enumerate(phenotype_ids):
                fh.write(f"{pid}\t{ph}\t{float(pi[j, k])!r}\n")


def load_prior(path, patient_ids, phenotype_ids) -> np.ndarray:
    from .corpus import DataError, _data_lines

    prow = {p: j for j, p in enumerate(patient_ids)}
    pcol = {p: k for k, p in enumerate(phenotype_ids)}
    pi = np.full((len(prow), len(pcol)), np.nan)
    lines = _data_lines(path)
    next(lines, None)
    for lineno, fields in lines:
        if len(fields) != 3:
            raise DataError(f"expected 3 fields, got {len(fields)}", path, lineno)
        j, k = prow.get(fields[0]), pcol.get(fields[1])
        if j is None or k is None:
            continue
        pi[j, k] = float(fields[2])
    if np.isnan(pi).any():
        j, k = map(int, np.argwhere(np.isnan(pi))[0])
        raise DataError(f"no prior for patient {patient_ids[j]!r}, phenotype {phenotype_ids[k]!r}", path)
    return pi
