"""Multi-modal sparse count corpora, survival outcomes and guide maps.

A corpus holds, for every modality, a CSR-style table of (patient, feature,
count) triples. Patients are ordered lexicographically by ``patient_id`` and
that order is fixed for the lifetime of the object; every other structure in
the package (survival outcomes, prior matrices, variational state) is aligned
to it.

File formats (UTF-8, tab separated, lines starting with ``#`` are ignored):

* corpus:   ``patient_id  modality  feature_id  count``
* survival: ``patient_id  time  event``
* guide:    ``feature_id  phenotype_id``
* schema:   JSON ``{"modalities": [{"name": ..., "features": [...]}, ...]}``
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

CORPUS_HEADER = ("patient_id", "modality", "feature_id", "count")
SURVIVAL_HEADER = ("patient_id", "time", "event")
GUIDE_HEADER = ("feature_id", "phenotype_id")


class DataError(ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass(frozen=True)
class Vocabulary:
    modality_id: int
    name: str
    feature_ids: tuple[str, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.feature_ids) < 1:
            raise DataError(f"modality {self.name!r} has an empty vocabulary")
        index = {f: i for i, f in enumerate(self.feature_ids)}
        if len(index) != len(self.feature_ids):
            raise DataError(f"duplicate feature ids in modality {self.name!r}")
        object.__setattr__(self, "index", index)

    @property
    def size(self) -> int:
        return len(self.feature_ids)


@dataclass(frozen=True)
class ModalityCounts:
    """CSR table of one modality: patient ``j`` owns ``words[indptr[j]:indptr[j+1]]``.

    Feature indices within a patient are sorted and unique.
    """

    indptr: np.ndarray
    words: np.ndarray
    counts: np.ndarray

    def lengths(self) -> np.ndarray:
        rows = np.repeat(np.arange(len(self.indptr) - 1), np.diff(self.indptr))
        return np.bincount(rows, weights=self.counts, minlength=len(self.indptr) - 1).astype(np.int64)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    words: tuple[np.ndarray, ...]
    counts: tuple[np.ndarray, ...]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([int(c.sum()) for c in self.counts], dtype=np.int64)


@dataclass(frozen=True)
class Corpus:
    patient_ids: tuple[str, ...]
    vocabularies: tuple[Vocabulary, ...]
    modalities: tuple[ModalityCounts, ...]

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_modalities(self) -> int:
        return len(self.vocabularies)

    def lengths(self) -> np.ndarray:
        """``N[j, m]``: token count of patient ``j`` in modality ``m``."""
        out = np.zeros((self.n_patients, self.n_modalities), dtype=np.int64)
        for m, mod in enumerate(self.modalities):
            out[:, m] = mod.lengths()
        return out

    def patient(self, j: int) -> PatientRecord:
        return PatientRecord(
            self.patient_ids[j],
            tuple(m.words[m.indptr[j]:m.indptr[j + 1]] for m in self.modalities),
            tuple(m.counts[m.indptr[j]:m.indptr[j + 1]] for m in self.modalities),
        )

    def __iter__(self) -> Iterator[PatientRecord]:
        for j in range(self.n_patients):
            yield self.patient(j)

    def modality_index(self, name_or_id) -> int:
        if isinstance(name_or_id, (int, np.integer)):
            if not 0 <= name_or_id < self.n_modalities:
                raise DataError(f"unknown modality index {name_or_id}")
            return int(name_or_id)
        for v in self.vocabularies:
            if v.name == name_or_id:
                return v.modality_id
        raise DataError(f"unknown modality {name_or_id!r}")

    def dense(self, m: int) -> np.ndarray:
        mod = self.modalities[m]
        out = np.zeros((self.n_patients, self.vocabularies[m].size), dtype=np.int64)
        rows = np.repeat(np.arange(self.n_patients), np.diff(mod.indptr))
        out[rows, mod.words] = mod.counts
        return out

    def subset(self, indices: Sequence[int]) -> "Corpus":
        """Patients at ``indices``, re-sorted by id."""
        idx = sorted(set(int(i) for i in indices), key=lambda i: self.patient_ids[i])
        mods = []
        for mod in self.modalities:
            sizes = np.array([mod.indptr[i + 1] - mod.indptr[i] for i in idx], dtype=np.int64)
            indptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
            sl = [slice(mod.indptr[i], mod.indptr[i + 1]) for i in idx]
            words = np.concatenate([mod.words[s] for s in sl]) if sl else np.zeros(0, np.int64)
            counts = np.concatenate([mod.counts[s] for s in sl]) if sl else np.zeros(0, np.int64)
            mods.append(ModalityCounts(indptr, words.astype(np.int64), counts.astype(np.int64)))
        return Corpus(tuple(self.patient_ids[i] for i in idx), self.vocabularies, tuple(mods))


def build_corpus(
    vocabularies: Sequence[Vocabulary],
    triples: Iterable[tuple[str, int, int, int]],
    patient_ids: Iterable[str] = (),
) -> Corpus:
    """Assemble a corpus from ``(patient_id, modality, feature_index, count)``.

    Duplicate (patient, modality, feature) entries are summed. Extra
    ``patient_ids`` without any triple become empty patients.
    """
    vocabularies = tuple(vocabularies)
    rows = list(triples)
    ids = sorted(set(patient_ids) | {r[0] for r in rows})
    pos = {p: j for j, p in enumerate(ids)}
    P = len(ids)
    mods = []
    for m, vocab in enumerate(vocabularies):
        sel = [(pos[p], f, c) for p, mm, f, c in rows if mm == m]
        if sel:
            arr = np.array(sel, dtype=np.int64)
            key = arr[:, 0] * vocab.size + arr[:, 1]
            uniq, inv = np.unique(key, return_inverse=True)
            counts = np.bincount(inv, weights=arr[:, 2]).astype(np.int64)
            pj, words = np.divmod(uniq, vocab.size)
        else:
            counts = pj = words = np.zeros(0, dtype=np.int64)
        indptr = np.zeros(P + 1, dtype=np.int64)
        np.add.at(indptr, pj + 1, 1)
        mods.append(ModalityCounts(np.cumsum(indptr), words.astype(np.int64), counts))
    return Corpus(tuple(ids), vocabularies, tuple(mods))


def _data_lines(path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def _check_header(path, lines, expected) -> None:
    try:
        lineno, fields = next(lines)
    except StopIteration:
        raise DataError("missing header", path) from None
    if tuple(fields) != expected:
        raise DataError(f"expected header {list(expected)}, got {fields}", path, lineno)


# -- schema -----------------------------------------------------------------

def load_schema(path) -> tuple[Vocabulary, ...]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return tuple(
            Vocabulary(m, spec["name"], tuple(spec["features"]))
            for m, spec in enumerate(doc["modalities"])
        )
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed schema: {exc}", path) from None


def write_schema(vocabularies: Sequence[Vocabulary], path) -> None:
    doc = {"modalities": [{"name": v.name, "features": list(v.feature_ids)} for v in vocabularies]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def infer_schema(path) -> tuple[Vocabulary, ...]:
    """Vocabularies from the features present in a corpus file (sorted)."""
    lines = _data_lines(path)
    _check_header(path, lines, CORPUS_HEADER)
    seen: dict[str, set] = {}
    for _, fields in lines:
        if len(fields) != 4:
            continue
        seen.setdefault(fields[1], set()).add(fields[2])
    return tuple(Vocabulary(m, name, tuple(sorted(seen[name]))) for m, name in enumerate(sorted(seen)))


# -- corpus -----------------------------------------------------------------

def load_corpus(path, vocabularies: Sequence[Vocabulary], patient_ids: Iterable[str] = ()) -> Corpus:
    """Read a corpus TSV and validate every token against ``vocabularies``."""
    vocabularies = tuple(vocabularies)
    by_name = {v.name: v for v in vocabularies}
    lines = _data_lines(path)
    _check_header(path, lines, CORPUS_HEADER)
    triples = []
    for lineno, fields in lines:
        if len(fields) != 4:
            raise DataError(f"expected 4 fields, got {len(fields)}", path, lineno)
        pid, mname, fid, raw = fields
        vocab = by_name.get(mname)
        if vocab is None:
            raise DataError(f"unknown modality {mname!r}", path, lineno)
        f = vocab.index.get(fid)
        if f is None:
            raise DataError(f"unknown feature {fid!r} in modality {mname!r}", path, lineno)
        try:
            count = int(raw)
        except ValueError:
            raise DataError(f"count {raw!r} is not an integer", path, lineno) from None
        if count <= 0:
            raise DataError(f"count must be positive, got {count}", path, lineno)
        triples.append((pid, vocab.modality_id, f, count))
    return build_corpus(vocabularies, triples, patient_ids)


def write_corpus(corpus: Corpus, path, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("\t".join(CORPUS_HEADER) + "\n")
        for j, pid in enumerate(corpus.patient_ids):
            for vocab, mod in zip(corpus.vocabularies, corpus.modalities):
                for f, c in zip(mod.words[mod.indptr[j]:mod.indptr[j + 1]],
                                mod.counts[mod.indptr[j]:mod.indptr[j + 1]]):
                    fh.write(f"{pid}\t{vocab.name}\t{vocab.feature_ids[f]}\t{c}\n")


# -- survival ---------------------------------------------------------------

@dataclass(frozen=True)
class SurvivalOutcome:
    patient_id: str
    time: float
    event: int


def survival_arrays(outcomes: Sequence[SurvivalOutcome]) -> tuple[np.ndarray, np.ndarray]:
    """``(time, event)`` float/int arrays."""
    time = np.array([o.time for o in outcomes], dtype=np.float64)
    event = np.array([o.event for o in outcomes], dtype=np.int64)
    return time, event


def load_survival(path, corpus: Corpus | Sequence[str]) -> list[SurvivalOutcome]:
    """Outcomes aligned to the corpus patient order."""
    ids = corpus.patient_ids if isinstance(corpus, Corpus) else tuple(corpus)
    lines = _data_lines(path)
    _check_header(path, lines, SURVIVAL_HEADER)
    found: dict[str, SurvivalOutcome] = {}
    for lineno, fields in lines:
        if len(fields) != 3:
            raise DataError(f"expected 3 fields, got {len(fields)}", path, lineno)
        pid, raw_t, raw_e = fields
        try:
            t = float(raw_t)
        except ValueError:
            raise DataError(f"time {raw_t!r} is not a number", path, lineno) from None
        if not np.isfinite(t) or t <= 0:
            raise DataError(f"time must be positive, got {raw_t}", path, lineno)
        if raw_e not in ("0", "1"):
            raise DataError(f"event must be 0 or 1, got {raw_e!r}", path, lineno)
        if pid in found:
            raise DataError(f"duplicate patient {pid!r}", path, lineno)
        found[pid] = SurvivalOutcome(pid, t, int(raw_e))
    missing = [p for p in ids if p not in found]
    if missing:
        raise DataError(f"missing survival record for patient {missing[0]!r}"
                        + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""), path)
    extra = len(found) - len(ids)
    if extra:
        warnings.warn(f"{path}: {extra} survival records for patients not in the corpus ignored")
    return [found[p] for p in ids]


def write_survival(outcomes: Sequence[SurvivalOutcome], path, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write("\t".join(SURVIVAL_HEADER) + "\n")
        for o in outcomes:
            fh.write(f"{o.patient_id}\t{float(o.time)!r}\t{o.event}\n")


# -- guide map --------------------------------------------------------------

@dataclass(frozen=True)
class GuideMap:
    """Feature -> phenotype relation; ``phenotype_ids`` fixes the topic index."""

    mapping: dict
    phenotype_ids: tuple[str, ...]

    def __post_init__(self):
        if not self.phenotype_ids:
            raise DataError("guide map defines no phenotypes")
        used = {k for ks in self.mapping.values() for k in ks}
        if used != set(range(len(self.phenotype_ids))):
            raise DataError("every phenotype must be mapped from at least one feature")

    @property
    def n_topics(self) -> int:
        return len(self.phenotype_ids)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "GuideMap":
        pairs = list(pairs)
        phenos = tuple(sorted({p for _, p in pairs}))
        pos = {p: k for k, p in enumerate(phenos)}
        mapping: dict[str, set] = {}
        for f, p in pairs:
            mapping.setdefault(f, set()).add(pos[p])
        return cls({f: tuple(sorted(ks)) for f, ks in mapping.items()}, phenos)

    def pairs(self) -> list[tuple[str, str]]:
        return [(f, self.phenotype_ids[k]) for f in sorted(self.mapping) for k in self.mapping[f]]


def load_guide_map(path) -> GuideMap:
    lines = _data_lines(path)
    _check_header(path, lines, GUIDE_HEADER)
    pairs = []
    for lineno, fields in lines:
        if len(fields) != 2:
            raise DataError(f"expected 2 fields, got {len(fields)}", path, lineno)
        pairs.append((fields[0], fields[1]))
    return GuideMap.from_pairs(pairs)


def write_guide_map(guide: GuideMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(GUIDE_HEADER) + "\n")
        for f, p in guide.pairs():
            fh.write(f"{f}\t{p}\n")


@dataclass(frozen=True)
class PhecodeCountMatrix:
    counts: np.ndarray
    patient_ids: tuple[str, ...]
    phenotype_ids: tuple[str, ...]

    def filter_prevalence(self, min_fraction: float) -> "PhecodeCountMatrix":
        """Keep phenotypes observed in more than ``min_fraction`` of patients."""
        keep = (self.counts > 0).mean(axis=0) > min_fraction
        return PhecodeCountMatrix(
            self.counts[:, keep], self.patient_ids,
            tuple(p for p, k in zip(self.phenotype_ids, keep) if k),
        )


def feature_phenotype_matrix(vocab: Vocabulary, guide: GuideMap) -> np.ndarray:
    """0/1 matrix ``(V, K)``: feature ``v`` maps to phenotype ``k``."""
    A = np.zeros((vocab.size, guide.n_topics), dtype=np.int64)
    for f, ks in guide.mapping.items():
        v = vocab.index.get(f)
        if v is not None:
            A[v, list(ks)] = 1
    return A


def phecode_counts(corpus: Corpus, guide: GuideMap, guide_modality=0) -> PhecodeCountMatrix:
    """Per-patient phenotype counts from the guide modality's tokens.

    Repeated tokens count with multiplicity and a token mapping to several
    phenotypes increments each of them.
    """
    m = corpus.modality_index(guide_modality)
    vocab = corpus.vocabularies[m]
    A = feature_phenotype_matrix(vocab, guide)
    unmapped = A.sum(axis=1) == 0
    mod = corpus.modalities[m]
    if mod.words.size and unmapped[mod.words].any():
        n = int(mod.counts[unmapped[mod.words]].sum())
        warnings.warn(f"{n} guide-modality tokens have no phenotype mapping")
    U = corpus.dense(m) @ A
    return PhecodeCountMatrix(U, corpus.patient_ids, guide.phenotype_ids)
