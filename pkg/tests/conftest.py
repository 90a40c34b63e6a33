import numpy as np
import pytest

from survtopics.corpus import Vocabulary, build_corpus


def block_corpus(n_patients=40, block=5, tokens=30, seed=0, n_modalities=1):
    """Patients drawing words from one of two disjoint blocks per modality."""
    rng = np.random.default_rng(seed)
    vocabs = tuple(Vocabulary(m, f"m{m}", tuple(f"w{m}_{i}" for i in range(2 * block)))
                   for m in range(n_modalities))
    rows = []
    for j in range(n_patients):
        b = j % 2
        for m in range(n_modalities):
            words = rng.integers(0, block, size=tokens) + b * block
            for v, c in zip(*np.unique(words, return_counts=True)):
                rows.append((f"p{j:03d}", m, int(v), int(c)))
    return build_corpus(vocabs, rows)


def block_survival(corpus, seed=0):
    """Block-1 patients fail faster; roughly a quarter are censored."""
    rng = np.random.default_rng(seed)
    group = np.array([int(p[1:]) % 2 for p in corpus.patient_ids])
    time = rng.exponential(1.0 / np.where(group == 1, 4.0, 1.0))
    event = (rng.uniform(size=time.size) < 0.75).astype(np.int64)
    event[0] = 1
    return time, event


@pytest.fixture
def toy_corpus():
    return block_corpus()
