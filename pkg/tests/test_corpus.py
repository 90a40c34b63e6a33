import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survtopics.corpus import (
    DataError, GuideMap, Vocabulary, build_corpus, infer_schema, load_corpus, load_guide_map,
    load_schema, load_survival, phecode_counts, write_corpus, write_guide_map, write_schema,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def vocabs():
    return (Vocabulary(0, "icd", ("f0", "f1", "f2")), Vocabulary(1, "lab", ("a", "b")))


def test_counts_sum_for_single_patient(tmp_path, vocabs):
    p = _write(tmp_path / "c.tsv", "patient_id\tmodality\tfeature_id\tcount\n"
                                   "p1\ticd\tf0\t2\np1\ticd\tf1\t1\n")
    c = load_corpus(p, vocabs)
    assert c.patient_ids == ("p1",)
    assert c.lengths()[0, 0] == 3
    assert c.lengths()[0, 1] == 0


def test_empty_file_with_header(tmp_path, vocabs):
    p = _write(tmp_path / "c.tsv", "patient_id\tmodality\tfeature_id\tcount\n")
    c = load_corpus(p, vocabs)
    assert c.n_patients == 0
    assert c.lengths().shape == (0, 2)


def test_unknown_feature_names_line(tmp_path, vocabs):
    p = _write(tmp_path / "c.tsv", "# comment\npatient_id\tmodality\tfeature_id\tcount\n"
                                   "p1\ticd\tf0\t1\np2\ticd\tzz\t1\n")
    with pytest.raises(DataError, match=r"c\.tsv:4.*'zz'"):
        load_corpus(p, vocabs)


@pytest.mark.parametrize("row, msg", [
    ("p1\ticd\tf0\t0", "positive"),
    ("p1\ticd\tf0\tx", "not an integer"),
    ("p1\tnope\tf0\t1", "unknown modality"),
    ("p1\ticd\tf0", "expected 4 fields"),
])
def test_bad_rows(tmp_path, vocabs, row, msg):
    p = _write(tmp_path / "c.tsv", f"patient_id\tmodality\tfeature_id\tcount\n{row}\n")
    with pytest.raises(DataError, match=msg):
        load_corpus(p, vocabs)


def test_bad_header(tmp_path, vocabs):
    p = _write(tmp_path / "c.tsv", "pid\tmod\tfeat\tn\n")
    with pytest.raises(DataError, match="header"):
        load_corpus(p, vocabs)


def test_duplicates_summed_and_patients_sorted(vocabs):
    c = build_corpus(vocabs, [("b", 0, 1, 2), ("a", 1, 0, 1), ("b", 0, 1, 3), ("b", 1, 1, 1)])
    assert c.patient_ids == ("a", "b")
    b = c.patient(1)
    assert list(b.words[0]) == [1] and list(b.counts[0]) == [5]
    assert list(b.lengths) == [5, 1]


def test_vocabulary_invariants():
    with pytest.raises(DataError, match="duplicate"):
        Vocabulary(0, "x", ("a", "a"))
    with pytest.raises(DataError, match="empty"):
        Vocabulary(0, "x", ())


triples = st.lists(
    st.tuples(st.sampled_from(["p0", "p1", "p2", "p3"]), st.integers(0, 1),
              st.integers(0, 1), st.integers(1, 5)),
    max_size=30,
)


@settings(max_examples=40, deadline=None)
@given(triples)
def test_write_load_round_trip(tmp_path_factory, rows):
    vocabs = (Vocabulary(0, "icd", ("f0", "f1")), Vocabulary(1, "lab", ("a", "b")))
    c = build_corpus(vocabs, rows)
    d = tmp_path_factory.mktemp("rt")
    write_schema(vocabs, d / "schema.json")
    write_corpus(c, d / "c.tsv", comment="seed=0")
    back = load_corpus(d / "c.tsv", load_schema(d / "schema.json"))
    assert back.patient_ids == c.patient_ids
    for m in range(2):
        np.testing.assert_array_equal(back.dense(m), c.dense(m))


def test_infer_schema_sorts_features(tmp_path):
    p = _write(tmp_path / "c.tsv", "patient_id\tmodality\tfeature_id\tcount\n"
                                   "p1\tz\tb\t1\np1\ta\tc\t1\np2\tz\ta\t1\n")
    v = infer_schema(p)
    assert [x.name for x in v] == ["a", "z"]
    assert v[1].feature_ids == ("a", "b")


def test_subset_keeps_counts(vocabs):
    c = build_corpus(vocabs, [("a", 0, 0, 1), ("b", 0, 2, 4), ("c", 1, 1, 2)])
    s = c.subset([2, 0])
    assert s.patient_ids == ("a", "c")
    np.testing.assert_array_equal(s.dense(1), [[0, 0], [0, 2]])


# -- survival --------------------------------------------------------------------

def _corpus2(vocabs):
    return build_corpus(vocabs, [("p1", 0, 0, 1), ("p2", 0, 1, 1)])


def test_survival_aligned(tmp_path, vocabs):
    p = _write(tmp_path / "s.tsv", "patient_id\ttime\tevent\np2\t20\t0\np1\t10\t1\n")
    out = load_survival(p, _corpus2(vocabs))
    assert [(o.patient_id, o.time, o.event) for o in out] == [("p1", 10.0, 1), ("p2", 20.0, 0)]


def test_survival_missing_patient(tmp_path, vocabs):
    p = _write(tmp_path / "s.tsv", "patient_id\ttime\tevent\np1\t10\t1\n")
    with pytest.raises(DataError, match="'p2'"):
        load_survival(p, _corpus2(vocabs))


@pytest.mark.parametrize("row, msg", [("p1\t0\t1", "positive"), ("p1\t-3\t1", "positive"),
                                      ("p1\t5\t2", "0 or 1"), ("p1\tabc\t1", "not a number")])
def test_survival_bad_rows(tmp_path, vocabs, row, msg):
    p = _write(tmp_path / "s.tsv", f"patient_id\ttime\tevent\n{row}\np2\t1\t1\n")
    with pytest.raises(DataError, match=msg):
        load_survival(p, _corpus2(vocabs))


def test_survival_duplicate(tmp_path, vocabs):
    p = _write(tmp_path / "s.tsv", "patient_id\ttime\tevent\np1\t1\t1\np1\t2\t1\np2\t1\t0\n")
    with pytest.raises(DataError, match="duplicate"):
        load_survival(p, _corpus2(vocabs))


def test_survival_extra_records_warn(tmp_path, vocabs):
    p = _write(tmp_path / "s.tsv", "patient_id\ttime\tevent\np1\t1\t1\np2\t2\t1\np9\t2\t1\n")
    with pytest.warns(UserWarning, match="1 survival records"):
        assert len(load_survival(p, _corpus2(vocabs))) == 2


# -- guide map and phenotype counts ----------------------------------------------

@pytest.fixture
def guide():
    return GuideMap.from_pairs([("f0", "k0"), ("f1", "k0"), ("f1", "k1")])


def test_multiplicity_and_multi_mapping(vocabs, guide):
    c = build_corpus(vocabs, [("a", 0, 0, 3), ("b", 0, 1, 1), ("c", 1, 0, 4)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        U = phecode_counts(c, guide, 0)
    np.testing.assert_array_equal(U.counts, [[3, 0], [1, 1], [0, 0]])
    assert U.phenotype_ids == ("k0", "k1")


def test_unmapped_feature_warns(vocabs, guide):
    c = build_corpus(vocabs, [("a", 0, 2, 2)])
    with pytest.warns(UserWarning, match="2 guide-modality tokens"):
        U = phecode_counts(c, guide, "icd")
    np.testing.assert_array_equal(U.counts, [[0, 0]])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1), st.integers(1, 4)), min_size=1, max_size=25),
       st.randoms(use_true_random=False))
def test_phecode_column_sums_order_invariant(rows, rnd):
    vocabs = (Vocabulary(0, "icd", ("f0", "f1", "f2")),)
    g = GuideMap.from_pairs([("f0", "k0"), ("f1", "k0"), ("f1", "k1")])
    trip = [(f"p{j}", 0, f, c) for j, f, c in rows]
    shuffled = list(trip)
    rnd.shuffle(shuffled)
    a = phecode_counts(build_corpus(vocabs, trip), g).counts.sum(axis=0)
    b = phecode_counts(build_corpus(vocabs, shuffled), g).counts.sum(axis=0)
    np.testing.assert_array_equal(a, b)


def test_prevalence_filter(vocabs, guide):
    c = build_corpus(vocabs, [("a", 0, 0, 1), ("b", 0, 0, 1), ("c", 0, 1, 1)])
    U = phecode_counts(c, guide).filter_prevalence(0.5)
    assert U.phenotype_ids == ("k0",)


def test_guide_map_round_trip(tmp_path, guide):
    write_guide_map(guide, tmp_path / "g.tsv")
    assert load_guide_map(tmp_path / "g.tsv") == guide


def test_guide_map_invariants():
    with pytest.raises(DataError):
        GuideMap.from_pairs([])
    with pytest.raises(DataError, match="at least one feature"):
        GuideMap({"f0": (0,)}, ("k0", "k1"))
