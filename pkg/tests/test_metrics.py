import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strategies import labeled_sentences
from xltransfer.backend import GenerationResult
from xltransfer.codec import LabeledSentence, parse_annotated, render_annotated
from xltransfer.metrics import (
    DimensionMismatch,
    IdMismatch,
    RunReport,
    TooFewPoints,
    chrf_pp,
    evaluate_run,
    exact_match,
    f1_from_counts,
    mauve_score,
    micro_f1,
)


def _z(text):
    return parse_annotated(text)


def test_micro_f1_identical():
    ref = _z("[date : monday] at [time : noon]")
    assert micro_f1(ref, ref) == (2, 0, 0)
    assert f1_from_counts(2, 0, 0) == 1.0


def test_micro_f1_one_correct_one_wrong_one_spurious():
    ref = _z("wake me [time : seven] on [date : monday]")
    pred = _z("[person : wake] me [time : seven] on [place_name : monday]")
    assert micro_f1(pred, ref) == (1, 2, 1)
    assert f1_from_counts(1, 2, 1) == pytest.approx(0.4)


def test_micro_f1_empty_pred():
    ref = _z("[date : monday] at [time : noon]")
    assert micro_f1(LabeledSentence((), ()), ref) == (0, 0, 2)
    assert f1_from_counts(0, 0, 2) == 0.0


def test_micro_f1_insertion_only_costs_touched_labels():
    ref = _z("set [time : seven] alarm [date : today]")
    pred = _z("please set [time : seven] alarm [date : today]")
    assert micro_f1(pred, ref) == (2, 0, 0)
    dropped = _z("set alarm [date : today]")
    assert micro_f1(dropped, ref) == (1, 0, 1)


def test_micro_f1_prefers_label_agreement_among_equal_lcs():
    ref = _z("a [x : b] b")
    pred = _z("a [x : b]")
    assert micro_f1(pred, ref) == (1, 0, 0)


@settings(max_examples=200, deadline=None)
@given(labeled_sentences(labels={"x", "y"}), labeled_sentences(labels={"x", "y"}))
def test_micro_f1_swap_symmetry(a, b):
    tp, fp, fn = micro_f1(a, b)
    assert micro_f1(b, a) == (tp, fn, fp)
    assert tp + fp == a.n_labeled and tp + fn == b.n_labeled


def brute_chrf(hyp, ref, beta=2.0):
    """Direct n-gram enumeration, independent of the library's Counter logic."""
    if not hyp.strip() and not ref.strip():
        return 100.0
    if not hyp.strip() or not ref.strip():
        return 0.0

    def grams(seq, n):
        out = {}
        for i in range(len(seq) - n + 1):
            g = tuple(seq[i:i + n])
            out[g] = out.get(g, 0) + 1
        return out

    hc, rc = "".join(hyp.split()), "".join(ref.split())
    hw, rw = hyp.split(), ref.split()
    orders = [(hc, rc, n) for n in range(1, 7)] + [(hw, rw, n) for n in (1, 2)]
    fs = []
    for h, r, n in orders:
        gh, gr = grams(h, n), grams(r, n)
        th, tr = sum(gh.values()), sum(gr.values())
        if th == 0 and tr == 0:
            continue
        m = 0
        for g, c in gh.items():
            m += min(c, gr.get(g, 0))
        if m == 0:
            fs.append(0.0)
            continue
        p, rr = m / th, m / tr
        fs.append((1 + beta ** 2) * p * rr / (beta ** 2 * p + rr))
    return 100.0 * sum(fs) / len(fs)


def test_chrf_examples():
    assert chrf_pp("cat sat", "cat sat") == 100.0
    assert chrf_pp("cat sat", "cat mat") == pytest.approx(brute_chrf("cat sat", "cat mat"), abs=1e-9)
    assert chrf_pp("", "abc") == 0.0
    assert chrf_pp("", " ") == 100.0


def test_chrf_matches_brute_force_1000_pairs():
    rng = random.Random(5)
    alphabet = "abcde [] :"
    for _ in range(1000):
        a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 30)))
        got = chrf_pp(a, b)
        assert got == pytest.approx(brute_chrf(a, b), abs=1e-9)
        assert 0.0 <= got <= 100.0


def test_exact_match():
    assert exact_match("a b", "a b") == 1
    assert exact_match("a  b ", "a b") == 1
    assert exact_match("a b", "a c") == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["a", "a ", " a", "a  ", "b", " "]), min_size=3, max_size=3))
def test_exact_match_equivalence(xs):
    x, y, z = ("".join(xs[:1]), "".join(xs[:2]), "".join(xs))
    assert exact_match(x, x) == 1
    assert exact_match(x, y) == exact_match(y, x)
    if exact_match(x, y) and exact_match(y, z):
        assert exact_match(x, z)


def test_mauve_identical_sets():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(100, 5))
    assert mauve_score(a, a) == pytest.approx(1.0, abs=1e-6)
    assert mauve_score(a, a.copy(), n_clusters=7, seed=3) == pytest.approx(1.0, abs=1e-6)


def test_mauve_separated_clusters():
    rng = np.random.default_rng(1)
    p = rng.normal(loc=0.0, size=(200, 4))
    q = rng.normal(loc=50.0, size=(200, 4))
    assert mauve_score(p, q) < 0.1


def test_mauve_deterministic_and_bounded():
    rng = np.random.default_rng(2)
    p, q = rng.normal(size=(80, 3)), rng.normal(loc=0.7, size=(80, 3))
    s = mauve_score(p, q, seed=4)
    assert s == mauve_score(p, q, seed=4)
    assert 0.0 <= s <= 1.0


def test_mauve_errors():
    with pytest.raises(DimensionMismatch):
        mauve_score(np.zeros((5, 2)), np.zeros((5, 3)))
    with pytest.raises(TooFewPoints):
        mauve_score(np.zeros((2, 2)), np.zeros((2, 2)), n_clusters=5)
    with pytest.raises(TooFewPoints):
        mauve_score(np.zeros((0, 2)), np.zeros((3, 2)))


def _results(refs, broken=()):
    out = []
    for i, z in refs.items():
        text = "[oops" if i in broken else render_annotated(z)
        out.append(GenerationResult(i, text, None if i in broken else parse_annotated(text)))
    return out


def test_evaluate_run_perfect():
    refs = {str(i): _z(f"w{i} [date : d{i}]") for i in range(6)}
    rep = evaluate_run(_results(refs), refs)
    assert (rep.micro_f1, rep.em_rate, rep.chrf_mean, rep.n_parse_failures) == (1.0, 1.0, 100.0, 0)
    assert rep.mauve is None


def test_evaluate_run_half_unparsable():
    refs = {str(i): _z(f"w{i} [date : d{i}]") for i in range(6)}
    rep = evaluate_run(_results(refs, broken={"0", "2", "4"}), refs)
    assert rep.n_parse_failures == 3
    failed = [s for s in rep.scores if s.parse_failed]
    assert all(s.f1_counts == (0, 0, 1) for s in failed)
    assert rep.micro_f1 == pytest.approx(f1_from_counts(3, 0, 3))


def test_evaluate_run_mauve_on_all_when_small(tmp_path):
    refs = {f"{i:03d}": _z(f"w{i} [date : d{i}]") for i in range(200)}
    rng = np.random.default_rng(0)
    emb = {i: list(rng.normal(size=3)) for i in refs}
    rep = evaluate_run(_results(refs), refs, emb, emb)
    assert rep.mauve == pytest.approx(1.0, abs=1e-6)
    rep.write(tmp_path / "r.jsonl")
    assert RunReport.read_summary(tmp_path / "r.jsonl")["n_examples"] == 200


def test_evaluate_run_id_mismatch():
    refs = {"a": _z("[date : x]")}
    with pytest.raises(IdMismatch):
        evaluate_run([GenerationResult("b", "x")], refs)
