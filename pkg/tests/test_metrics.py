import itertools
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radfm.exceptions import DataError
from radfm.metrics import (
    auc_ovr, bleu, caption_report, confusion_matrix, corpus_bleu, lcs_length, macro_f1,
    rouge_l, seg_metrics,
)

N_CASES = 200


# ---------------------------------------------------------------- oracles

def f1_oracle(t, p, n_classes):
    scores = []
    for c in range(n_classes):
        tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(t, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(t, p) if a == c and b != c)
        scores.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / n_classes


def auc_pairs(pos, neg):
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def auc_oracle(t, scores):
    k = scores.shape[1]
    classes = [1] if k == 2 else range(k)
    vals = []
    for c in classes:
        pos = [scores[i, c] for i in range(len(t)) if t[i] == c]
        neg = [scores[i, c] for i in range(len(t)) if t[i] != c]
        if pos and neg:
            vals.append(auc_pairs(pos, neg))
    return sum(vals) / len(vals)


def seg_oracle(p, t, n_classes):
    p, t = p.reshape(-1).tolist(), t.reshape(-1).tolist()
    ious, dices = [], []
    for c in range(n_classes):
        inter = sum(1 for a, b in zip(p, t) if a == c and b == c)
        sp, st_ = p.count(c), t.count(c)
        if sp + st_ == 0:
            continue
        ious.append(inter / (sp + st_ - inter))
        dices.append(2 * inter / (sp + st_))
    return sum(ious) / len(ious), sum(dices) / len(dices)


def bleu_oracle(hyp, refs, max_n=4):
    if not hyp:
        return [0.0] * (max_n + 1)
    precisions = []
    for n in range(1, max_n + 1):
        grams = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
        if not grams:
            precisions.append(0.0)
            continue
        clipped = 0
        for g in set(grams):
            ref_max = max(sum(1 for i in range(len(r) - n + 1) if tuple(r[i:i + n]) == g) for r in refs)
            clipped += min(grams.count(g), ref_max)
        precisions.append(clipped / len(grams))
    r = sorted(refs, key=lambda x: (abs(len(x) - len(hyp)), len(x)))[0]
    bp = 1.0 if len(hyp) >= len(r) else math.exp(1 - len(r) / len(hyp))
    geo = 0.0 if min(precisions) == 0 else math.exp(sum(map(math.log, precisions)) / max_n)
    return [100 * bp * geo] + [100 * bp * p for p in precisions]


def lcs_oracle(a, b):
    if len(a) > len(b):
        a, b = b, a
    best = 0
    for mask in range(1 << len(a)):
        sub = [a[i] for i in range(len(a)) if mask >> i & 1]
        it = iter(b)
        if all(x in it for x in sub):
            best = max(best, len(sub))
    return best


# ---------------------------------------------------------------- examples

def test_macro_f1_examples():
    assert macro_f1([0, 1, 1, 0], [0, 1, 1, 0], 2) == 1.0
    assert macro_f1([0, 0, 1, 1], [0, 1, 1, 1], 2) == pytest.approx((2 / 3 + 0.8) / 2)
    assert macro_f1([0, 1, 0, 1], [1, 0, 1, 0], 2) == 0.0
    with pytest.raises(DataError):
        macro_f1([], [], 2)


def test_absent_class_scores_zero():
    assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)


def test_confusion_matrix_rows_truth():
    cm = confusion_matrix([0, 0, 1], [1, 0, 1], 2)
    assert cm.tolist() == [[1, 1], [0, 1]] and cm.sum() == 3


def test_auc_examples():
    assert auc_ovr([0, 0, 1, 1], np.array([0.1, 0.2, 0.8, 0.9])) == 1.0
    t = [0, 1, 0, 1]
    s = np.array([0.3, 0.3, 0.1, 0.7])
    assert auc_ovr(t, s) == auc_pairs([0.3, 0.7], [0.3, 0.1]) == 0.875
    rng = np.random.default_rng(0)
    assert abs(auc_ovr(rng.integers(0, 2, 20000), rng.random(20000)) - 0.5) < 0.02


def test_auc_skips_degenerate_classes():
    scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.7, 0.3, 0.0]])
    assert auc_ovr([0, 1, 0], scores) == pytest.approx(1.0)
    assert math.isnan(auc_ovr([1, 1], np.array([0.3, 0.4])))


def test_seg_examples():
    m = np.zeros((4, 4), int)
    m[1:3, 1:3] = 1
    r = seg_metrics(m, m, 2)
    assert r["miou"] == r["dice"] == r["f1"] == 1.0
    half = m.copy()
    half[1:3, 2] = 0
    r = seg_metrics(half, m, 2)
    assert r["iou_per_class"][1] == 0.5
    assert r["dice_per_class"][1] == pytest.approx(2 / 3)
    a = np.zeros((2, 2), int)
    a[0, 0] = 1
    b = np.zeros((2, 2), int)
    b[1, 1] = 1
    assert seg_metrics(a, b, 2)["iou_per_class"][1] == 0.0
    assert seg_metrics(a, b, 2)["dice_per_class"][1] == 0.0
    with pytest.raises(DataError):
        seg_metrics(a, np.zeros((3, 3), int), 2)


def test_bleu_examples():
    h = "a circle at the top".split()
    assert bleu(h, [h])["bleu_1"] == 100.0 and bleu(h, [h])["bleu"] == pytest.approx(100.0)
    r = bleu(["a", "a", "a"], [["a", "b"]])
    # clipped unigram precision 1/3; hypothesis is longer so no brevity penalty
    assert r["bleu_1"] == pytest.approx(100 / 3)
    r = bleu(["a", "b", "c"], [["a", "b", "c"]])
    assert r["bleu_4"] == 0.0 and r["bleu"] == 0.0
    assert bleu([], [["a"]]) == {"bleu": 0.0, "bleu_1": 0.0, "bleu_2": 0.0, "bleu_3": 0.0, "bleu_4": 0.0}


def test_rouge_examples():
    assert rouge_l("a b c".split(), "a b c".split()) == pytest.approx(100.0)
    p, r, b = 1.0, 2 / 3, 1.2
    expect = 100 * (1 + b * b) * p * r / (r + b * b * p)
    assert rouge_l("a c".split(), "a b c".split()) == pytest.approx(expect)
    assert rouge_l(["x"], ["y"]) == 0.0
    assert rouge_l(["x"], []) == 0.0


# ---------------------------------------------------------------- randomized oracles

def test_macro_f1_oracle_cases():
    rng = random.Random(0)
    for _ in range(N_CASES):
        k = rng.randint(2, 4)
        n = rng.randint(1, 12)
        t = [rng.randrange(k) for _ in range(n)]
        p = [rng.randrange(k) for _ in range(n)]
        assert abs(macro_f1(t, p, k) - f1_oracle(t, p, k)) < 1e-12


def test_auc_oracle_cases():
    rng = np.random.default_rng(1)
    done = 0
    while done < N_CASES:
        k = int(rng.integers(2, 4))
        n = int(rng.integers(3, 12))
        t = rng.integers(0, k, n)
        if len(set(t.tolist())) < 2:
            continue
        scores = rng.integers(0, 5, (n, k)).astype(float)  # integer scores force ties
        assert abs(auc_ovr(t, scores) - auc_oracle(t, scores)) < 1e-12
        done += 1


def test_seg_oracle_cases():
    rng = np.random.default_rng(2)
    for _ in range(N_CASES):
        k = int(rng.integers(2, 4))
        shape = tuple(rng.integers(1, 5, 2))
        p, t = rng.integers(0, k, shape), rng.integers(0, k, shape)
        r = seg_metrics(p, t, k)
        miou, dice = seg_oracle(p, t, k)
        assert abs(r["miou"] - miou) < 1e-12 and abs(r["dice"] - dice) < 1e-12
        assert abs(r["f1"] - dice) < 1e-12


def test_bleu_oracle_cases():
    rng = random.Random(3)
    vocab = "abcd"
    for _ in range(N_CASES):
        hyp = [rng.choice(vocab) for _ in range(rng.randint(0, 8))]
        refs = [[rng.choice(vocab) for _ in range(rng.randint(1, 8))] for _ in range(rng.randint(1, 3))]
        got = bleu(hyp, refs)
        expect = bleu_oracle(hyp, refs)
        assert abs(got["bleu"] - expect[0]) < 1e-9
        for n in range(1, 5):
            assert abs(got[f"bleu_{n}"] - expect[n]) < 1e-9


def test_rouge_oracle_cases():
    rng = random.Random(4)
    for _ in range(N_CASES):
        a = [rng.choice("abc") for _ in range(rng.randint(0, 7))]
        b = [rng.choice("abc") for _ in range(rng.randint(0, 7))]
        assert lcs_length(a, b) == lcs_oracle(a, b)
        lcs = lcs_oracle(a, b)
        if not a or not b or lcs == 0:
            expect = 0.0
        else:
            p, r = lcs / len(a), lcs / len(b)
            expect = 100 * (1 + 1.44) * p * r / (r + 1.44 * p)
        assert abs(rouge_l(a, b) - expect) < 1e-9


# ---------------------------------------------------------------- properties

@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=8),
       st.randoms(use_true_random=False))
@settings(max_examples=100, deadline=None)
def test_order_invariance(pairs, rnd):
    t, p = zip(*pairs)
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    t2, p2 = zip(*shuffled)
    assert macro_f1(t, p, 3) == pytest.approx(macro_f1(t2, p2, 3))
    assert macro_f1(t, p, 3) == pytest.approx(f1_oracle(t, p, 3))
    a = seg_metrics(np.array(p), np.array(t), 3)
    b = seg_metrics(np.array(p2), np.array(t2), 3)
    assert a["miou"] == pytest.approx(b["miou"]) and a["dice"] == pytest.approx(b["dice"])


@given(st.lists(st.sampled_from("abcde"), min_size=4, max_size=12))
@settings(max_examples=100, deadline=None)
def test_self_bleu_is_100(h):
    r = bleu(h, [h])
    for k in ("bleu", "bleu_1", "bleu_2", "bleu_3", "bleu_4"):
        assert r[k] == pytest.approx(100.0)


def test_corpus_bleu_and_report():
    hyps = [["a", "b", "c", "d"], ["e", "f", "g", "h"]]
    r = caption_report(hyps, hyps)
    assert r["bleu"] == pytest.approx(100.0) and r["rouge_l"] == pytest.approx(100.0)
    with pytest.raises(DataError):
        corpus_bleu(hyps, [])
