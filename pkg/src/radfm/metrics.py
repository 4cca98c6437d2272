"""Classification, segmentation and captioning metrics.

All averages are macro (unweighted over classes). Captioning scores are
reported on a 0-100 scale.
"""

from __future__ import annotations

import logging
import math
from collections import Counter

import numpy as np
from scipy.stats import rankdata

from .exceptions import DataError

logger = logging.getLogger(__name__)

ROUGE_BETA = 1.2


def _labels(y, name):
    a = np.asarray(y).reshape(-1)
    if a.size == 0:
        raise DataError(f"{name} is empty")
    return a.astype(np.int64)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows indexed by truth and columns by prediction."""
    t, p = _labels(y_true, "y_true"), _labels(y_pred, "y_pred")
    if t.shape != p.shape:
        raise DataError(f"y_true and y_pred differ in length ({t.size} vs {p.size})")
    if t.min() < 0 or p.min() < 0 or t.max() >= n_classes or p.max() >= n_classes:
        raise DataError(f"labels must lie in [0, {n_classes})")
    return np.bincount(t * n_classes + p, minlength=n_classes**2).reshape(n_classes, n_classes)


def accuracy(y_true, y_pred) -> float:
    t, p = _labels(y_true, "y_true"), _labels(y_pred, "y_pred")
    return float((t == p).mean())


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(float)
    denom = 2 * tp + (cm.sum(0) - tp) + (cm.sum(1) - tp)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 0.0)
    return f1


def macro_f1(y_true, y_pred, n_classes: int) -> float:
    """Unweighted mean of per-class F1.

    A class absent from both truth and prediction scores 0, so a perfect
    prediction only reaches 1.0 when every class occurs.
    """
    cm = confusion_matrix(y_true, y_pred, n_classes)
    absent = (cm.sum(0) + cm.sum(1)) == 0
    if absent.any():
        logger.info("classes %s absent from truth and prediction; F1 counted as 0",
                    np.flatnonzero(absent).tolist())
    return float(per_class_f1(cm).mean())


def binary_auc(positive_scores, negative_scores) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counting 1/2."""
    pos = np.asarray(positive_scores, dtype=float)
    neg = np.asarray(negative_scores, dtype=float)
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = pos.size, neg.size
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_ovr(y_true, scores) -> float:
    """Macro one-vs-rest ROC AUC.

    ``scores`` is [n_samples, n_classes]; for two classes a 1-D array of
    positive-class scores is also accepted. Classes without both positives
    and negatives are skipped with a warning; if all are skipped the result
    is NaN.
    """
    t = _labels(y_true, "y_true")
    s = np.asarray(scores, dtype=float)
    if s.ndim == 1:
        s = np.stack([-s, s], axis=1)
    if s.shape[0] != t.size:
        raise DataError("scores and labels differ in length")
    if not np.isfinite(s).all():
        raise DataError("scores must be finite")
    n_classes = s.shape[1]
    if n_classes == 2:
        classes = [1]
    else:
        classes = range(n_classes)
    aucs = []
    for c in classes:
        pos = t == c
        if pos.all() or not pos.any():
            logger.warning("class %d has no positives or no negatives; skipped in AUC", c)
            continue
        aucs.append(binary_auc(s[pos, c], s[~pos, c]))
    if not aucs:
        return float("nan")
    return float(np.mean(aucs))


def classification_report(y_true, proba, n_classes: int) -> dict:
    proba = np.asarray(proba)
    pred = proba.argmax(axis=1)
    return {
        "acc": accuracy(y_true, pred),
        "f1": macro_f1(y_true, pred, n_classes),
        "auc": auc_ovr(y_true, proba),
    }


def seg_metrics(pred_mask, true_mask, n_classes: int) -> dict:
    """mIoU, Dice and pixel-F1 over classes present in truth or prediction.

    Per-class arrays (NaN for classes absent from both masks) are returned
    alongside the macro averages. Per class, pixel-F1 from the confusion
    matrix coincides with Dice; only the name differs.
    """
    p = np.asarray(pred_mask)
    t = np.asarray(true_mask)
    if p.shape != t.shape:
        raise DataError(f"mask shapes differ: {p.shape} vs {t.shape}")
    cm = confusion_matrix(t.reshape(-1), p.reshape(-1), n_classes)
    inter = np.diag(cm).astype(float)
    size_true = cm.sum(1).astype(float)
    size_pred = cm.sum(0).astype(float)
    union = size_true + size_pred - inter
    present = union > 0
    iou = np.full(n_classes, np.nan)
    dice = np.full(n_classes, np.nan)
    iou[present] = inter[present] / union[present]
    dice[present] = 2 * inter[present] / (size_true[present] + size_pred[present])
    f1 = np.where(present, per_class_f1(cm), np.nan)
    return {
        "miou": float(np.nanmean(iou)),
        "dice": float(np.nanmean(dice)),
        "f1": float(np.nanmean(f1)),
        "iou_per_class": iou,
        "dice_per_class": dice,
    }


# --------------------------------------------------------------------------
# captioning


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(hypothesis, references, max_n):
    matches, totals = [0] * max_n, [0] * max_n
    for n in range(1, max_n + 1):
        hyp = ngram_counts(hypothesis, n)
        max_ref = Counter()
        for ref in references:
            for gram, c in ngram_counts(ref, n).items():
                max_ref[gram] = max(max_ref[gram], c)
        matches[n - 1] = sum(min(c, max_ref[g]) for g, c in hyp.items())
        totals[n - 1] = max(len(hypothesis) - n + 1, 0)
    hyp_len = len(hypothesis)
    # closest reference length, ties to the shorter one
    ref_len = min((abs(len(r) - hyp_len), len(r)) for r in references)[1] if references else 0
    return matches, totals, hyp_len, ref_len


def _bleu_from_stats(matches, totals, hyp_len, ref_len, max_n):
    scores = {"bleu": 0.0, **{f"bleu_{n}": 0.0 for n in range(1, max_n + 1)}}
    if hyp_len == 0:
        return scores
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    for n, p in enumerate(precisions, start=1):
        scores[f"bleu_{n}"] = 100.0 * bp * p
    if min(precisions) > 0:
        scores["bleu"] = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return scores


def bleu(hypothesis, references, max_n: int = 4) -> dict:
    """Sentence BLEU with clipped n-gram precision and brevity penalty.

    ``bleu_n`` is the brevity-penalised modified precision of order n;
    ``bleu`` is the penalised geometric mean over orders 1..max_n. A zero
    precision at any order makes ``bleu`` zero (no smoothing).
    """
    hypothesis = list(hypothesis)
    references = [list(r) for r in references]
    return _bleu_from_stats(*_bleu_stats(hypothesis, references, max_n), max_n)


def corpus_bleu(hypotheses, references_list, max_n: int = 4) -> dict:
    """Corpus BLEU: n-gram statistics and lengths summed before scoring."""
    if len(hypotheses) != len(references_list):
        raise DataError("hypotheses and references differ in count")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references_list):
        m, t, h, r = _bleu_stats(list(hyp), [list(x) for x in refs], max_n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        hyp_len += h
        ref_len += r
    return _bleu_from_stats(matches, totals, hyp_len, ref_len, max_n)


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, reference, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure, recall weighted by ``beta``, on a 0-100 scale."""
    hypothesis, reference = list(hypothesis), list(reference)
    if not reference or not hypothesis:
        return 0.0
    lcs = lcs_length(hypothesis, reference)
    if lcs == 0:
        return 0.0
    prec = lcs / len(hypothesis)
    rec = lcs / len(reference)
    return 100.0 * (1 + beta**2) * prec * rec / (rec + beta**2 * prec)


def caption_report(hypotheses, references) -> dict:
    """Corpus BLEU plus mean sentence ROUGE-L for tokenised captions."""
    out = corpus_bleu(hypotheses, [[r] for r in references])
    out["rouge_l"] = float(np.mean([rouge_l(h, r) for h, r in zip(hypotheses, references)]))
    return out
