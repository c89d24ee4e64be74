import math

import numpy as np
import pytest

from sharingan.decoders import ContractError
from sharingan.metrics import MetricReport, auc_from_scores, metric_ap, metric_auc, metric_distances, summarize


def pairwise_auc(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def sweep_ap(scores, labels):
    """Precision envelope over every distinct threshold, summed over recall steps."""
    thresholds = sorted(set(scores.tolist()), reverse=True)
    n_pos = labels.sum()
    prec, rec = [], []
    for th in thresholds:
        sel = scores >= th
        tp = (sel & labels).sum()
        prec.append(tp / sel.sum())
        rec.append(tp / n_pos)
    ap, prev = 0.0, 0.0
    for i, r in enumerate(rec):
        ap += (r - prev) * max(prec[i:])
        prev = r
    return ap


def test_distances_examples():
    assert metric_distances((0.3, 0.4), [(0.3, 0.4)]) == (0.0, 0.0)
    avg, mn = metric_distances((0.5, 0.5), [(0, 0), (1, 1)])
    assert avg == 0 and mn == pytest.approx(math.sqrt(0.5))
    assert metric_distances((0, 0), [(0, 0), (0, 1)]) == (0.5, 0.0)
    with pytest.raises(ContractError):
        metric_distances((0, 0), [])


def test_auc_pairwise_oracle_exact():
    rng = np.random.default_rng(0)
    for _ in range(100):
        hm = rng.integers(0, 6, size=(16, 16)).astype(float)  # ties on purpose
        pts = rng.uniform(size=(int(rng.integers(1, 4)), 2))
        labels = np.zeros((16, 16), bool)
        for x, y in pts:
            labels[min(int(y * 16), 15), min(int(x * 16), 15)] = True
        assert metric_auc(hm, pts) == pairwise_auc(hm.ravel(), labels.ravel())


def test_auc_examples():
    assert metric_auc(np.ones((64, 64)), [(0.3, 0.3)]) == 0.5
    hm = np.zeros((64, 64))
    hm[10, 20] = 1
    assert metric_auc(hm, [((20 + 0.5) / 64, (10 + 0.5) / 64)]) == 1.0
    assert auc_from_scores(np.ones(4), np.ones(4, bool)) is None


def test_auc_monotone_invariance():
    rng = np.random.default_rng(1)
    hm = rng.normal(size=(64, 64))
    pts = [(0.2, 0.7), (0.5, 0.5)]
    assert metric_auc(hm, pts) == metric_auc(np.exp(3 * hm) + 2, pts)


def test_ap_examples():
    assert metric_ap([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert metric_ap([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == 0.25
    with pytest.raises(ContractError):
        metric_ap([0.1, 0.2], [0, 0])


def test_ap_sweep_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 30))
        scores = np.round(rng.uniform(size=n), 1)
        labels = rng.uniform(size=n) < 0.5
        labels[0] = True
        assert metric_ap(scores, labels) == pytest.approx(sweep_ap(scores, labels), abs=1e-12)


def test_report_format():
    rep = MetricReport(0.1, 0.05, 0.9, 10)
    text = rep.format()
    assert "auc" not in text
    assert text.splitlines()[0] == "avg_dist\t0.100000"
    assert "auc\t0.750000" in MetricReport(0.1, 0.05, 0.9, 10, auc=0.75).format()


def test_summarize_uses_inframe_for_distances():
    preds = np.array([[0.5, 0.5], [0.0, 0.0]])
    anns = [np.array([[0.5, 0.6]]), np.zeros((0, 2))]
    rep = summarize(preds, anns, np.array([0.9, 0.2]), np.array([1, 0]))
    assert rep.n_instances == 1 and rep.avg_dist == pytest.approx(0.1) and rep.ap == 1.0 and rep.auc is None
