"""Brute-force reference implementations for the ranking metrics."""

import numpy as np


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def sweep_eer(scores, labels, n_thresholds=10001):
    """Walk thresholds 0..1 and interpolate where FPR first drops to FNR."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    prev = None
    for t in np.linspace(0.0, 1.0, n_thresholds):
        fpr = float(np.count_nonzero(neg >= t)) / neg.size
        fnr = float(np.count_nonzero(pos < t)) / pos.size
        d = fpr - fnr
        if d == 0:
            return fpr
        if d < 0:
            if prev is None:
                return (fpr + fnr) / 2
            pf, pn = prev
            w = (pf - pn) / ((pf - pn) - d)
            return pf + w * (fpr - pf)
        prev = (fpr, fnr)
    return prev[0]


def random_scores(rng, n):
    """Labels with both classes present and scores with plenty of ties.

    Half the sets are quantised to a grid so ties are frequent; all
    scores stay below 1 so the sweep reaches the all-bonafide operating point.
    """
    labels = rng.permutation(np.r_[0, 1, rng.integers(0, 2, n - 2)])
    shift = rng.uniform(0, 2)
    raw = 1 / (1 + np.exp(-(rng.standard_normal(n) + shift * (labels - 0.5))))
    if rng.random() < 0.5:
        grid = rng.choice([10, 50, 1000])
        scores = np.floor(raw * grid) / grid
    else:
        scores = raw.copy()
    scores = np.minimum(scores, 0.999)
    if rng.random() < 0.3:
        # inject exact cross-class ties
        k = max(1, n // 5)
        scores[rng.choice(n, k)] = scores[rng.integers(n)]
    return scores, labels
