"""Plain-Python transcriptions of the metric formulas, used as test oracles.

Nothing here imports the package or numpy; every quantity is built with
explicit loops so that a shared bug cannot hide in a vectorised helper.
"""

import math


def valid(p, o):
    keep = [(a, b) for a, b in zip(p, o) if math.isfinite(a) and math.isfinite(b)]
    return [a for a, _ in keep], [b for _, b in keep]


def mean(x):
    return math.fsum(x) / len(x)


def pstd(x):
    m = mean(x)
    return math.sqrt(math.fsum((v - m) ** 2 for v in x) / len(x))


def rmse(p, o):
    p, o = valid(p, o)
    return math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(p, o)) / len(p))


def mae(p, o):
    p, o = valid(p, o)
    return math.fsum(abs(a - b) for a, b in zip(p, o)) / len(p)


def bias(p, o):
    p, o = valid(p, o)
    return math.fsum(a - b for a, b in zip(p, o)) / len(p)


def ubrmse(p, o):
    p, o = valid(p, o)
    mp, mo = mean(p), mean(o)
    return math.sqrt(math.fsum(((a - mp) - (b - mo)) ** 2 for a, b in zip(p, o)) / len(p))


def corr(p, o):
    p, o = valid(p, o)
    mp, mo = mean(p), mean(o)
    cov = math.fsum((a - mp) * (b - mo) for a, b in zip(p, o)) / len(p)
    return cov / (pstd(p) * pstd(o))


def nse(p, o):
    p, o = valid(p, o)
    mo = mean(o)
    sse = math.fsum((a - b) ** 2 for a, b in zip(p, o))
    sst = math.fsum((b - mo) ** 2 for b in o)
    return 1.0 - sse / sst


def kge(p, o):
    p, o = valid(p, o)
    r = corr(p, o)
    alpha = pstd(p) / pstd(o)
    beta = mean(p) / mean(o)
    return 1.0 - math.sqrt((r - 1) ** 2 + (alpha - 1) ** 2 + (beta - 1) ** 2)


def percentile(x, q):
    """Linear interpolation between order statistics at rank (n-1)*q/100."""
    s = sorted(x)
    h = (len(s) - 1) * q / 100.0
    lo = math.floor(h)
    if lo + 1 >= len(s):
        return s[-1]
    return s[lo] + (h - lo) * (s[lo + 1] - s[lo])


def rmse_fdc(p, o):
    p, o = valid(p, o)
    diffs = [percentile(p, j) - percentile(o, j) for j in range(1, 101)]
    return math.sqrt(math.fsum(d * d for d in diffs) / 100)


def _pct(p, o, idx):
    return 100.0 * math.fsum(p[i] - o[i] for i in idx) / math.fsum(o[i] for i in idx)


def flow_biases(p, o):
    p, o = valid(p, o)
    n = len(o)
    order = sorted(range(n), key=lambda i: o[i])
    n_low = max(1, round(0.3 * n))
    n_high = max(1, round(0.02 * n))
    return _pct(p, o, order[:n_low]), _pct(p, o, order[n - n_high:]), _pct(p, o, range(n))


def median(x):
    s = sorted(v for v in x if math.isfinite(v))
    k = len(s)
    return s[k // 2] if k % 2 else (s[k // 2 - 1] + s[k // 2]) / 2


def auc(probs, labels):
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    pos = [s for s, y in zip(probs, labels) if y == 1]
    neg = [s for s, y in zip(probs, labels) if y == 0]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def confusion(probs, labels, threshold=0.5):
    tp = fp = fn = tn = 0
    for s, y in zip(probs, labels):
        hit = s >= threshold
        if hit and y == 1:
            tp += 1
        elif hit:
            fp += 1
        elif y == 1:
            fn += 1
        else:
            tn += 1
    acc = (tp + tn) / len(labels)
    prec = tp / (tp + fp)
    rec = tp / (tp + fn)
    return {"accuracy": acc, "precision": prec, "recall": rec, "F1": 2 * prec * rec / (prec + rec)}
