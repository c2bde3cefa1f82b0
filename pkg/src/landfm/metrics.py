"""Hydrologic regression metrics, classification metrics and median aggregation.

All regression metrics drop index pairs where either value is non-finite and
use population (1/n) moments.
"""

from __future__ import annotations

import csv
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

REGRESSION_METRICS = ("RMSE", "ubRMSE", "Corr", "NSE", "MAE", "KGE", "RMSE_FDC", "FLV", "FHV", "PBIAS")
CLASSIFICATION_METRICS = ("accuracy", "precision", "recall", "F1", "ROC_AUC")


def _pairs(p, o, need=1, name="metric"):
    p = np.asarray(p, dtype=np.float64).ravel()
    o = np.asarray(o, dtype=np.float64).ravel()
    if p.shape != o.shape:
        raise ValueError(f"{name}: prediction length {p.size} != observation length {o.size}")
    ok = np.isfinite(p) & np.isfinite(o)
    if ok.sum() < need:
        warnings.warn(f"{name}: {int(ok.sum())} valid pairs (< {need}); returning NaN", RuntimeWarning,
                      stacklevel=3)
        return None, None
    return p[ok], o[ok]


def rmse(p, o):
    p, o = _pairs(p, o, 1, "rmse")
    return np.nan if p is None else float(np.sqrt(np.mean((p - o) ** 2)))


def mae(p, o):
    p, o = _pairs(p, o, 1, "mae")
    return np.nan if p is None else float(np.mean(np.abs(p - o)))


def bias(p, o):
    p, o = _pairs(p, o, 1, "bias")
    return np.nan if p is None else float(np.mean(p - o))


def ubrmse(p, o):
    p, o = _pairs(p, o, 2, "ubrmse")
    if p is None:
        return np.nan
    a = (p - p.mean()) - (o - o.mean())
    return float(np.sqrt(np.mean(a * a)))


def corr(p, o):
    p, o = _pairs(p, o, 2, "corr")
    if p is None:
        return np.nan
    dp, do = p - p.mean(), o - o.mean()
    den = np.sqrt(np.mean(dp * dp) * np.mean(do * do))
    if den == 0.0:
        warnings.warn("corr: constant series; returning NaN", RuntimeWarning, stacklevel=2)
        return np.nan
    return float(np.mean(dp * do) / den)


def nse(p, o):
    p, o = _pairs(p, o, 1, "nse")
    if p is None:
        return np.nan
    sst = np.sum((o - o.mean()) ** 2)
    if sst == 0.0:
        warnings.warn("nse: constant observations; returning NaN", RuntimeWarning, stacklevel=2)
        return np.nan
    return float(1.0 - np.sum((p - o) ** 2) / sst)


def kge(p, o):
    p, o = _pairs(p, o, 2, "kge")
    if p is None:
        return np.nan
    mo, so, sp = o.mean(), o.std(), p.std()
    if mo == 0.0 or so == 0.0 or sp == 0.0:
        warnings.warn("kge: zero observed mean or constant series; returning NaN", RuntimeWarning,
                      stacklevel=2)
        return np.nan
    r = np.mean((p - p.mean()) * (o - mo)) / (sp * so)
    return float(1.0 - np.sqrt((r - 1) ** 2 + (sp / so - 1) ** 2 + (p.mean() / mo - 1) ** 2))


FDC_LEVELS = np.arange(1, 101)


def rmse_fdc(p, o):
    """RMSE between the 1st..100th percentiles (linear interpolation) of p and o."""
    p, o = _pairs(p, o, 1, "rmse_fdc")
    if p is None:
        return np.nan
    qp = np.percentile(p, FDC_LEVELS)
    qo = np.percentile(o, FDC_LEVELS)
    return float(np.sqrt(np.mean((qp - qo) ** 2)))


def regime_indices(o, low=0.3, high=0.02):
    """(low-flow, high-flow) index sets from a stable sort of the observations."""
    n = o.size
    order = np.argsort(o, kind="stable")
    n_low = max(1, int(round(low * n)))
    n_high = max(1, int(round(high * n)))
    return order[:n_low], order[n - n_high:]


def _pct_bias(p, o):
    s = np.sum(o)
    if s == 0.0:
        warnings.warn("flow bias: zero observed regime sum; returning NaN", RuntimeWarning, stacklevel=3)
        return np.nan
    return float(100.0 * np.sum(p - o) / s)


def flow_biases(p, o):
    """(FLV, FHV, PBIAS) in percent; regimes picked on the observed series."""
    p, o = _pairs(p, o, 1, "flow_biases")
    if p is None:
        return np.nan, np.nan, np.nan
    lo, hi = regime_indices(o)
    return _pct_bias(p[lo], o[lo]), _pct_bias(p[hi], o[hi]), _pct_bias(p, o)


def regression_metrics(p, o):
    flv, fhv, pb = flow_biases(p, o)
    return {"RMSE": rmse(p, o), "ubRMSE": ubrmse(p, o), "Corr": corr(p, o), "NSE": nse(p, o),
            "MAE": mae(p, o), "KGE": kge(p, o), "RMSE_FDC": rmse_fdc(p, o), "FLV": flv, "FHV": fhv,
            "PBIAS": pb}


def roc_auc(probs, labels):
    """Mann-Whitney AUC with average ranks for ties."""
    s = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if n1 == 0 or n0 == 0:
        warnings.warn("roc_auc: single-class labels; returning NaN", RuntimeWarning, stacklevel=2)
        return np.nan
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def classification_metrics(probs, labels, threshold=0.5):
    s = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} probabilities for {y.size} labels")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must be 0 or 1")
    if np.any((s < 0) | (s > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    pred = (s >= threshold).astype(float)
    tp = float(np.sum((pred == 1) & (y == 1)))
    fp = float(np.sum((pred == 1) & (y == 0)))
    fn = float(np.sum((pred == 0) & (y == 1)))
    acc = float(np.mean(pred == y))
    prec = tp / (tp + fp) if tp + fp else np.nan
    rec = tp / (tp + fn) if tp + fn else np.nan
    f1 = 2 * prec * rec / (prec + rec) if np.isfinite(prec) and np.isfinite(rec) and prec + rec else np.nan
    return {"accuracy": acc, "precision": prec, "recall": rec, "F1": f1, "ROC_AUC": roc_auc(s, y)}


@dataclass
class MetricReport:
    per_site: dict = field(default_factory=dict)      # site_id -> {metric: value}
    summary: dict = field(default_factory=dict)
    classification: dict | None = None


def aggregate(per_site, names=REGRESSION_METRICS):
    """NaN-skipping median of each metric over sites."""
    if not per_site:
        raise ValueError("aggregate needs at least one site")
    out = {}
    for m in names:
        vals = np.array([r.get(m, np.nan) for r in per_site.values()], dtype=np.float64)
        vals = vals[np.isfinite(vals)]
        out[m] = float(np.median(vals)) if vals.size else np.nan
    return out


def evaluate(rows):
    """rows of (site_id, date, y_pred, y_obs) -> MetricReport."""
    by_site = defaultdict(lambda: ([], []))
    for sid, _, yp, yo in rows:
        by_site[sid][0].append(float(yp))
        by_site[sid][1].append(float(yo))
    per_site = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for sid in sorted(by_site):
            p, o = by_site[sid]
            per_site[sid] = regression_metrics(p, o)
    return MetricReport(per_site, aggregate(per_site))


def write_predictions(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", "date", "y_pred", "y_obs"])
        for sid, d, yp, yo in rows:
            w.writerow([sid, str(d), repr(float(yp)), repr(float(yo))])


def read_predictions(path):
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        head = next(r, None)
        if head is None or [h.strip() for h in head[:4]] != ["site_id", "date", "y_pred", "y_obs"]:
            raise ValueError(f"{path}: expected header site_id,date,y_pred,y_obs, got {head}")
        for k, line in enumerate(r, start=2):
            if len(line) < 4:
                raise ValueError(f"{path}:{k}: expected 4 fields, got {len(line)}")
            try:
                rows.append((line[0], line[1], float(line[2]), float(line[3])))
            except ValueError:
                raise ValueError(f"{path}:{k}: non-numeric y_pred/y_obs {line[2:4]}") from None
    return rows


def _fmt(v):
    return repr(float(v)) if np.isfinite(v) else "nan"


def write_reports(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics_per_site.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site_id", *REGRESSION_METRICS])
        for sid, m in report.per_site.items():
            w.writerow([sid] + [_fmt(m[k]) for k in REGRESSION_METRICS])
    with open(out / "metrics_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", *REGRESSION_METRICS])
        w.writerow(["median"] + [_fmt(report.summary[k]) for k in REGRESSION_METRICS])
    return out / "metrics_per_site.csv", out / "metrics_summary.csv"


def write_class_predictions(path, ids, probs, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "p", "label"])
        for i, p, y in zip(ids, probs, labels):
            w.writerow([i, repr(float(p)), int(y)])


def read_class_predictions(path):
    ids, probs, labels = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        head = next(r, None)
        if head is None or [h.strip() for h in head[:3]] != ["sample_id", "p", "label"]:
            raise ValueError(f"{path}: expected header sample_id,p,label, got {head}")
        for k, line in enumerate(r, start=2):
            try:
                ids.append(line[0])
                probs.append(float(line[1]))
                labels.append(float(line[2]))
            except (IndexError, ValueError):
                raise ValueError(f"{path}:{k}: malformed row {line}") from None
    return ids, np.array(probs), np.array(labels)


def write_class_report(metrics, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", *CLASSIFICATION_METRICS])
        w.writerow(["value"] + [_fmt(metrics[k]) for k in CLASSIFICATION_METRICS])
    return out / "metrics_summary.csv"
