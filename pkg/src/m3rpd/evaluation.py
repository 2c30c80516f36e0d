"""Metric panel, run aggregation, rank-sum comparison and differential analysis.

Conventions
-----------
* A probability ``>= threshold`` is a positive call.
* AUROC is the Mann-Whitney statistic with ties credited 0.5, divided by
  ``n_pos * n_neg``.
* Quartiles use linear interpolation between order statistics.
"""
import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

METRIC_KEYS = ("f1", "precision", "sensitivity", "specificity", "auroc", "kappa", "accuracy", "brier")
REPORT_KEYS = METRIC_KEYS + ("threshold", "n_pos", "n_neg", "scenario", "feature")
CATEGORIES = ("both", "neither", "a_only", "b_only")
STRATA = ("positives", "negatives", "all")
SENIORITY = ("fellow", "attending_other", "attending_retina")
EXACT_MAX_N = 20


def _aligned(preds, labels):
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"predictions ({p.size}) and labels ({y.size}) differ in length")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return p, y.astype(np.int64)


def confusion(preds, labels, threshold=0.5):
    """Return (TP, FP, FN, TN); ``preds >= threshold`` counts as positive."""
    p, y = _aligned(preds, labels)
    call = p >= threshold
    tp = int(np.sum(call & (y == 1)))
    fp = int(np.sum(call & (y == 0)))
    fn = int(np.sum(~call & (y == 1)))
    tn = int(np.sum(~call & (y == 0)))
    return tp, fp, fn, tn


def _div(a, b):
    return a / b if b else 0.0


def rates_from_confusion(tp, fp, fn, tn):
    """Threshold metrics from a confusion matrix (zero when a denominator is empty)."""
    n = tp + fp + fn + tn
    precision = _div(tp, tp + fp)
    sensitivity = _div(tp, tp + fn)
    specificity = _div(tn, tn + fp)
    f1 = _div(2 * precision * sensitivity, precision + sensitivity)
    accuracy = _div(tp + tn, n)
    p_e = _div((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn), n * n)
    kappa = _div(accuracy - p_e, 1 - p_e) if p_e != 1 else 0.0
    return {
        "f1": f1,
        "precision": precision,
        "sensitivity": sensitivity,
        "specificity": specificity,
        "kappa": kappa,
        "accuracy": accuracy,
    }


def midranks(values):
    """1-based ranks with ties sharing their mean rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(preds, labels):
    """Rank-based AUROC; ``None`` when only one class is present."""
    p, y = _aligned(preds, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    r = midranks(p)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def brier(preds, labels):
    p, y = _aligned(preds, labels)
    return float(np.mean((p - y) ** 2)) if p.size else 0.0


@dataclass
class MetricsReport:
    f1: float
    precision: float
    sensitivity: float
    specificity: float
    auroc: object  # float, or None when undefined
    kappa: float
    accuracy: float
    brier: object
    threshold: float = 0.5
    n_pos: int = 0
    n_neg: int = 0
    scenario: str = ""
    feature: str = "rpd"

    def to_dict(self):
        return {k: getattr(self, k) for k in REPORT_KEYS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in REPORT_KEYS})


def panel(preds, labels, threshold=0.5, scenario="", feature="rpd"):
    """Full metric panel for one model on one test set."""
    p, y = _aligned(preds, labels)
    tp, fp, fn, tn = confusion(p, y, threshold)
    r = rates_from_confusion(tp, fp, fn, tn)
    return MetricsReport(
        auroc=auroc(p, y),
        brier=brier(p, y),
        threshold=float(threshold),
        n_pos=int(y.sum()),
        n_neg=int(y.size - y.sum()),
        scenario=scenario,
        feature=feature,
        **r,
    )


def panel_from_calls(calls, labels, scenario="", feature="rpd"):
    """Panel for binary calls (human graders): no AUROC and no Brier score."""
    c, y = _aligned(calls, labels)
    tp, fp, fn, tn = confusion(c, y, 0.5)
    return MetricsReport(
        auroc=None,
        brier=None,
        threshold=0.5,
        n_pos=int(y.sum()),
        n_neg=int(y.size - y.sum()),
        scenario=scenario,
        feature=feature,
        **rates_from_confusion(tp, fp, fn, tn),
    )


def roc_curve(preds, labels):
    """ROC points ``(fpr, tpr, threshold)`` from (0, 0) to (1, 1), one per distinct score."""
    p, y = _aligned(preds, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_curve needs both positive and negative labels")
    order = np.argsort(-p, kind="mergesort")
    ps, ys = p[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(ps))[0], ps.size - 1]
    tps = np.cumsum(ys)[distinct]
    fps = (distinct + 1) - tps
    pts = [(0.0, 0.0, math.inf)]
    pts += [(fps[i] / n_neg, tps[i] / n_pos, float(ps[distinct[i]])) for i in range(distinct.size)]
    return pts


def trapezoid_auc(points):
    x = np.array([pt[0] for pt in points])
    y = np.array([pt[1] for pt in points])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


# ---------------------------------------------------------------- aggregation


def quartiles(values):
    """(Q1, median, Q3) by linear interpolation on the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    return tuple(float(np.percentile(v, q, method="linear")) for q in (25, 50, 75))


@dataclass
class RunEnsemble:
    """Per-run reports of one model kind, keyed by scenario."""

    kind: str
    seeds: list
    reports: dict  # scenario -> [MetricsReport] in seed order
    predictions: dict = field(default_factory=dict)  # scenario -> [prob arrays]
    labels: object = None
    record_ids: list = field(default_factory=list)
    failed: list = field(default_factory=list)

    @property
    def partial(self):
        return bool(self.failed)

    def values(self, scenario, metric):
        return [getattr(r, metric) for r in self.reports[scenario]]

    def summary(self):
        return {s: aggregate(self.reports[s]) for s in self.reports}

    def correctness(self, scenario, threshold=0.5):
        """(runs x records) boolean array of correct calls."""
        y = np.asarray(self.labels)
        return np.array([(np.asarray(p) >= threshold).astype(int) == y for p in self.predictions[scenario]])


def aggregate(reports):
    """Median and IQR of every metric over runs (``None`` values are skipped)."""
    if len(reports) < 1:
        raise ValueError("aggregate needs at least one run")
    out = {}
    for k in METRIC_KEYS:
        vals = [getattr(r, k) if isinstance(r, MetricsReport) else r[k] for r in reports]
        vals = [v for v in vals if v is not None]
        if not vals:
            out[k] = {"median": None, "q1": None, "q3": None, "iqr": None, "n": 0}
            continue
        q1, med, q3 = quartiles(vals)
        out[k] = {"median": med, "q1": q1, "q3": q3, "iqr": q3 - q1, "n": len(vals)}
    return out


# ---------------------------------------------------------------- rank-sum test


def _rank_sum_counts(doubled_ranks, k):
    """Number of size-``k`` subsets of the pooled sample per doubled rank sum."""
    total = int(sum(doubled_ranks))
    counts = np.zeros((k + 1, total + 1), dtype=object)
    counts[0, 0] = 1
    for r in doubled_ranks:
        r = int(r)
        for j in range(k, 0, -1):
            counts[j, r:] = counts[j, r:] + counts[j - 1, : total + 1 - r]
    return counts[k]


def wilcoxon_rank_sum(a, b, exact=None):
    """Two-sided Wilcoxon rank-sum (Mann-Whitney) test.

    Returns ``(U, p)`` with ``U`` the statistic of ``a``. The p-value is exact
    (distribution of the midrank sum over all group assignments) when the
    pooled size is at most 20 and normal-approximated with tie and continuity
    correction above. Two-sided means: outcomes at least as far from the null
    mean as the observed rank sum.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = a.size, b.size
    if na < 1 or nb < 1:
        raise ValueError("both groups need at least one value")
    n = na + nb
    ranks = midranks(np.r_[a, b])
    ra = ranks[:na].sum()
    u = float(ra - na * (na + 1) / 2.0)
    if exact is None:
        exact = n <= EXACT_MAX_N
    if exact:
        doubled = np.round(2 * ranks).astype(np.int64)
        counts = _rank_sum_counts(doubled, na)
        obs = int(round(2 * ra))
        mean2 = na * (n + 1)  # doubled null mean of the rank sum
        dev = abs(obs - mean2)
        sums = np.arange(counts.size)
        hit = np.abs(sums - mean2) >= dev
        num = int(sum(counts[hit]))
        den = int(sum(counts))
        return u, min(1.0, num / den)
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(tie_counts**3 - tie_counts))
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return u, 1.0
    mu = na * nb / 2.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return u, min(1.0, math.erfc(z / math.sqrt(2)))


# ---------------------------------------------------------------- differential analysis


@dataclass
class DifferentialSummary:
    iterations: int
    mean: dict  # stratum -> category -> float
    sd: dict
    per_iteration: dict  # stratum -> (iterations x 4) array

    def rows(self):
        for s in STRATA:
            for i, c in enumerate(CATEGORIES):
                yield s, c, self.mean[s][c], self.sd[s][c], self.iterations


def category_fractions(correct_a, correct_b):
    """Fractions (both, neither, a_only, b_only) over the given records."""
    a = np.asarray(correct_a, dtype=bool)
    b = np.asarray(correct_b, dtype=bool)
    n = a.size
    if n == 0:
        return np.zeros(4)
    both = np.sum(a & b)
    neither = np.sum(~a & ~b)
    a_only = np.sum(a & ~b)
    b_only = n - both - neither - a_only
    return np.array([both, neither, a_only, b_only], dtype=np.float64) / n


def bootstrap_differential(correct_a, correct_b, labels, iterations=200, seed=0, ids_a=None, ids_b=None):
    """Distribution of records classified correctly by both, neither or one model.

    ``correct_a``/``correct_b`` are (runs x records) boolean arrays for the two
    ensembles (``a`` is the M3 ensemble by convention). Each iteration draws
    one run from each ensemble uniformly at random.
    """
    if ids_a is not None and ids_b is not None and list(ids_a) != list(ids_b):
        raise ValueError("record ids of the two ensembles do not match")
    ca = np.atleast_2d(np.asarray(correct_a, dtype=bool))
    cb = np.atleast_2d(np.asarray(correct_b, dtype=bool))
    y = np.asarray(labels).reshape(-1)
    if ca.shape[1] != y.size or cb.shape[1] != y.size:
        raise ValueError(f"record counts differ: {ca.shape[1]}, {cb.shape[1]} vs {y.size} labels")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    masks = {"positives": y == 1, "negatives": y == 0, "all": np.ones(y.size, dtype=bool)}
    per = {s: np.empty((iterations, 4)) for s in STRATA}
    for it in range(iterations):
        rng = np.random.default_rng([seed, it])
        i = int(rng.integers(ca.shape[0]))
        j = int(rng.integers(cb.shape[0]))
        for s, m in masks.items():
            per[s][it] = category_fractions(ca[i, m], cb[j, m])
    ddof = 1 if iterations > 1 else 0
    # centring on the first draw is exact algebra but keeps identical draws free of rounding residue
    dev = {s: per[s] - per[s][0] for s in STRATA}
    mean = {s: dict(zip(CATEGORIES, (per[s][0] + dev[s].mean(axis=0)).tolist())) for s in STRATA}
    sd = {s: dict(zip(CATEGORIES, dev[s].std(axis=0, ddof=ddof).tolist())) for s in STRATA}
    return DifferentialSummary(iterations, mean, sd, per)


def write_differential_csv(path, summary):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stratum", "category", "mean", "sd", "iterations"])
        for s, c, m, sd, it in summary.rows():
            w.writerow([s, c, repr(float(m)), repr(float(sd)), it])


# ---------------------------------------------------------------- calibration


def calibration(preds, labels, n_bins=10):
    """Equal-width reliability table plus Brier score.

    Each row is ``(bin_lo, bin_hi, count, mean_predicted, observed)``; empty
    bins have count 0 and ``None`` for the two means.
    """
    p, y = _aligned(preds, labels)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.floor(p * n_bins).astype(int), 0, n_bins - 1)
    rows = []
    for b in range(n_bins):
        m = idx == b
        cnt = int(m.sum())
        rows.append(
            (
                float(edges[b]),
                float(edges[b + 1]),
                cnt,
                float(p[m].mean()) if cnt else None,
                float(y[m].mean()) if cnt else None,
            )
        )
    return rows, brier(p, y)


# ---------------------------------------------------------------- graders


def read_grader_csv(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"record_id", "grader_id", "seniority", "call"}
        if not reader.fieldnames or not need <= set(reader.fieldnames):
            raise ValueError(f"{path}: grader CSV needs columns {sorted(need)}, got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            if row["seniority"] not in SENIORITY:
                raise ValueError(f"{path} row {lineno}: seniority must be one of {SENIORITY}, got {row['seniority']!r}")
            if row["call"] not in ("0", "1"):
                raise ValueError(f"{path} row {lineno}: call must be 0 or 1, got {row['call']!r}")
            rows.append((row["record_id"], row["grader_id"], row["seniority"], int(row["call"])))
    return rows


def compare_with_graders(model_preds, grader_rows, labels, threshold=0.5, scenario="", feature="rpd"):
    """Panels for each grader, per-seniority and overall summaries, and the model comparison.

    ``model_preds`` is a list of probability vectors (one per model run) over
    the records in ``labels`` (a ``{record_id: 0/1}`` mapping, in order).
    ``grader_rows`` are ``(record_id, grader_id, seniority, call)`` tuples, as
    returned by :func:`read_grader_csv`.
    """
    ids = list(labels)
    y = np.array([labels[r] for r in ids])
    calls = defaultdict(dict)
    seniority = {}
    for rid, gid, sen, call in grader_rows:
        calls[gid][rid] = call
        seniority[gid] = sen
    gaps = {g: sorted(set(ids) - set(c)) for g, c in calls.items()}
    gaps = {g: m for g, m in gaps.items() if m}
    if gaps:
        detail = "; ".join(f"{g}: missing {len(m)} (e.g. {', '.join(m[:3])})" for g, m in sorted(gaps.items()))
        raise ValueError(f"graders do not cover every record: {detail}")
    graders = {}
    for gid in sorted(calls):
        c = np.array([calls[gid][r] for r in ids])
        rep = panel_from_calls(c, y, scenario, feature)
        graders[gid] = {
            "seniority": seniority[gid],
            "panel": rep.to_dict(),
            "roc_point": {"fpr": 1.0 - rep.specificity, "tpr": rep.sensitivity},
        }
    groups = {}
    for name in SENIORITY + ("overall",):
        members = [g for g in graders if name == "overall" or graders[g]["seniority"] == name]
        if members:
            groups[name] = {"n_graders": len(members), "summary": aggregate([graders[g]["panel"] for g in members])}
    model_reports = [panel(p, y, threshold, scenario, feature) for p in model_preds]
    model_f1 = [r.f1 for r in model_reports]
    grader_f1 = [graders[g]["panel"]["f1"] for g in graders]
    u, pval = wilcoxon_rank_sum(model_f1, grader_f1) if model_f1 and grader_f1 else (None, None)
    return {
        "graders": graders,
        "groups": groups,
        "model": {"runs": [r.to_dict() for r in model_reports], "summary": aggregate(model_reports)},
        "rank_sum_f1": {"u": u, "p": pval, "n_model": len(model_f1), "n_graders": len(grader_f1)},
    }


# ---------------------------------------------------------------- file formats


def write_predictions_csv(path, record_ids, scenario, probs, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "scenario", "probability", "label"])
        for rid, p, y in zip(record_ids, probs, labels):
            w.writerow([rid, scenario, repr(float(p)), int(y)])


def append_predictions_csv(path, record_ids, scenario, probs, labels):
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for rid, p, y in zip(record_ids, probs, labels):
            w.writerow([rid, scenario, repr(float(p)), int(y)])


def read_predictions_csv(path):
    """``{scenario: (record_ids, probs, labels)}``."""
    out = defaultdict(lambda: ([], [], []))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids, ps, ys = out[row["scenario"]]
            ids.append(row["record_id"])
            ps.append(float(row["probability"]))
            ys.append(int(row["label"]))
    return {s: (ids, np.array(ps), np.array(ys)) for s, (ids, ps, ys) in out.items()}


def write_roc_csv(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in points:
            w.writerow([repr(float(f)), repr(float(t)), "inf" if math.isinf(th) else repr(float(th))])


def write_calibration_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count", "mean_predicted", "observed"])
        for lo, hi, cnt, mp, ob in rows:
            w.writerow([repr(lo), repr(hi), cnt, "" if mp is None else repr(mp), "" if ob is None else repr(ob)])
