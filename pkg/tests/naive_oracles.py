"""Deliberately slow, loop-based reimplementations of every metric.

These stay independent of the library code paths: plain Python loops,
no shared helpers. Used by the unit tests and the acceptance suite.
"""

import math

import numpy as np


def naive_pearson(a, b):
    a = [float(v) for v in np.asarray(a).reshape(-1)]
    b = [float(v) for v in np.asarray(b).reshape(-1)]
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((y - mb) ** 2 for y in b))
    if da == 0.0 or db == 0.0:
        return float("nan")
    return num / (da * db)


def naive_retrieval(predictions, references, subset=None):
    """rank(p) = (1/(N-1)) * #{q != p : corr(pred_p, ref_p) >= corr(pred_p, ref_q)}."""
    out = {}
    for p, pred in predictions.items():
        pool = list(references) if subset is None else list(subset)
        if p not in pool:
            pool = pool + [p]
        self_sim = naive_pearson(pred, references[p])
        hits, total = 0, 0
        for q in pool:
            if q == p:
                continue
            total += 1
            if self_sim >= naive_pearson(pred, references[q]):
                hits += 1
        out[p] = hits / total
    return out


def naive_split_half(groups, control_means, n_seeds, seed):
    """groups: {(pert, line, batch): array of normalized profiles}."""
    from txpert.autodiff import make_rng

    per_pert_avgs = {}
    for s in range(n_seeds):
        rng = make_rng(seed + s)
        vals = {}
        for (pert, line, batch), rows in sorted(groups.items(), key=lambda kv: kv[0]):
            k = len(rows)
            order = rng.permutation(k)
            half = (k + 1) // 2
            m1 = rows[order[:half]].mean(axis=0)
            m2 = rows[order[half:]].mean(axis=0)
            ctrl = control_means[(line, batch)]
            vals.setdefault(pert, []).append(naive_pearson(m1 - ctrl, m2 - ctrl))
        for pert, vv in vals.items():
            finite = [v for v in vv if not math.isnan(v)]
            if finite:
                per_pert_avgs.setdefault(pert, []).append(sum(finite) / len(finite))
    per_pert = {p: sum(v) / len(v) for p, v in per_pert_avgs.items()}
    overall = sum(per_pert.values()) / len(per_pert) if per_pert else float("nan")
    return overall, per_pert
