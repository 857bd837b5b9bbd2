"""Metric suite: Pearson on deltas, retrieval ranks, split-half
reproducibility, and the non-learned general baseline.

All aggregates are means of per-perturbation means. Perturbations whose
predicted or observed delta has zero variance are excluded from
aggregates and flagged in the report.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng
from .data import (ControlIndex, ExpressionDataset, SplitSpec,
                   control_means, encode_perturbation)

logger = logging.getLogger("txpert")

SCHEMA_VERSION = 1

__all__ = [
    "pearson",
    "pearson_delta",
    "cosine",
    "retrieval",
    "split_half_reproducibility",
    "GeneralBaseline",
    "batch_informed_baseline",
    "MetricReport",
    "evaluate",
]


def pearson(a, b) -> float:
    """Pearson correlation; NaN when either vector has zero variance."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = np.sqrt((ac * ac).sum() * (bc * bc).sum())
    if denom == 0.0:
        return float("nan")
    return float((ac * bc).sum() / denom)


def pearson_delta(pred_delta, obs_delta) -> float:
    """Correlation between predicted and observed replicate-averaged deltas."""
    return pearson(pred_delta, obs_delta)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return float("nan")
    return float(a @ b / denom)


_SIMILARITIES = {"pearson": pearson, "cosine": cosine}


def retrieval(predictions: dict, references: dict, mode: str = "full",
              seed: int = 0, similarity: str = "pearson") -> dict:
    """Per-perturbation rank scores in [0, 1].

    rank(p) = fraction of non-self references q with
    sim(pred_p, ref_p) >= sim(pred_p, ref_q); ties count in favor.
    mode='fast' scores against a seeded random reference set of 100
    perturbations (plus the query when absent), falling back to full
    with a warning when fewer than 100 references exist.
    """
    if mode not in ("full", "fast"):
        raise ValueError(f"unknown retrieval mode {mode!r}")
    sim = _SIMILARITIES[similarity]
    ref_keys = sorted(references)
    if len(ref_keys) < 2:
        raise ValueError("retrieval needs at least 2 perturbations")
    fast_set = None
    if mode == "fast":
        if len(ref_keys) < 100:
            logger.warning("fast retrieval needs >= 100 references, have %d; using full",
                           len(ref_keys))
        else:
            rng = make_rng(seed)
            chosen = rng.choice(len(ref_keys), size=100, replace=False)
            fast_set = [ref_keys[int(i)] for i in sorted(chosen)]

    out = {}
    for p, pred in predictions.items():
        if p not in references:
            raise ValueError(f"no reference delta for {encode_perturbation(p)}")
        pool = ref_keys if fast_set is None else (
            fast_set if p in fast_set else fast_set + [p])
        self_sim = sim(pred, references[p])
        hits, total = 0, 0
        for q in pool:
            if q == p:
                continue
            total += 1
            if self_sim >= sim(pred, references[q]):
                hits += 1
        out[p] = hits / total
    return out


def split_half_reproducibility(dataset: ExpressionDataset, split: SplitSpec,
                               split_name: str = "test", metric: str = "pearson_delta",
                               n_seeds: int = 5, seed: int = 0,
                               index: ControlIndex | None = None):
    """Agreement between mean profiles of two random halves per (p, c, b).

    Halves have sizes ceil(k/2) and floor(k/2); groups with fewer than 2
    cells are skipped with a warning. Values are aggregated per
    perturbation then averaged, and the whole procedure is repeated over
    n_seeds seeded half-splits.

    Returns (overall mean, per-perturbation dict averaged over seeds).
    """
    if metric not in ("pearson_delta", "mse"):
        raise ValueError(f"unsupported reproducibility metric {metric!r}")
    if index is None:
        index = control_means(dataset)
    norm = dataset.normalized
    groups: dict = {}
    for i in split.cell_indices(dataset, split_name):
        key = (dataset.perturbations[i], dataset.cell_lines[i], dataset.batches[i])
        groups.setdefault(key, []).append(i)
    usable = {}
    for key, idxs in sorted(groups.items()):
        if len(idxs) < 2:
            logger.warning("skipping %s with %d cell(s) in split-half reproducibility",
                           key, len(idxs))
            continue
        usable[key] = np.array(idxs, dtype=np.intp)
    if not usable:
        return float("nan"), {}

    per_pert_acc: dict = {}
    for s in range(n_seeds):
        rng = make_rng(seed + s)
        per_pert_vals: dict = {}
        for (pert, line, batch), idxs in usable.items():
            order = rng.permutation(len(idxs))
            half = (len(idxs) + 1) // 2
            first = norm[idxs[order[:half]]].mean(axis=0)
            second = norm[idxs[order[half:]]].mean(axis=0)
            ctrl = index.mean(line, batch)
            if metric == "pearson_delta":
                val = pearson(first - ctrl, second - ctrl)
            else:
                diff = first - second
                val = float(np.mean(diff * diff))
            per_pert_vals.setdefault(pert, []).append(val)
        for pert, vals in per_pert_vals.items():
            finite = [v for v in vals if np.isfinite(v)]
            if finite:
                per_pert_acc.setdefault(pert, []).append(float(np.mean(finite)))
    per_pert = {pert: float(np.mean(vals)) for pert, vals in per_pert_acc.items()}
    overall = float(np.mean(list(per_pert.values()))) if per_pert else float("nan")
    return overall, per_pert


# ---------------------------------------------------------------------------
# baselines


class GeneralBaseline:
    """Non-learned predictor from training-set mean deltas.

    Seen perturbations get their train mean delta; unseen ones the global
    train mean delta; multi-perturbations match the exact configuration
    first and otherwise add component estimates sequentially. Predictions
    are anchored at the requested (cell_line, batch) control mean.
    """

    def __init__(self, dataset: ExpressionDataset, split: SplitSpec,
                 index: ControlIndex | None = None):
        self.index = index if index is not None else control_means(dataset)
        norm = dataset.normalized
        train_cells = split.cell_indices(dataset, "train")
        if len(train_cells) == 0:
            raise ValueError("empty train split")
        sums: dict = {}
        counts: dict = {}
        total = np.zeros(dataset.n_genes)
        for i in train_cells:
            d = norm[i] - self.index.mean(dataset.cell_lines[i], dataset.batches[i])
            pert = dataset.perturbations[i]
            if pert not in sums:
                sums[pert] = np.zeros(dataset.n_genes)
                counts[pert] = 0
            sums[pert] += d
            counts[pert] += 1
            total += d
        self.mean_delta = {p: sums[p] / counts[p] for p in sums}
        self.n_train = len(train_cells)
        self.global_delta = total / self.n_train

    def delta_for(self, pert: tuple) -> np.ndarray:
        """Composed delta estimate without the control anchor."""
        pert = tuple(sorted(pert))
        if not pert:
            return np.zeros_like(self.global_delta)
        if pert in self.mean_delta:
            return self.mean_delta[pert]
        out = np.zeros_like(self.global_delta)
        for gene in pert:
            single = (gene,)
            out = out + (self.mean_delta[single] if single in self.mean_delta
                         else self.global_delta)
        return out

    def predict(self, pert: tuple, cell_line, batch) -> np.ndarray:
        return self.index.mean(cell_line, batch) + self.delta_for(pert)

    def __call__(self, pert, cell_line, batch) -> np.ndarray:
        return self.predict(pert, cell_line, batch)


def batch_informed_baseline(dataset: ExpressionDataset, split: SplitSpec,
                            l2: float = 1.0, index: ControlIndex | None = None):
    """Ridge regression from one-hot (cell_line, batch) ids to deltas.

    A non-canonical stand-in for a "learned model predicting from batch
    information"; it ignores the perturbation entirely and captures what
    batch confounding alone explains.
    """
    if index is None:
        index = control_means(dataset)
    contexts = dataset.contexts()
    pos = {ctx: j for j, ctx in enumerate(contexts)}
    train_cells = split.cell_indices(dataset, "train")
    x = np.zeros((len(train_cells), len(contexts)))
    y = np.zeros((len(train_cells), dataset.n_genes))
    norm = dataset.normalized
    for r, i in enumerate(train_cells):
        ctx = (dataset.cell_lines[i], dataset.batches[i])
        x[r, pos[ctx]] = 1.0
        y[r] = norm[i] - index.mean(*ctx)
    w = np.linalg.solve(x.T @ x + l2 * np.eye(len(contexts)), x.T @ y)

    def predictor(pert, cell_line, batch):
        onehot = np.zeros(len(contexts))
        ctx = (cell_line, batch)
        if ctx in pos:
            onehot[pos[ctx]] = 1.0
        return index.mean(cell_line, batch) + onehot @ w

    return predictor


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    """Per-perturbation metric records plus aggregates and references."""

    records: list = field(default_factory=list)  # dicts per perturbation
    aggregates: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    reproducibility: dict = field(default_factory=dict)
    excluded: list = field(default_factory=list)  # zero-variance perturbations
    seeds: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    timestamp: str = ""

    def to_json(self) -> str:
        payload = {
            "schema_version": self.schema_version,
            "records": self.records,
            "aggregates": self.aggregates,
            "baseline": self.baseline,
            "reproducibility": self.reproducibility,
            "excluded": self.excluded,
            "seeds": self.seeds,
            "timestamp": self.timestamp,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        d = json.loads(text)
        return MetricReport(d["records"], d["aggregates"], d["baseline"],
                            d["reproducibility"], d["excluded"], d["seeds"],
                            d["schema_version"], d.get("timestamp", ""))

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["perturbation", "n_cells", "pearson_delta", "retrieval", "fast_retrieval"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for rec in self.records:
            writer.writerow({k: rec.get(k, "") for k in cols})
        return buf.getvalue()


def evaluate(predict_fn, dataset: ExpressionDataset, split: SplitSpec,
             split_name: str = "test", fast_seed: int = 0, repro_seeds: int = 5,
             repro_seed: int = 0, include_baseline: bool = True,
             include_reproducibility: bool = True,
             index: ControlIndex | None = None) -> MetricReport:
    """Full metric report for a predictor on one split.

    predict_fn(pert_tuple, cell_line, batch) must return a normalized
    expression profile; models and baselines both fit this shape.
    """
    if index is None:
        index = control_means(dataset)
    norm = dataset.normalized
    cells = split.cell_indices(dataset, split_name)
    if len(cells) == 0:
        raise ValueError(f"empty {split_name} split")

    by_pert: dict = {}
    for i in cells:
        by_pert.setdefault(dataset.perturbations[i], []).append(i)

    observed: dict = {}
    predicted: dict = {}
    n_cells: dict = {}
    for pert, idxs in sorted(by_pert.items()):
        deltas = np.stack([
            norm[i] - index.mean(dataset.cell_lines[i], dataset.batches[i]) for i in idxs
        ])
        observed[pert] = deltas.mean(axis=0)
        n_cells[pert] = len(idxs)
        contexts: dict = {}
        for i in idxs:
            key = (dataset.cell_lines[i], dataset.batches[i])
            contexts[key] = contexts.get(key, 0) + 1
        acc, wsum = 0.0, 0
        for (line, batch), count in sorted(contexts.items()):
            yhat = np.asarray(predict_fn(pert, line, batch), dtype=np.float64)
            acc = acc + count * (yhat - index.mean(line, batch))
            wsum += count
        predicted[pert] = acc / wsum

    excluded = []
    usable = {}
    for pert in observed:
        if observed[pert].std() == 0.0 or predicted[pert].std() == 0.0:
            excluded.append(encode_perturbation(pert))
            logger.warning("excluding %s from aggregates: zero-variance delta",
                           encode_perturbation(pert))
        else:
            usable[pert] = True

    pd_scores = {p: pearson_delta(predicted[p], observed[p]) for p in usable}
    full_ranks = retrieval(predicted, observed, mode="full") if len(observed) >= 2 else {}
    fast_ranks = retrieval(predicted, observed, mode="fast", seed=fast_seed) \
        if len(observed) >= 2 else {}

    records = []
    for pert in sorted(observed):
        rec = {
            "perturbation": encode_perturbation(pert),
            "n_cells": n_cells[pert],
            "pearson_delta": pd_scores.get(pert),
            "retrieval": full_ranks.get(pert),
            "fast_retrieval": fast_ranks.get(pert),
        }
        records.append(rec)

    def agg(keyvals):
        vals = [v for v in keyvals if v is not None and np.isfinite(v)]
        return float(np.mean(vals)) if vals else None

    aggregates = {
        "pearson_delta": agg([pd_scores.get(p) for p in usable]),
        "retrieval": agg([full_ranks.get(p) for p in usable]),
        "fast_retrieval": agg([fast_ranks.get(p) for p in usable]),
        "n_perturbations": len(observed),
        "n_excluded": len(excluded),
    }

    baseline_block = {}
    if include_baseline:
        base = GeneralBaseline(dataset, split, index=index)
        base_pred = {}
        for pert in observed:
            acc, wsum = 0.0, 0
            for i in by_pert[pert]:
                key = (dataset.cell_lines[i], dataset.batches[i])
                acc = acc + (base.predict(pert, *key) - index.mean(*key))
                wsum += 1
            base_pred[pert] = acc / wsum
        base_scores = {p: pearson_delta(base_pred[p], observed[p]) for p in usable
                       if base_pred[p].std() > 0}
        baseline_block = {
            "pearson_delta": agg(list(base_scores.values())),
            "retrieval": agg(list(retrieval(base_pred, observed, mode="full").values()))
            if len(observed) >= 2 and all(v.std() > 0 for v in base_pred.values()) else None,
        }

    repro_block = {}
    if include_reproducibility:
        overall, _ = split_half_reproducibility(
            dataset, split, split_name, n_seeds=repro_seeds, seed=repro_seed, index=index)
        repro_block = {"pearson_delta": overall if np.isfinite(overall) else None,
                       "n_seeds": repro_seeds}

    return MetricReport(
        records=records,
        aggregates=aggregates,
        baseline=baseline_block,
        reproducibility=repro_block,
        excluded=sorted(excluded),
        seeds={"fast_retrieval": fast_seed, "reproducibility": repro_seed},
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
    )
