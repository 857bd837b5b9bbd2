"""Composite perturbation model: basal encoder + perturbation encoder +
latent shift + decoder, with the training loop and prediction helpers.

Training follows the standard recipe: sample a perturbed batch, pick
batch-matched controls, refresh Z through the graph encoder, combine by
latent shift, decode, MSE, update. The checkpoint with the best
validation Pearson-on-deltas is returned.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Optimizer, Parameter, Tensor, backward, make_rng, mse_loss
from .data import ControlIndex, ExpressionDataset, SplitSpec, control_means
from .encoders import BasalEncoder, Mlp, perturbation_rows

logger = logging.getLogger("txpert")

__all__ = ["TxPertModel", "TrainConfig", "train", "predict", "predict_perturbation_deltas",
           "save_checkpoint", "load_checkpoint"]


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 200
    learning_rate: float = 1e-3
    patience: int = 10
    seed: int = 0
    basal_mode: str = "average"   # sample | average
    optimizer: str = "adam"       # adam | sgd
    target_mode: str = "cell"     # cell | mean

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.basal_mode not in ("sample", "average"):
            raise ValueError(f"unknown basal mode {self.basal_mode!r}")
        if self.target_mode not in ("cell", "mean"):
            raise ValueError(f"unknown target mode {self.target_mode!r}")


class TxPertModel:
    """Latent shift: yhat = dec(f_basal(x) + sum_p z_p); or the no-encoder
    variant (mode='delta_on_raw'): yhat = x + dec(sum_p z_p)."""

    def __init__(self, basal_encoder: BasalEncoder, pert_encoder, n_genes: int,
                 rng=None, mode: str = "latent_shift", decoder_hidden=None,
                 decoder_slope: float = 0.01):
        if mode not in ("latent_shift", "delta_on_raw"):
            raise ValueError(f"unknown model mode {mode!r}")
        if mode == "delta_on_raw" and basal_encoder.kind != "identity":
            raise ValueError("delta_on_raw requires the identity basal encoder")
        d_z = pert_encoder.out_dim
        if mode == "latent_shift" and basal_encoder.out_dim != d_z:
            raise ValueError(
                f"latent shift needs basal dim == perturbation dim "
                f"({basal_encoder.out_dim} != {d_z})")
        self.mode = mode
        self.basal = basal_encoder
        self.encoder = pert_encoder
        self.n_genes = n_genes
        if decoder_hidden is None:
            decoder_hidden = (4 * d_z, 4 * d_z)
        rng = rng if rng is not None else make_rng(0)
        self.decoder = Mlp((d_z, *decoder_hidden, n_genes), rng, "decoder", slope=decoder_slope)

    def params(self):
        out = list(self.encoder.params()) + list(self.basal.params()) + self.decoder.params()
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        return out

    def _shift(self, perts, n_rows: int) -> Tensor:
        z = self.encoder.forward()
        flat, seg = [], []
        for i, pert in enumerate(perts):
            for r in perturbation_rows(self.encoder, pert):
                flat.append(r)
                seg.append(i)
        if not flat:
            return Tensor(np.zeros((n_rows, z.shape[1])))
        gathered = ad.gather_rows(z, np.array(flat, dtype=np.intp))
        return ad.segment_sum(gathered, np.array(seg, dtype=np.intp), n_rows)

    def latent(self, x, perts) -> Tensor:
        """Pre-decoder latent s + sum_p z_p (latent_shift mode only)."""
        if self.mode != "latent_shift":
            raise ValueError("latent() is only defined for latent_shift mode")
        x = x if isinstance(x, Tensor) else Tensor(x)
        return ad.add(self.basal.forward(x), self._shift(perts, x.shape[0]))

    def forward(self, x, perts) -> Tensor:
        """Predict normalized expression for rows of basal input x.

        perts is one perturbation tuple per row; empty tuples are allowed
        (empty latent shift).
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if len(perts) != x.shape[0]:
            raise ValueError("one perturbation set per basal row required")
        shift = self._shift(perts, x.shape[0])
        if self.mode == "latent_shift":
            return self.decoder.forward(ad.add(self.basal.forward(x), shift))
        return ad.add(x, self.decoder.forward(shift))


# ---------------------------------------------------------------------------
# training


def _basal_matrix(dataset: ExpressionDataset, cells: np.ndarray, mode: str,
                  index: ControlIndex, rng) -> np.ndarray:
    """Stack basal inputs for the given cells (sampled or averaged controls)."""
    rows = np.empty((len(cells), dataset.n_genes))
    norm = dataset.normalized
    for j, i in enumerate(cells):
        key = (dataset.cell_lines[i], dataset.batches[i])
        if key in index.members:
            pool, mean = index.members[key], index.means[key]
        else:
            line = dataset.cell_lines[i]
            logger.warning("no controls in batch %r for line %r; using line pool",
                           dataset.batches[i], line)
            pool, mean = index.line_members[line], index.line_means[line]
        if mode == "average":
            rows[j] = mean
        else:
            rows[j] = norm[pool[int(rng.integers(len(pool)))]]
    return rows


def _observed_split_deltas(dataset: ExpressionDataset, split: SplitSpec, split_name: str,
                           index: ControlIndex):
    """Replicate-averaged observed delta and context weights per perturbation."""
    cells = split.cell_indices(dataset, split_name)
    norm = dataset.normalized
    by_pert: dict = {}
    for i in cells:
        by_pert.setdefault(dataset.perturbations[i], []).append(i)
    out = {}
    for pert, idxs in sorted(by_pert.items()):
        deltas = np.stack([
            norm[i] - index.mean(dataset.cell_lines[i], dataset.batches[i]) for i in idxs
        ])
        contexts: dict = {}
        for i in idxs:
            key = (dataset.cell_lines[i], dataset.batches[i])
            contexts[key] = contexts.get(key, 0) + 1
        out[pert] = (deltas.mean(axis=0), contexts, len(idxs))
    return out


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return float("nan")
    return float((a * b).sum() / denom)


def _model_split_pearson(model: TxPertModel, dataset: ExpressionDataset,
                         observed: dict, index: ControlIndex) -> float:
    """Mean Pearson between predicted and observed per-perturbation deltas."""
    if not observed:
        return float("nan")
    requests, owners = [], []
    for pert, (_, contexts, _) in observed.items():
        for (line, batch), count in sorted(contexts.items()):
            requests.append((pert, line, batch, count))
            owners.append(pert)
    x = np.stack([index.mean(line, batch) for _, line, batch, _ in requests])
    perts = [pert for pert, _, _, _ in requests]
    yhat = model.forward(x, perts).value
    pred: dict = {}
    weights: dict = {}
    for row, (pert, line, batch, count) in zip(yhat, requests):
        d = row - index.mean(line, batch)
        pred[pert] = pred.get(pert, 0.0) + count * d
        weights[pert] = weights.get(pert, 0) + count
    vals = []
    for pert, (obs_delta, _, _) in observed.items():
        r = _pearson(pred[pert] / weights[pert], obs_delta)
        if np.isfinite(r):
            vals.append(r)
    return float(np.mean(vals)) if vals else float("nan")


def train(model: TxPertModel, dataset: ExpressionDataset, split: SplitSpec,
          config: TrainConfig):
    """Optimize against train cells; return history and restore the
    checkpoint with the best validation Pearson on deltas.

    History rows are (epoch, train_mse, val_pearson_delta).
    """
    rng = make_rng(config.seed)
    index = control_means(dataset)
    train_cells = split.cell_indices(dataset, "train")
    if len(train_cells) == 0:
        raise ValueError("empty train split")
    val_observed = _observed_split_deltas(dataset, split, "val", index)

    norm = dataset.normalized
    perts_all = dataset.perturbations
    if config.target_mode == "mean":
        group_mean: dict = {}
        groups: dict = {}
        for i in train_cells:
            key = (perts_all[i], dataset.cell_lines[i], dataset.batches[i])
            groups.setdefault(key, []).append(i)
        for key, idxs in groups.items():
            group_mean[key] = norm[idxs].mean(axis=0)

    avg_basal = _basal_matrix(dataset, train_cells, "average", index, rng)
    pos_of = {int(c): j for j, c in enumerate(train_cells)}

    params = model.params()
    opt = Optimizer(params, learning_rate=config.learning_rate, mode=config.optimizer)
    history = []
    use_early_stop = bool(val_observed)
    best_val = -np.inf
    best_snapshot = None
    bad_epochs = 0

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_cells))
        total_sq, total_n = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            chunk = train_cells[order[start:start + config.batch_size]]
            if config.basal_mode == "average":
                x = avg_basal[[pos_of[int(i)] for i in chunk]]
            else:
                x = _basal_matrix(dataset, chunk, "sample", index, rng)
            if config.target_mode == "mean":
                y = np.stack([
                    group_mean[(perts_all[i], dataset.cell_lines[i], dataset.batches[i])]
                    for i in chunk
                ])
            else:
                y = norm[chunk]
            batch_perts = [perts_all[i] for i in chunk]
            try:
                yhat = model.forward(x, batch_perts)
                loss = mse_loss(yhat, Tensor(y))
            except ValueError as exc:
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, step {start // config.batch_size}: {exc}"
                ) from exc
            backward(loss)
            opt.step()
            total_sq += loss.item() * len(chunk)
            total_n += len(chunk)
        train_mse = total_sq / total_n
        val_pd = _model_split_pearson(model, dataset, val_observed, index)
        history.append((epoch, train_mse, val_pd))
        if not use_early_stop:
            continue
        improved = np.isfinite(val_pd) and val_pd > best_val
        if improved or best_snapshot is None:
            if np.isfinite(val_pd):
                best_val = val_pd
            best_snapshot = [p.value.copy() for p in params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    if use_early_stop and best_snapshot is not None:
        for p, v in zip(params, best_snapshot):
            p.value = v
    return history


# ---------------------------------------------------------------------------
# prediction


def predict(model: TxPertModel, dataset: ExpressionDataset, requests,
            basal_mode: str = "average", rng=None, index: ControlIndex | None = None,
            clamp_target_value: float | None = None):
    """Predicted profile and delta per (perturbation, cell_line, batch).

    Output order matches the request order. clamp_target_value, when
    set, overwrites each perturbed target gene's predicted expression
    (post hoc; default off).
    """
    if index is None:
        index = control_means(dataset)
    if rng is not None and not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng))
    gene_pos = {g: i for i, g in enumerate(dataset.genes)}
    rows, perts = [], []
    for pert, line, batch in requests:
        pert = tuple(sorted(pert))
        if basal_mode == "average":
            rows.append(index.mean(line, batch))
        else:
            key = (line, batch)
            pool = index.members.get(key)
            if pool is None:
                pool = index.line_members.get(line)
                if pool is None:
                    raise ValueError(f"no control cells in cell line {line!r}")
                logger.warning("no controls in batch %r for line %r; using line pool", batch, line)
            rows.append(dataset.normalized[pool[int(rng.integers(len(pool)))]])
        perts.append(pert)
    x = np.stack(rows)
    yhat = model.forward(x, perts).value.copy()
    if clamp_target_value is not None:
        for j, pert in enumerate(perts):
            for gene in pert:
                if gene in gene_pos:
                    yhat[j, gene_pos[gene]] = clamp_target_value
    out = []
    for row, (pert, line, batch) in zip(yhat, requests):
        out.append((row, row - index.mean(line, batch)))
    return out


def predict_perturbation_deltas(model: TxPertModel, dataset: ExpressionDataset,
                                split: SplitSpec, split_name: str = "test",
                                index: ControlIndex | None = None) -> dict:
    """Per-perturbation predicted delta, context-weighted like the
    observed replicate average."""
    if index is None:
        index = control_means(dataset)
    observed = _observed_split_deltas(dataset, split, split_name, index)
    requests = []
    for pert, (_, contexts, _) in observed.items():
        for (line, batch), count in sorted(contexts.items()):
            requests.append((pert, line, batch, count))
    preds = predict(model, dataset, [(p, l, b) for p, l, b, _ in requests], index=index)
    acc: dict = {}
    wsum: dict = {}
    for (pert, line, batch, count), (_, d) in zip(requests, preds):
        acc[pert] = acc.get(pert, 0.0) + count * d
        wsum[pert] = wsum.get(pert, 0) + count
    return {pert: acc[pert] / wsum[pert] for pert in acc}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: TxPertModel, path) -> None:
    """All parameters by name plus a JSON config header; round-trips bitwise."""
    arrays = {f"param:{p.name}": p.value for p in model.params()}
    meta = {
        "mode": model.mode,
        "n_genes": model.n_genes,
        "basal_kind": model.basal.kind,
        "encoder_kind": model.encoder.config.kind,
        "encoder_config": dataclasses.asdict(model.encoder.config),
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(model: TxPertModel, path) -> dict:
    """Load parameter values by name into an identically-built model."""
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode())
        values = {k[len("param:"):]: blob[k] for k in blob.files if k.startswith("param:")}
    for p in model.params():
        if p.name not in values:
            raise ValueError(f"checkpoint is missing parameter {p.name!r}")
        v = values[p.name]
        if v.shape != p.value.shape:
            raise ValueError(f"shape mismatch for {p.name!r}: {v.shape} vs {p.value.shape}")
        p.value = v.astype(np.float64)
    return meta
