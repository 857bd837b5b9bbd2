"""Expression data model: counts, normalization, controls, splits.

Cells carry (perturbation set, cell_line, batch) metadata; controls have
an empty perturbation set. Normalized values are log1p of library-size
normalized counts with target size 4000. Deltas are centered on the
batch-matched control mean of the same (cell_line, batch).
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng

logger = logging.getLogger("txpert")

TARGET_LIBRARY_SIZE = 4000.0

CONTROL_LABEL = "control"

__all__ = [
    "ExpressionDataset",
    "ControlIndex",
    "SplitSpec",
    "normalize",
    "control_means",
    "delta",
    "match_control",
    "split_by_perturbation",
    "split_cross_cell_line",
    "save_dataset",
    "load_dataset",
    "encode_perturbation",
    "decode_perturbation",
    "top_variable_genes",
    "restrict_genes",
]


def normalize(counts, target: float = TARGET_LIBRARY_SIZE) -> np.ndarray:
    """log(1 + target * x / ||x||_1) per cell; rejects all-zero cells."""
    x = np.asarray(counts, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    totals = x.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        bad = int(np.flatnonzero(totals.reshape(-1) <= 0)[0])
        raise ValueError(f"cell {bad} has zero total count")
    out = np.log1p(target * x / totals)
    return out[0] if squeeze else out


def encode_perturbation(pert: tuple) -> str:
    return CONTROL_LABEL if not pert else "+".join(pert)


def decode_perturbation(text: str) -> tuple:
    if text == CONTROL_LABEL:
        return ()
    return tuple(sorted(text.split("+")))


@dataclass
class ExpressionDataset:
    """Cells x genes counts plus per-cell metadata.

    Treated as immutable after construction; `normalized` is computed
    lazily and cached.
    """

    genes: tuple
    counts: np.ndarray = field(repr=False)
    cell_ids: tuple = ()
    perturbations: tuple = ()  # tuple of sorted gene-id tuples, () = control
    cell_lines: tuple = ()
    batches: tuple = ()
    basal_embeddings: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.genes = tuple(self.genes)
        if len(set(self.genes)) != len(self.genes):
            raise ValueError("duplicate gene ids")
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 2 or self.counts.shape[1] != len(self.genes):
            raise ValueError("counts must be (cells, genes)")
        if np.any(self.counts < 0) or not np.all(np.isfinite(self.counts)):
            raise ValueError("counts must be finite and nonnegative")
        n = self.counts.shape[0]
        if not self.cell_ids:
            self.cell_ids = tuple(f"cell{i}" for i in range(n))
        self.cell_ids = tuple(self.cell_ids)
        self.perturbations = tuple(tuple(sorted(p)) for p in self.perturbations)
        self.cell_lines = tuple(self.cell_lines)
        self.batches = tuple(self.batches)
        for fieldname, values in (
            ("cell_ids", self.cell_ids),
            ("perturbations", self.perturbations),
            ("cell_lines", self.cell_lines),
            ("batches", self.batches),
        ):
            if len(values) != n:
                raise ValueError(f"{fieldname} has {len(values)} entries for {n} cells")
        if len(set(self.cell_ids)) != n:
            raise ValueError("duplicate cell ids")
        if any(not c for c in self.cell_lines) or any(not b for b in self.batches):
            raise ValueError("every cell needs a cell_line and batch")
        self._normalized = None

    @property
    def n_cells(self) -> int:
        return self.counts.shape[0]

    @property
    def n_genes(self) -> int:
        return len(self.genes)

    @property
    def normalized(self) -> np.ndarray:
        if self._normalized is None:
            self._normalized = normalize(self.counts)
            self._normalized.flags.writeable = False
        return self._normalized

    def is_control(self) -> np.ndarray:
        return np.array([len(p) == 0 for p in self.perturbations])

    def contexts(self) -> list:
        return sorted({(c, b) for c, b in zip(self.cell_lines, self.batches)})

    def unique_perturbations(self) -> list:
        return sorted({p for p in self.perturbations if p})

    def cells_of_perturbation(self) -> dict:
        out: dict = {}
        for i, p in enumerate(self.perturbations):
            if p:
                out.setdefault(p, []).append(i)
        return out


@dataclass(frozen=True)
class ControlIndex:
    """Per (cell_line, batch) control membership and mean normalized profile."""

    members: dict = field(repr=False)     # (c,b) -> np int array of cell indices
    means: dict = field(repr=False)       # (c,b) -> mean normalized profile
    line_members: dict = field(repr=False)
    line_means: dict = field(repr=False)

    def mean(self, cell_line, batch) -> np.ndarray:
        key = (cell_line, batch)
        if key not in self.means:
            raise ValueError(f"no control cells for cell_line={cell_line!r}, batch={batch!r}")
        return self.means[key]

    def line_mean(self, cell_line) -> np.ndarray:
        if cell_line not in self.line_means:
            raise ValueError(f"no control cells for cell_line={cell_line!r}")
        return self.line_means[cell_line]

    def has(self, cell_line, batch) -> bool:
        return (cell_line, batch) in self.means


def control_means(dataset: ExpressionDataset) -> ControlIndex:
    """Mean normalized control profile per (cell_line, batch) and per line."""
    norm = dataset.normalized
    members: dict = {}
    line_members: dict = {}
    for i, p in enumerate(dataset.perturbations):
        if p:
            continue
        members.setdefault((dataset.cell_lines[i], dataset.batches[i]), []).append(i)
        line_members.setdefault(dataset.cell_lines[i], []).append(i)
    members = {k: np.array(v, dtype=np.intp) for k, v in sorted(members.items())}
    line_members = {k: np.array(v, dtype=np.intp) for k, v in sorted(line_members.items())}
    means = {k: norm[v].mean(axis=0) for k, v in members.items()}
    line_means = {k: norm[v].mean(axis=0) for k, v in line_members.items()}
    return ControlIndex(members, means, line_members, line_means)


def delta(profile, cell_line, batch, index: ControlIndex) -> np.ndarray:
    """Profile minus the batch-matched control mean."""
    return np.asarray(profile, dtype=np.float64) - index.mean(cell_line, batch)


def match_control(dataset: ExpressionDataset, cell: int, mode: str, rng,
                  index: ControlIndex | None = None) -> np.ndarray:
    """Basal profile for a perturbed cell from matching controls.

    mode='sample' draws one control from the same (cell_line, batch);
    mode='average' returns the control mean. If the exact batch has no
    controls, falls back to the cell-line pool with a warning.
    """
    if mode not in ("sample", "average"):
        raise ValueError(f"unknown basal mode {mode!r}")
    if index is None:
        index = control_means(dataset)
    line, batch = dataset.cell_lines[cell], dataset.batches[cell]
    key = (line, batch)
    if key in index.members:
        pool = index.members[key]
        mean = index.means[key]
    elif line in index.line_members:
        logger.warning("no controls in batch %r for cell line %r; falling back to line pool",
                       batch, line)
        pool = index.line_members[line]
        mean = index.line_means[line]
    else:
        raise ValueError(f"no control cells in cell line {line!r}")
    if mode == "average":
        return mean
    pick = int(pool[int(_as_rng(rng).integers(len(pool)))])
    return dataset.normalized[pick]


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(int(rng))


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    """Perturbation -> split assignment; controls are visible to all splits."""

    assignment: dict = field(repr=False)  # pert tuple -> 'train'|'val'|'test'
    held_out_line: str | None = None
    seed: int = 0

    def __post_init__(self):
        for pert, split in self.assignment.items():
            if split not in ("train", "val", "test"):
                raise ValueError(f"bad split label {split!r} for {pert}")

    def perturbations(self, split: str) -> list:
        return sorted(p for p, s in self.assignment.items() if s == split)

    def split_of_cell(self, dataset: ExpressionDataset, i: int) -> str | None:
        """Split of a perturbed cell; None for controls (shared)."""
        pert = dataset.perturbations[i]
        if not pert:
            return None
        if self.held_out_line is not None and dataset.cell_lines[i] == self.held_out_line:
            return "test"
        if pert not in self.assignment:
            raise ValueError(f"perturbation {encode_perturbation(pert)} missing from split")
        return self.assignment[pert]

    def cell_indices(self, dataset: ExpressionDataset, split: str) -> np.ndarray:
        out = [i for i in range(dataset.n_cells)
               if dataset.perturbations[i] and self.split_of_cell(dataset, i) == split]
        return np.array(out, dtype=np.intp)

    def to_json(self) -> str:
        payload = {
            "assignment": {encode_perturbation(p): s for p, s in sorted(self.assignment.items())},
            "held_out_line": self.held_out_line,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SplitSpec":
        payload = json.loads(text)
        assignment = {decode_perturbation(k): v for k, v in payload["assignment"].items()}
        return SplitSpec(assignment, payload.get("held_out_line"), payload.get("seed", 0))


def _validate_controls(dataset: ExpressionDataset) -> None:
    lines_with_controls = {dataset.cell_lines[i] for i in range(dataset.n_cells)
                           if not dataset.perturbations[i]}
    for i in range(dataset.n_cells):
        if dataset.perturbations[i] and dataset.cell_lines[i] not in lines_with_controls:
            raise ValueError(
                f"cell line {dataset.cell_lines[i]!r} has perturbed cells but no controls")


def _largest_remainder(n: int, ratios) -> list:
    quotas = [n * r for r in ratios]
    counts = [int(np.floor(q)) for q in quotas]
    short = n - sum(counts)
    remainders = sorted(range(len(ratios)), key=lambda j: (-(quotas[j] - counts[j]), j))
    for j in remainders[:short]:
        counts[j] += 1
    return counts


def split_by_perturbation(dataset: ExpressionDataset,
                          ratios=(0.5625, 0.1875, 0.25), seed: int = 0) -> SplitSpec:
    """Shuffle perturbations and partition to nearest counts."""
    rng = make_rng(int(seed))
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    perts = dataset.unique_perturbations()
    if len(perts) < len(ratios):
        raise ValueError(f"need at least {len(ratios)} perturbations, have {len(perts)}")
    _validate_controls(dataset)
    order = rng.permutation(len(perts))
    counts = _largest_remainder(len(perts), ratios)
    labels = ["train", "val", "test"][: len(ratios)]
    assignment: dict = {}
    pos = 0
    for label, k in zip(labels, counts):
        for j in order[pos:pos + k]:
            assignment[perts[int(j)]] = label
        pos += k
    return SplitSpec(assignment, None, int(seed))


def _stable_unit(seed: int, pert: tuple) -> float:
    """Deterministic uniform in [0,1) from (seed, perturbation id)."""
    digest = hashlib.sha256(f"{seed}:{encode_perturbation(pert)}".encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def split_cross_cell_line(dataset: ExpressionDataset, held_out_line: str,
                          rng_seed: int = 0, train_fraction: float = 0.75) -> SplitSpec:
    """Hold out one cell line: its perturbed cells go to test, controls stay.

    Remaining lines' perturbations are split train/val via a stable
    per-perturbation draw so the assignment does not depend on which
    line is held out.
    """
    if held_out_line not in set(dataset.cell_lines):
        raise ValueError(f"unknown cell line {held_out_line!r}")
    _validate_controls(dataset)
    other_perts: set = set()
    held_perts: set = set()
    for i, p in enumerate(dataset.perturbations):
        if not p:
            continue
        if dataset.cell_lines[i] == held_out_line:
            held_perts.add(p)
        else:
            other_perts.add(p)
    assignment: dict = {}
    for p in sorted(other_perts):
        assignment[p] = "train" if _stable_unit(rng_seed, p) < train_fraction else "val"
    for p in sorted(held_perts - other_perts):
        assignment[p] = "test"
    return SplitSpec(assignment, held_out_line, rng_seed)


# ---------------------------------------------------------------------------
# directory format


def save_dataset(dataset: ExpressionDataset, dirpath) -> None:
    """Write genes.tsv / cells.tsv / counts.tsv (+ basal_embeddings.tsv)."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    (dirpath / "genes.tsv").write_text("\n".join(dataset.genes) + "\n", encoding="utf-8")
    with open(dirpath / "cells.tsv", "w", encoding="utf-8") as fh:
        fh.write("cell_id\tperturbation\tcell_line\tbatch\n")
        for i in range(dataset.n_cells):
            fh.write(f"{dataset.cell_ids[i]}\t{encode_perturbation(dataset.perturbations[i])}"
                     f"\t{dataset.cell_lines[i]}\t{dataset.batches[i]}\n")
    with open(dirpath / "counts.tsv", "w", encoding="utf-8") as fh:
        fh.write("cell_idx\tgene_idx\tcount\n")
        rows, cols = np.nonzero(dataset.counts)
        for r, c in zip(rows, cols):
            fh.write(f"{r}\t{c}\t{float(dataset.counts[r, c])!r}\n")
    if dataset.basal_embeddings is not None:
        with open(dirpath / "basal_embeddings.tsv", "w", encoding="utf-8") as fh:
            dim = dataset.basal_embeddings.shape[1]
            fh.write("cell_id\t" + "\t".join(f"v{j + 1}" for j in range(dim)) + "\n")
            for i in range(dataset.n_cells):
                vals = "\t".join(repr(float(v)) for v in dataset.basal_embeddings[i])
                fh.write(f"{dataset.cell_ids[i]}\t{vals}\n")


def load_dataset(dirpath) -> ExpressionDataset:
    dirpath = Path(dirpath)
    genes = tuple((dirpath / "genes.tsv").read_text(encoding="utf-8").split())
    cell_ids, perts, lines, batches = [], [], [], []
    with open(dirpath / "cells.tsv", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != ["cell_id", "perturbation", "cell_line", "batch"]:
            raise ValueError(f"{dirpath}/cells.tsv:1: bad header")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{dirpath}/cells.tsv:{lineno}: expected 4 fields")
            cell_ids.append(parts[0])
            perts.append(decode_perturbation(parts[1]))
            lines.append(parts[2])
            batches.append(parts[3])
    counts = np.zeros((len(cell_ids), len(genes)))
    with open(dirpath / "counts.tsv", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != ["cell_idx", "gene_idx", "count"]:
            raise ValueError(f"{dirpath}/counts.tsv:1: bad header")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{dirpath}/counts.tsv:{lineno}: expected 3 fields")
            try:
                counts[int(parts[0]), int(parts[1])] = float(parts[2])
            except (ValueError, IndexError):
                raise ValueError(f"{dirpath}/counts.tsv:{lineno}: bad triplet {line!r}") from None
    basal = None
    emb_path = dirpath / "basal_embeddings.tsv"
    if emb_path.exists():
        by_id = {}
        with open(emb_path, encoding="utf-8") as fh:
            fh.readline()
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if len(parts) > 1:
                    by_id[parts[0]] = [float(v) for v in parts[1:]]
        basal = np.array([by_id[cid] for cid in cell_ids])
    return ExpressionDataset(genes, counts, tuple(cell_ids), tuple(perts),
                             tuple(lines), tuple(batches), basal)


# ---------------------------------------------------------------------------
# optional gene filtering


def top_variable_genes(dataset: ExpressionDataset, k: int) -> tuple:
    """Top-k genes by normalized variance across control cells."""
    ctrl = dataset.normalized[dataset.is_control()]
    if ctrl.shape[0] == 0:
        raise ValueError("no control cells to estimate gene variance")
    var = ctrl.var(axis=0)
    order = np.lexsort((np.arange(len(var)), -var))[:k]
    keep = np.sort(order)
    return tuple(dataset.genes[i] for i in keep)


def restrict_genes(dataset: ExpressionDataset, genes) -> ExpressionDataset:
    idx = {g: i for i, g in enumerate(dataset.genes)}
    cols = [idx[g] for g in genes]
    return ExpressionDataset(tuple(genes), dataset.counts[:, cols], dataset.cell_ids,
                             dataset.perturbations, dataset.cell_lines, dataset.batches,
                             dataset.basal_embeddings)
