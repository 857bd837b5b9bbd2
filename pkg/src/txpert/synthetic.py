"""Graph-aware synthetic expression data with known ground-truth deltas.

Each gene carries a latent factor; perturbing p produces a raw effect
that mixes p's factor with its 1- and 2-hop neighbors' factors
(hop-decaying weights) plus a perturbation-specific component no graph
can explain, projected onto genes through the factor matrix. Every
condition's true mean profile is then projected onto the target library
size manifold, so normalization of the emitted counts recovers the
generated profiles exactly and replicate deltas are unbiased estimates
of the returned ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import make_rng
from .data import ExpressionDataset, TARGET_LIBRARY_SIZE
from .graphs import KnowledgeGraph, small_world_graph

__all__ = ["SyntheticSpec", "SynthTruth", "synth_generate", "default_spec",
           "raw_effect", "project_library"]

HOP_WEIGHTS = (1.0, 0.5, 0.25)


@dataclass(frozen=True)
class SyntheticSpec:
    """Reproducible recipe: (spec, seed) fully determines the dataset."""

    n_genes: int = 200
    n_perturbations: int = 60
    cell_lines: tuple = ("lineA", "lineB")
    n_batches: int = 3
    replicates: int = 30
    latent_dim: int = 10
    noise_std: float = 0.3
    graph: KnowledgeGraph | None = None  # default: seeded small-world on the genes
    seed: int = 0
    effect_scale: float = 0.5
    idiosyncratic_fraction: float = 0.25
    batch_offset_std: float = 0.2


def default_spec(**overrides) -> SyntheticSpec:
    return SyntheticSpec(**overrides)


@dataclass(frozen=True)
class SynthTruth:
    """Generator internals exposed for oracle tests.

    deltas holds the context-averaged true delta per perturbation;
    context_deltas the per-(pert, cell_line, batch) version that
    noise-free cells reproduce exactly.
    """

    deltas: dict
    context_deltas: dict = field(repr=False, default_factory=dict)
    factors: np.ndarray = field(repr=False, default=None)   # (genes, latent_dim)
    base: np.ndarray = field(repr=False, default=None)      # batchless base profile
    control_means: dict = field(repr=False, default_factory=dict)
    perturbation_genes: tuple = ()
    hop_weights: tuple = HOP_WEIGHTS


def project_library(profile: np.ndarray, target: float = TARGET_LIBRARY_SIZE) -> np.ndarray:
    """Rescale pseudo-counts so the profile sits on the normalization
    manifold (sum of expm1 equals the target library size)."""
    t = np.expm1(profile)
    return np.log1p(target * t / t.sum())


def _hop_sets(graph: KnowledgeGraph, node: int):
    nbrs = graph.undirected_neighbors()
    one = set(nbrs[node])
    two = set()
    for u in one:
        two |= nbrs[u]
    two -= one | {node}
    return sorted(one), sorted(two)


def raw_effect(graph: KnowledgeGraph, gene_idx: int, factors: np.ndarray,
               effect_scale: float, idio_fraction: float, idio: np.ndarray,
               hop_weights=HOP_WEIGHTS) -> np.ndarray:
    """Documented raw-effect formula, shared by generator and oracles.

    Every factor within two hops enters the mixture with a weight set by
    its hop distance (w0 for the gene itself, w1 per 1-hop neighbor, w2
    per 2-hop neighbor):

        mix = w0*u_p + w1*sum(u over 1-hop) + w2*sum(u over 2-hop)
        g = factors @ mix, standardized to unit gene-wise std
        raw = scale * (sqrt(1-f)*g + sqrt(f)*idio)

    The true mean of condition (p, c, b) is project_library(mu_cb + raw)
    and its true delta is that minus mu_cb.
    """
    w0, w1, w2 = hop_weights
    one, two = _hop_sets(graph, gene_idx)
    mix = w0 * factors[gene_idx]
    if one:
        mix = mix + w1 * factors[one].sum(axis=0)
    if two:
        mix = mix + w2 * factors[two].sum(axis=0)
    g = factors @ mix
    g = g / g.std()
    return effect_scale * (np.sqrt(1.0 - idio_fraction) * g + np.sqrt(idio_fraction) * idio)


def synth_generate(spec: SyntheticSpec):
    """Build (ExpressionDataset, SynthTruth) from a spec, fully seeded."""
    rng = make_rng(spec.seed)

    if spec.graph is not None:
        graph = spec.graph
        genes = graph.nodes
        if len(genes) != spec.n_genes:
            raise ValueError(f"graph has {len(genes)} nodes, spec wants {spec.n_genes} genes")
    else:
        graph = small_world_graph(spec.n_genes, k=6, p=0.1, rng=make_rng(spec.seed + 1))
        genes = graph.nodes
    n = len(genes)
    if spec.n_perturbations > n:
        raise ValueError("more perturbations than genes")

    pert_idx = np.sort(rng.choice(n, size=spec.n_perturbations, replace=False))
    pert_genes = tuple(genes[int(i)] for i in pert_idx)

    factors = rng.normal(0.0, 1.0 / np.sqrt(spec.latent_dim), size=(n, spec.latent_dim))
    mass = rng.uniform(0.5, 1.5, size=n)
    base = np.log1p(TARGET_LIBRARY_SIZE * mass / mass.sum())

    contexts = [(line, f"b{j}") for line in spec.cell_lines for j in range(spec.n_batches)]
    ctrl_means = {}
    for key in contexts:
        offset = rng.normal(0.0, spec.batch_offset_std, size=n)
        ctrl_means[key] = project_library(base + offset)

    raw_effects = {}
    for gi, gene in zip(pert_idx, pert_genes):
        idio = rng.normal(0.0, 1.0, size=n)
        idio = idio / idio.std()
        raw_effects[(gene,)] = raw_effect(graph, int(gi), factors, spec.effect_scale,
                                          spec.idiosyncratic_fraction, idio)

    context_deltas = {}
    deltas = {}
    for pert, raw in raw_effects.items():
        acc = np.zeros(n)
        for key in contexts:
            d = project_library(ctrl_means[key] + raw) - ctrl_means[key]
            context_deltas[(pert, *key)] = d
            acc += d
        deltas[pert] = acc / len(contexts)

    conditions = [()] + [(g,) for g in pert_genes]
    counts, cell_ids, perts, lines, batches = [], [], [], [], []
    for line, batch in contexts:
        mean_ctrl = ctrl_means[(line, batch)]
        for cond in conditions:
            true_mean = mean_ctrl if not cond else mean_ctrl + context_deltas[(cond, line, batch)]
            label = "control" if not cond else cond[0]
            for r in range(spec.replicates):
                profile = true_mean
                if spec.noise_std > 0:
                    profile = profile + rng.normal(0.0, spec.noise_std, size=n)
                profile = np.maximum(profile, 0.0)
                counts.append(np.expm1(profile))
                cell_ids.append(f"{line}_{batch}_{label}_{r}")
                perts.append(cond)
                lines.append(line)
                batches.append(batch)

    dataset = ExpressionDataset(genes, np.array(counts), tuple(cell_ids), tuple(perts),
                                tuple(lines), tuple(batches))
    truth = SynthTruth(deltas, context_deltas, factors, base, ctrl_means, pert_genes)
    return dataset, truth
