"""Gene-gene knowledge graphs: loading, construction, fusion, ablation.

Graphs are immutable once built. Edges are directed (source, target)
index pairs into a node tuple; transforms return new graphs and never
touch their inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng

__all__ = [
    "KnowledgeGraph",
    "ExpanderGraph",
    "UnionGraph",
    "SupraGraph",
    "load_edge_list",
    "save_graph",
    "load_embeddings",
    "build_from_embeddings",
    "rewire",
    "downsample",
    "generate_expander",
    "build_union",
    "build_supra",
    "small_world_graph",
    "random_graph",
]


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(int(rng))


@dataclass(frozen=True)
class KnowledgeGraph:
    """Weighted directed gene-gene graph without self-loops or duplicates."""

    name: str
    nodes: tuple
    edges: np.ndarray = field(repr=False)    # (E,2) intp, rows (source, target)
    weights: np.ndarray = field(repr=False)  # (E,) float64

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if edges.shape[0] != weights.shape[0]:
            raise ValueError("edge/weight count mismatch")
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate node ids")
        if edges.size:
            if edges.min() < 0 or edges.max() >= len(self.nodes):
                raise ValueError("edge index out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
            if not np.all(np.isfinite(weights)):
                raise ValueError("non-finite edge weight")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges, weights = edges[order], weights[order]
            if np.any(np.all(np.diff(edges, axis=0) == 0, axis=1)):
                raise ValueError("duplicate (source, target) edge")
        edges.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def node_index(self) -> dict:
        return {g: i for i, g in enumerate(self.nodes)}

    def edge_set(self) -> set:
        return {(int(s), int(t)) for s, t in self.edges}

    def in_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.n_nodes)

    def adjacency(self, weighted: bool = True) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        vals = self.weights if weighted else np.ones(self.n_edges)
        a[self.edges[:, 0], self.edges[:, 1]] = vals
        return a

    def undirected_neighbors(self) -> list:
        """Neighbor index sets ignoring edge direction."""
        nbrs = [set() for _ in range(self.n_nodes)]
        for s, t in self.edges:
            nbrs[int(s)].add(int(t))
            nbrs[int(t)].add(int(s))
        return nbrs

    def replace_edges(self, edges, weights, name: str | None = None) -> "KnowledgeGraph":
        return KnowledgeGraph(name or self.name, self.nodes, edges, weights)


def graphs_equal(a: KnowledgeGraph, b: KnowledgeGraph) -> bool:
    return (
        a.nodes == b.nodes
        and a.edges.shape == b.edges.shape
        and np.array_equal(a.edges, b.edges)
        and np.array_equal(a.weights, b.weights)
    )


@dataclass(frozen=True)
class ExpanderGraph:
    """Random d-regular simple undirected graph (pairing model)."""

    n: int
    degree: int
    edges: np.ndarray = field(repr=False)  # (E,2) with u < v, each edge once
    seed: int | None = None

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def directed_edges(self) -> np.ndarray:
        return np.vstack([self.edges, self.edges[:, ::-1]])


@dataclass(frozen=True)
class UnionGraph:
    """Union of directed edge sets with per-edge multi-hot provenance."""

    nodes: tuple
    edges: np.ndarray = field(repr=False)        # (E,2) intp
    provenance: np.ndarray = field(repr=False)   # (E,k) uint8, >=1 bit per row
    source_names: tuple = ()
    source_nodes: tuple = ()                     # node tuple per source graph
    source_weights: np.ndarray | None = field(default=None, repr=False)  # NaN where absent

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def extract_source(self, j: int) -> KnowledgeGraph:
        """Rebuild source graph j from its provenance bit."""
        mask = self.provenance[:, j] == 1
        name = self.source_names[j]
        src_nodes = self.source_nodes[j]
        idx = {g: i for i, g in enumerate(src_nodes)}
        edges = [
            (idx[self.nodes[s]], idx[self.nodes[t]])
            for s, t in self.edges[mask]
        ]
        weights = self.source_weights[mask, j] if self.source_weights is not None else np.ones(mask.sum())
        return KnowledgeGraph(name, src_nodes, np.array(edges, dtype=np.intp).reshape(-1, 2), weights)


@dataclass(frozen=True)
class SupraGraph:
    """Multilayer graph in supra-adjacency form.

    Supra node (layer l, node i of layer l) has index offsets[l] + i.
    Inter-layer edges couple the same entity across every pair of layers.
    """

    layers: tuple
    entities: tuple
    offsets: np.ndarray = field(repr=False)
    intra_edges: np.ndarray = field(repr=False)   # (E,2) supra indices, directed
    intra_weights: np.ndarray = field(repr=False)
    inter_edges: np.ndarray = field(repr=False)   # (E2,2) supra indices, both directions

    @property
    def n_supra(self) -> int:
        return int(self.offsets[-1])

    def all_edges(self) -> np.ndarray:
        return np.vstack([self.intra_edges, self.inter_edges])

    def entity_copies(self, entity) -> list:
        out = []
        for l, g in enumerate(self.layers):
            idx = g.node_index().get(entity)
            if idx is not None:
                out.append(int(self.offsets[l]) + idx)
        return out

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_supra, self.n_supra))
        a[self.intra_edges[:, 0], self.intra_edges[:, 1]] = self.intra_weights
        if self.inter_edges.size:
            a[self.inter_edges[:, 0], self.inter_edges[:, 1]] = 1.0
        return a


# ---------------------------------------------------------------------------
# loading and saving


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def load_edge_list(path, symmetrize: bool = False, name: str | None = None) -> KnowledgeGraph:
    """Read a `source<TAB>target<TAB>weight` TSV into a graph.

    Duplicate (source, target) rows keep the max weight; symmetrize adds a
    reversed copy of every edge. Malformed rows raise with line numbers.
    """
    path = Path(path)
    best: dict = {}
    nodes: list = []
    seen_nodes: set = set()

    def note(gene):
        if gene not in seen_nodes:
            seen_nodes.add(gene)
            nodes.append(gene)

    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != ["source", "target", "weight"]:
            raise ValueError(f"{path}:1: expected header 'source<TAB>target<TAB>weight'")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            src, dst, wtext = parts
            try:
                w = float(wtext)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: unknown weight {wtext!r}") from None
            if not np.isfinite(w):
                raise ValueError(f"{path}:{lineno}: non-finite weight {wtext!r}")
            if src == dst:
                raise ValueError(f"{path}:{lineno}: self-loop on {src!r}")
            note(src)
            note(dst)
            key = (src, dst)
            best[key] = max(best.get(key, -np.inf), w)

    sidecar = _sidecar_path(path)
    explicit_nodes = False
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if "nodes" in meta:
            nodes = list(meta["nodes"])
            explicit_nodes = True
        if name is None:
            name = meta.get("name")

    if symmetrize:
        for (src, dst), w in list(best.items()):
            rkey = (dst, src)
            best[rkey] = max(best.get(rkey, -np.inf), w)

    nodes = tuple(nodes) if explicit_nodes else tuple(sorted(nodes))
    idx = {g: i for i, g in enumerate(nodes)}
    pairs = sorted(best.items())
    edges = np.array([(idx[s], idx[t]) for (s, t), _ in pairs], dtype=np.intp).reshape(-1, 2)
    weights = np.array([w for _, w in pairs])
    return KnowledgeGraph(name or path.stem, nodes, edges, weights)


def save_graph(graph, path) -> None:
    """Write edge TSV plus a JSON sidecar with name/node metadata."""
    path = Path(path)
    if isinstance(graph, UnionGraph):
        nodes, name = graph.nodes, "union"
        rows = [(graph.nodes[s], graph.nodes[t], 1.0) for s, t in graph.edges]
        meta = {
            "name": name,
            "node_count": graph.n_nodes,
            "nodes": list(nodes),
            "provenance_labels": list(graph.source_names),
            "provenance": graph.provenance.tolist(),
        }
    else:
        nodes, name = graph.nodes, graph.name
        rows = [(graph.nodes[s], graph.nodes[t], w) for (s, t), w in zip(graph.edges, graph.weights)]
        meta = {"name": name, "node_count": graph.n_nodes, "nodes": list(nodes)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("source\ttarget\tweight\n")
        for s, t, w in rows:
            fh.write(f"{s}\t{t}\t{float(w)!r}\n")
    _sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")


def load_embeddings(path):
    """Read a `gene<TAB>v1..vD` TSV into (genes, matrix)."""
    path = Path(path)
    genes, rows = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if not header or header[0] != "gene":
            raise ValueError(f"{path}:1: expected header starting with 'gene'")
        dim = len(header) - 1
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(parts)}")
            genes.append(parts[0])
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric embedding value") from None
    return genes, np.array(rows)


# ---------------------------------------------------------------------------
# construction


def build_from_embeddings(genes, embeddings, top_fraction: float = 0.01,
                          max_in: int | None = None, symmetrize: bool = False,
                          name: str = "embedding") -> KnowledgeGraph:
    """Similarity graph: absolute pairwise cosine, top fraction of pairs.

    Keeps the top round(top_fraction * n_pairs) unordered pairs by
    |cosine|, orients each edge lexicographically (source < target), then
    optionally caps incoming edges per target at max_in (highest weights
    kept) and finally symmetrizes.
    """
    genes = list(genes)
    X = np.asarray(embeddings, dtype=np.float64)
    if len(genes) < 2:
        raise ValueError("need at least 2 genes")
    if X.shape[0] != len(genes):
        raise ValueError("one embedding row per gene required")
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        bad = genes[int(np.flatnonzero(norms == 0)[0])]
        raise ValueError(f"zero-norm embedding for gene {bad!r}")
    unit = X / norms[:, None]
    sim = np.abs(unit @ unit.T)

    n = len(genes)
    iu, ju = np.triu_indices(n, k=1)
    w = sim[iu, ju]
    n_keep = int(round(top_fraction * w.size))
    # stable deterministic order: weight desc, then pair indices
    order = np.lexsort((ju, iu, -w))[:n_keep]

    node_order = tuple(sorted(genes))
    idx = {g: i for i, g in enumerate(node_order)}
    edges, weights = [], []
    for k in order:
        a, b = genes[int(iu[k])], genes[int(ju[k])]
        src, dst = (a, b) if a < b else (b, a)
        edges.append((idx[src], idx[dst]))
        weights.append(w[k])
    edges = np.array(edges, dtype=np.intp).reshape(-1, 2)
    weights = np.array(weights)

    if max_in is not None:
        keep_mask = np.zeros(len(weights), dtype=bool)
        for t in np.unique(edges[:, 1]) if edges.size else []:
            rows = np.flatnonzero(edges[:, 1] == t)
            ranked = rows[np.lexsort((edges[rows, 0], -weights[rows]))]
            keep_mask[ranked[:max_in]] = True
        edges, weights = edges[keep_mask], weights[keep_mask]

    if symmetrize and edges.size:
        edges = np.vstack([edges, edges[:, ::-1]])
        weights = np.concatenate([weights, weights])

    return KnowledgeGraph(name, node_order, edges, weights)


def generate_expander(n: int, degree: int, rng, max_tries: int = 500) -> ExpanderGraph:
    """Random d-regular simple connected graph via the pairing model.

    Conflicting stub pairs (self-loops or repeats) are deferred and
    re-shuffled; a pairing that can no longer place any deferred stub is
    abandoned and resampled, as is a disconnected result.
    """
    seed = int(rng) if not isinstance(rng, np.random.Generator) else None
    rng = _as_rng(rng)
    if degree < 1 or degree >= n or (n * degree) % 2 != 0:
        raise ValueError(f"infeasible expander parameters n={n}, degree={degree}")
    for _ in range(max_tries):
        edges = _try_pairing(n, degree, rng)
        if edges is None:
            continue
        canon = np.array(sorted(edges), dtype=np.intp)
        if not _connected(n, canon):
            continue
        return ExpanderGraph(n, degree, canon, seed)
    raise RuntimeError(f"could not sample a simple connected {degree}-regular graph on {n} nodes")


def _try_pairing(n: int, degree: int, rng) -> set | None:
    edges: set = set()
    stubs = np.repeat(np.arange(n), degree)
    passes = 0
    while stubs.size:
        passes += 1
        if passes > 2 * n * degree:
            return None
        rng.shuffle(stubs)
        deferred = []
        for u, v in zip(stubs[0::2], stubs[1::2]):
            u, v = (int(u), int(v)) if u < v else (int(v), int(u))
            if u == v or (u, v) in edges:
                deferred.extend((u, v))
            else:
                edges.add((u, v))
        if not deferred:
            return edges
        # dead end: no placeable pair remains among the deferred stubs
        uniq = sorted(set(deferred))
        placeable = any(
            (a, b) not in edges
            for i, a in enumerate(uniq) for b in uniq[i + 1:]
        )
        if not placeable:
            return None
        stubs = np.array(deferred)
    return edges


def _connected(n: int, undirected_edges: np.ndarray) -> bool:
    nbrs = [[] for _ in range(n)]
    for u, v in undirected_edges:
        nbrs[int(u)].append(int(v))
        nbrs[int(v)].append(int(u))
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in nbrs[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return bool(seen.all())


def build_union(graphs, expander: ExpanderGraph | None = None) -> UnionGraph:
    """One edge per distinct (source, target) with multi-hot provenance.

    Provenance columns follow input graph order; the expander, when
    present, contributes a final column (both edge directions).
    """
    graphs = list(graphs)
    nodes = tuple(sorted(set().union(*[set(g.nodes) for g in graphs])))
    idx = {g: i for i, g in enumerate(nodes)}
    k = len(graphs) + (1 if expander is not None else 0)

    prov: dict = {}
    wmat: dict = {}
    for j, g in enumerate(graphs):
        remap = np.array([idx[x] for x in g.nodes], dtype=np.intp)
        for (s, t), w in zip(g.edges, g.weights):
            key = (int(remap[s]), int(remap[t]))
            if key not in prov:
                prov[key] = np.zeros(k, dtype=np.uint8)
                wmat[key] = np.full(k, np.nan)
            prov[key][j] = 1
            wmat[key][j] = w
    if expander is not None:
        if expander.n != len(nodes):
            raise ValueError(f"expander has {expander.n} nodes, union universe has {len(nodes)}")
        for s, t in expander.directed_edges():
            key = (int(s), int(t))
            if key not in prov:
                prov[key] = np.zeros(k, dtype=np.uint8)
                wmat[key] = np.full(k, np.nan)
            prov[key][-1] = 1
            wmat[key][-1] = 1.0

    keys = sorted(prov)
    edges = np.array(keys, dtype=np.intp).reshape(-1, 2)
    provenance = np.array([prov[key] for key in keys], dtype=np.uint8).reshape(-1, k)
    weights = np.array([wmat[key] for key in keys]).reshape(-1, k)
    names = tuple(g.name for g in graphs) + (("expander",) if expander is not None else ())
    src_nodes = tuple(g.nodes for g in graphs) + ((nodes,) if expander is not None else ())
    return UnionGraph(nodes, edges, provenance, names, src_nodes, weights)


def build_supra(graphs, couple: bool = True) -> SupraGraph:
    """Stack layers into supra-adjacency form with identity couplings.

    couple=False omits the inter-layer edges (used to compare against
    independent single-layer runs).
    """
    graphs = tuple(graphs)
    if not graphs:
        raise ValueError("need at least one layer")
    entities = tuple(sorted(set().union(*[set(g.nodes) for g in graphs])))
    sizes = [g.n_nodes for g in graphs]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    intra, iw = [], []
    for l, g in enumerate(graphs):
        if g.n_edges:
            intra.append(g.edges + offsets[l])
            iw.append(g.weights)
    intra_edges = np.vstack(intra) if intra else np.zeros((0, 2), dtype=np.intp)
    intra_weights = np.concatenate(iw) if iw else np.zeros(0)

    inter = []
    if couple:
        indexes = [g.node_index() for g in graphs]
        for l1 in range(len(graphs)):
            for l2 in range(l1 + 1, len(graphs)):
                shared = set(graphs[l1].nodes) & set(graphs[l2].nodes)
                for e in shared:
                    a = offsets[l1] + indexes[l1][e]
                    b = offsets[l2] + indexes[l2][e]
                    inter.append((a, b))
                    inter.append((b, a))
    inter_edges = np.array(sorted(inter), dtype=np.intp).reshape(-1, 2)
    return SupraGraph(graphs, entities, offsets, intra_edges, intra_weights, inter_edges)


# ---------------------------------------------------------------------------
# ablation transforms


def rewire(graph: KnowledgeGraph, fraction: float, mode: str, rng) -> KnowledgeGraph:
    """Randomly replace endpoints of round(fraction*|E|) edges.

    mode 'source' resamples sources (preserving every in-degree),
    'target' resamples targets, 'both' resamples both ends. Edge count
    is preserved; self-loops and duplicates are rejected by resampling.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0,1], got {fraction}")
    if mode not in ("source", "target", "both"):
        raise ValueError(f"unknown rewire mode {mode!r}")
    rng = _as_rng(rng)
    n, m = graph.n_nodes, graph.n_edges
    n_alter = int(round(fraction * m))
    if n_alter == 0:
        return graph.replace_edges(graph.edges, graph.weights)

    edges = graph.edges.copy()
    weights = graph.weights.copy()
    original = graph.edge_set()
    current = graph.edge_set()
    chosen = rng.choice(m, size=n_alter, replace=False)
    for i in chosen:
        s, t = int(edges[i, 0]), int(edges[i, 1])
        current.discard((s, t))
        # the replacement may not coincide with any original edge, so the
        # altered-edge count is exact when read back from the result
        for attempt in range(100000):
            if mode == "source":
                ns, nt = int(rng.integers(n)), t
            elif mode == "target":
                ns, nt = s, int(rng.integers(n))
            else:
                ns, nt = int(rng.integers(n)), int(rng.integers(n))
            if ns != nt and (ns, nt) not in current and (ns, nt) not in original:
                break
        else:
            raise RuntimeError("rewire could not find a free edge slot")
        current.add((ns, nt))
        edges[i] = (ns, nt)
    return graph.replace_edges(edges, weights)


def downsample(graph: KnowledgeGraph, keep_ratio: float, rng) -> KnowledgeGraph:
    """Uniformly keep round(keep_ratio*|E|) edges."""
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0,1], got {keep_ratio}")
    rng = _as_rng(rng)
    m = graph.n_edges
    n_keep = int(round(keep_ratio * m))
    keep = np.sort(rng.choice(m, size=n_keep, replace=False))
    return graph.replace_edges(graph.edges[keep], graph.weights[keep])


# ---------------------------------------------------------------------------
# generators for synthetic work and tests


def small_world_graph(nodes, k: int = 6, p: float = 0.1, rng=0,
                      name: str = "small_world") -> KnowledgeGraph:
    """Watts-Strogatz ring graph, symmetrized into directed edge pairs."""
    rng = _as_rng(rng)
    if isinstance(nodes, int):
        width = len(str(max(nodes - 1, 1)))
        nodes = tuple(f"g{i:0{width}d}" for i in range(nodes))
    else:
        nodes = tuple(nodes)
    n = len(nodes)
    if k % 2 != 0 or k >= n:
        raise ValueError(f"ring degree k must be even and < n, got k={k}, n={n}")
    edge_set = set()
    for i in range(n):
        for off in range(1, k // 2 + 1):
            edge_set.add((i, (i + off) % n))
    current = {tuple(sorted(e)) for e in edge_set}
    rewired = set()
    for u, v in sorted(current):
        if rng.random() < p:
            for _ in range(1000):
                w = int(rng.integers(n))
                cand = tuple(sorted((u, w)))
                if w != u and cand not in current and cand not in rewired:
                    current.discard((u, v))
                    rewired.add(cand)
                    break
    current |= rewired
    pairs = sorted(current)
    edges = np.array([(a, b) for a, b in pairs] + [(b, a) for a, b in pairs], dtype=np.intp)
    weights = np.ones(len(edges))
    return KnowledgeGraph(name, nodes, edges, weights)


def random_graph(nodes, n_edges: int, rng=0, name: str = "random") -> KnowledgeGraph:
    """Uniform random simple directed graph with the given edge count."""
    rng = _as_rng(rng)
    if isinstance(nodes, int):
        width = len(str(max(nodes - 1, 1)))
        nodes = tuple(f"g{i:0{width}d}" for i in range(nodes))
    else:
        nodes = tuple(nodes)
    n = len(nodes)
    if n_edges > n * (n - 1):
        raise ValueError("too many edges requested")
    chosen: set = set()
    while len(chosen) < n_edges:
        s, t = int(rng.integers(n)), int(rng.integers(n))
        if s != t:
            chosen.add((s, t))
    edges = np.array(sorted(chosen), dtype=np.intp).reshape(-1, 2)
    weights = np.round(rng.uniform(0.1, 1.0, size=len(edges)), 6)
    return KnowledgeGraph(name, nodes, edges, weights)
