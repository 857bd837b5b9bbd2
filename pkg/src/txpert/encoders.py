"""Perturbation encoders (GATv2, Hybrid, Exphormer, Exphormer-MG,
MultiLayer) and basal-state encoders.

Every perturbation encoder owns its trainable input node embeddings and
exposes forward() -> Z, one row per gene it knows. Message passing uses
binary adjacency; attention runs over incoming edges of each node, and
nodes without incoming edges receive a single self-edge so the softmax
is defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, kaiming_init, make_rng
from .graphs import ExpanderGraph, KnowledgeGraph, SupraGraph, UnionGraph, build_supra, generate_expander

__all__ = [
    "EncoderConfig",
    "NodeEmbeddingTable",
    "Mlp",
    "GatLayer",
    "GatV2Encoder",
    "HybridEncoder",
    "ExphormerEncoder",
    "MultiLayerEncoder",
    "BasalEncoder",
    "build_encoder",
    "encode_perturbations",
    "perturbation_rows",
]

ENCODER_KINDS = ("gatv2", "hybrid", "exphormer", "exphormer_mg", "multilayer")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "gatv2"
    layers: int = 4
    hidden_dim: int = 64
    heads: int = 4
    head_aggregation: str = "avg"  # concat | avg
    leaky_slope: float = 0.2
    expander_degree: int = 6
    edge_feat_dim: int = 4         # learnable edge-type embedding width

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.layers < 1 or self.heads < 1:
            raise ValueError("layers and heads must be >= 1")
        if self.head_aggregation not in ("concat", "avg"):
            raise ValueError(f"unknown head aggregation {self.head_aggregation!r}")
        if self.head_aggregation == "concat" and self.hidden_dim % self.heads != 0:
            raise ValueError("concat aggregation requires hidden_dim divisible by heads")


class NodeEmbeddingTable:
    """Trainable H0, one Kaiming-initialized row per gene."""

    def __init__(self, genes, dim: int, rng, name: str = "node_embeddings"):
        self.genes = tuple(genes)
        self.dim = dim
        self.h0 = Parameter(kaiming_init(len(self.genes), dim, dim, rng), name)
        self._index = {g: i for i, g in enumerate(self.genes)}

    def row_of(self, gene) -> int:
        if gene not in self._index:
            raise ValueError(f"gene {gene!r} is absent from the encoder graph")
        return self._index[gene]


class Mlp:
    """Plain MLP; leaky activations between layers, linear output."""

    def __init__(self, widths, rng, name: str, slope: float = 0.01):
        if len(widths) < 2:
            raise ValueError("Mlp needs at least input and output widths")
        self.widths = tuple(widths)
        self.slope = slope
        self.weights, self.biases = [], []
        for i, (din, dout) in enumerate(zip(widths[:-1], widths[1:])):
            self.weights.append(Parameter(kaiming_init(din, dout, din, rng), f"{name}.w{i}"))
            self.biases.append(Parameter(np.zeros((1, dout)), f"{name}.b{i}"))

    def forward(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.linear(h, w, b)
            if i != last:
                h = ad.leaky_relu(h, self.slope)
        return h

    def params(self):
        return list(self.weights) + list(self.biases)


def _message_edges(edges: np.ndarray, n_nodes: int):
    """Sort edges by receiver and add self-edges for in-degree-0 nodes.

    Returns (src, dst, keep) where keep marks the original (non-self)
    edges after sorting.
    """
    edges = np.asarray(edges, dtype=np.intp).reshape(-1, 2)
    have = np.zeros(n_nodes, dtype=bool)
    if edges.size:
        have[edges[:, 1]] = True
    lonely = np.flatnonzero(~have)
    self_edges = np.stack([lonely, lonely], axis=1) if lonely.size else np.zeros((0, 2), dtype=np.intp)
    alledges = np.vstack([edges, self_edges])
    synthetic = np.concatenate([np.zeros(len(edges), dtype=bool), np.ones(len(self_edges), dtype=bool)])
    order = np.lexsort((alledges[:, 0], alledges[:, 1]))
    alledges = alledges[order]
    return alledges[:, 0], alledges[:, 1], ~synthetic[order], order


class GatLayer:
    """Multi-head GATv2 layer: att(u->v) = theta^T lrelu([W h_u || W h_v])."""

    def __init__(self, d_in: int, d_out: int, heads: int, aggregation: str,
                 slope: float, rng, name: str):
        self.heads = heads
        self.aggregation = aggregation
        self.slope = slope
        d_head = d_out // heads if aggregation == "concat" else d_out
        self.d_out = d_head * heads if aggregation == "concat" else d_head
        self.w = [Parameter(kaiming_init(d_in, d_head, d_in, rng), f"{name}.h{q}.w")
                  for q in range(heads)]
        self.att = [Parameter(kaiming_init(2 * d_head, 1, 2 * d_head, rng), f"{name}.h{q}.att")
                    for q in range(heads)]

    def forward(self, h, src, dst, n_nodes: int) -> Tensor:
        outs = []
        for w, att in zip(self.w, self.att):
            wh = ad.matmul(h, w)
            hu = ad.gather_rows(wh, src)
            hv = ad.gather_rows(wh, dst)
            scores = ad.matmul(ad.leaky_relu(ad.concat_cols([hu, hv]), self.slope), att)
            alpha = ad.segment_softmax(scores, dst, n_nodes)
            outs.append(ad.segment_sum(ad.mul(hu, alpha), dst, n_nodes))
        if self.heads == 1:
            agg = outs[0]
        elif self.aggregation == "concat":
            agg = ad.concat_cols(outs)
        else:
            total = outs[0]
            for o in outs[1:]:
                total = ad.add(total, o)
            agg = ad.scale(total, 1.0 / self.heads)
        return ad.leaky_relu(agg, self.slope)

    def attention_weights(self, h, src, dst, n_nodes: int, head: int = 0) -> np.ndarray:
        """Per-edge softmax weights of one head (diagnostic, no grads kept)."""
        w, att = self.w[head], self.att[head]
        wh = ad.matmul(h, w)
        hu = ad.gather_rows(wh, src)
        hv = ad.gather_rows(wh, dst)
        scores = ad.matmul(ad.leaky_relu(ad.concat_cols([hu, hv]), self.slope), att)
        return ad.segment_softmax(scores, dst, n_nodes).value.reshape(-1)

    def params(self):
        return list(self.w) + list(self.att)


class GatV2Encoder:
    """L stacked GATv2 layers over one graph."""

    def __init__(self, graph: KnowledgeGraph, config: EncoderConfig, rng,
                 table: NodeEmbeddingTable | None = None, name: str = "gatv2"):
        self.graph = graph
        self.config = config
        self.table = table or NodeEmbeddingTable(graph.nodes, config.hidden_dim, rng, f"{name}.h0")
        self.genes = self.table.genes
        if self.table.genes != graph.nodes:
            raise ValueError("embedding table must cover exactly the graph nodes")
        self.src, self.dst, _, _ = _message_edges(graph.edges, graph.n_nodes)
        d0 = self.table.dim
        self.layers = []
        d_in = d0
        for l in range(config.layers):
            layer = GatLayer(d_in, config.hidden_dim, config.heads, config.head_aggregation,
                             config.leaky_slope, rng, f"{name}.layer{l}")
            self.layers.append(layer)
            d_in = layer.d_out
        self.out_dim = d_in

    def forward(self) -> Tensor:
        h = self.table.h0
        for layer in self.layers:
            h = layer.forward(h, self.src, self.dst, self.graph.n_nodes)
        return h

    def params(self):
        out = [self.table.h0]
        for layer in self.layers:
            out.extend(layer.params())
        return out


class HybridEncoder:
    """Channel-per-graph encoders fused by node-to-channel attention.

    score_F(v) = theta^T lrelu([W h_v^0 || W h_v^F]), softmax across
    channels, h_v = sum_F sbar_F(v) * W h_v^F, then a shared node-wise MLP.
    """

    def __init__(self, graphs, config: EncoderConfig, rng,
                 table: NodeEmbeddingTable | None = None, name: str = "hybrid"):
        graphs = list(graphs)
        if not graphs:
            raise ValueError("need at least one channel")
        nodes = graphs[0].nodes
        for g in graphs:
            if g.nodes != nodes:
                raise ValueError("hybrid channels must share one node universe")
        self.config = config
        self.table = table or NodeEmbeddingTable(nodes, config.hidden_dim, rng, f"{name}.h0")
        self.genes = self.table.genes
        d = config.hidden_dim
        if self.table.dim != d:
            raise ValueError("hybrid requires input embedding dim == hidden dim")
        self.channels = [
            GatV2Encoder(g, config, rng, table=self.table, name=f"{name}.ch{i}")
            for i, g in enumerate(graphs)
        ]
        self.w = Parameter(kaiming_init(d, d, d, rng), f"{name}.w")
        self.theta = Parameter(kaiming_init(2 * d, 1, 2 * d, rng), f"{name}.theta")
        self.mlp = Mlp((d, d, d), rng, f"{name}.mlp", slope=config.leaky_slope)
        self.out_dim = d

    def channel_attention(self) -> np.ndarray:
        """(N, K) per-node channel weights (diagnostic)."""
        return self._fuse()[1].value

    def _fuse(self):
        h0 = self.table.h0
        wh0 = ad.matmul(h0, self.w)
        outs = [ch.forward() for ch in self.channels]
        whs = [ad.matmul(hf, self.w) for hf in outs]
        scores = ad.concat_cols([
            ad.matmul(ad.leaky_relu(ad.concat_cols([wh0, whf]), self.config.leaky_slope), self.theta)
            for whf in whs
        ])
        sbar = ad.softmax_rows(scores)
        mixed = None
        for j, whf in enumerate(whs):
            contrib = ad.mul(ad.slice_cols(sbar, j, j + 1), whf)
            mixed = contrib if mixed is None else ad.add(mixed, contrib)
        return mixed, sbar

    def forward(self) -> Tensor:
        mixed, _ = self._fuse()
        return self.mlp.forward(mixed)

    def params(self):
        out = [self.table.h0]
        for ch in self.channels:
            out.extend(p for p in ch.params() if p is not self.table.h0)
        out.extend([self.w, self.theta])
        out.extend(self.mlp.params())
        return out


class _ExphormerLayer:
    """Sparse multi-head attention with edge-feature keys and bias, plus
    a residual one-hidden-layer feed-forward block."""

    def __init__(self, d: int, d_e: int, heads: int, slope: float, rng, name: str):
        self.heads = heads
        self.slope = slope
        self.wq = [Parameter(kaiming_init(d, d, d, rng), f"{name}.h{j}.wq") for j in range(heads)]
        self.wk = [Parameter(kaiming_init(d, d, d, rng), f"{name}.h{j}.wk") for j in range(heads)]
        self.wv = [Parameter(kaiming_init(d, d, d, rng), f"{name}.h{j}.wv") for j in range(heads)]
        self.we = [Parameter(kaiming_init(d_e, d, d_e, rng), f"{name}.h{j}.we") for j in range(heads)]
        self.wb = [Parameter(kaiming_init(d_e, 1, d_e, rng), f"{name}.h{j}.wb") for j in range(heads)]
        self.ffn = Mlp((d, 2 * d, d), rng, f"{name}.ffn", slope=slope)

    def forward(self, h, efeat, src, dst, n_nodes: int) -> Tensor:
        total = None
        for j in range(self.heads):
            q = ad.gather_rows(ad.matmul(h, self.wq[j]), dst)
            k = ad.gather_rows(ad.matmul(h, self.wk[j]), src)
            v = ad.gather_rows(ad.matmul(h, self.wv[j]), src)
            e = ad.matmul(efeat, self.we[j])
            bias = ad.matmul(efeat, self.wb[j])
            scores = ad.add(ad.row_sum(ad.mul(ad.mul(e, k), q)), bias)
            alpha = ad.segment_softmax(scores, dst, n_nodes)
            head = ad.segment_sum(ad.mul(v, alpha), dst, n_nodes)
            total = head if total is None else ad.add(total, head)
        h = ad.add(h, total)
        return ad.add(h, self.ffn.forward(h))

    def params(self):
        out = []
        for group in (self.wq, self.wk, self.wv, self.we, self.wb):
            out.extend(group)
        out.extend(self.ffn.params())
        return out


class ExphormerEncoder:
    """Sparse graph transformer over graph + expander attention pattern.

    Single-graph mode keeps graph and expander edges as separate entries
    (duplicates allowed) with learnable per-type edge embeddings; the
    multi-graph mode takes a UnionGraph and uses its multi-hot provenance
    vectors as fixed edge features.
    """

    EDGE_TYPES = 3  # graph, expander, synthetic self-edge

    def __init__(self, source, config: EncoderConfig, rng,
                 expander: ExpanderGraph | None = None,
                 table: NodeEmbeddingTable | None = None, name: str = "exphormer"):
        self.config = config
        d = config.hidden_dim
        if isinstance(source, UnionGraph):
            self.union = source
            nodes = source.nodes
            edges = source.edges
            feats = source.provenance.astype(np.float64)
        else:
            self.union = None
            nodes = source.nodes
            if expander is not None and expander.n != len(nodes):
                raise ValueError("expander size must match the graph")
            exp_edges = expander.directed_edges() if expander is not None \
                else np.zeros((0, 2), dtype=np.intp)
            edges = np.vstack([source.edges, exp_edges])
            type_ids = np.concatenate([
                np.zeros(source.n_edges, dtype=np.intp),
                np.ones(len(exp_edges), dtype=np.intp),
            ])
        self.table = table or NodeEmbeddingTable(nodes, d, rng, f"{name}.h0")
        self.genes = self.table.genes
        if self.table.dim != d:
            raise ValueError("exphormer requires input embedding dim == hidden dim")

        n = len(nodes)
        src, dst, keep, order = _message_edges(edges, n)
        self.src, self.dst, self.n_nodes = src, dst, n
        if self.union is not None:
            d_e = feats.shape[1]
            all_feats = np.zeros((len(src), d_e))
            # synthetic self-edges keep all-zero features
            all_feats[keep] = feats[order[keep]]
            self._efeat_const = Tensor(all_feats)
            self.type_table = None
            self.d_e = d_e
        else:
            all_types = np.full(len(src), 2, dtype=np.intp)  # self-edge type
            all_types[keep] = type_ids[order[keep]]
            self._edge_types = all_types
            self.d_e = config.edge_feat_dim
            self.type_table = Parameter(
                kaiming_init(self.EDGE_TYPES, self.d_e, self.d_e, rng), f"{name}.edge_types")
        self.layers = [
            _ExphormerLayer(d, self.d_e, config.heads, config.leaky_slope, rng, f"{name}.layer{l}")
            for l in range(config.layers)
        ]
        self.out_dim = d

    def _edge_features(self) -> Tensor:
        if self.type_table is not None:
            return ad.gather_rows(self.type_table, self._edge_types)
        return self._efeat_const

    def forward(self) -> Tensor:
        h = self.table.h0
        efeat = self._edge_features()
        for layer in self.layers:
            h = layer.forward(h, efeat, self.src, self.dst, self.n_nodes)
        return h

    def params(self):
        out = [self.table.h0]
        if self.type_table is not None:
            out.append(self.type_table)
        for layer in self.layers:
            out.extend(layer.params())
        return out


class MultiLayerEncoder:
    """GATv2 over the supra-adjacency of several graph layers.

    Every (layer, node) copy has its own trainable embedding; the final
    per-entity embedding is the mean over that entity's layer copies.
    """

    def __init__(self, source, config: EncoderConfig, rng, name: str = "multilayer"):
        self.config = config
        self.supra = source if isinstance(source, SupraGraph) else build_supra(source)
        self.genes = self.supra.entities
        d = config.hidden_dim
        n_supra = self.supra.n_supra
        self.h0 = Parameter(kaiming_init(n_supra, d, d, rng), f"{name}.h0")
        self.src, self.dst, _, _ = _message_edges(self.supra.all_edges(), n_supra)
        self.layers = []
        d_in = d
        for l in range(config.layers):
            layer = GatLayer(d_in, d, config.heads, config.head_aggregation,
                             config.leaky_slope, rng, f"{name}.layer{l}")
            self.layers.append(layer)
            d_in = layer.d_out
        self.out_dim = d_in
        flat, seg = [], []
        for ei, entity in enumerate(self.genes):
            for s in self.supra.entity_copies(entity):
                flat.append(s)
                seg.append(ei)
        self._copy_rows = np.array(flat, dtype=np.intp)
        self._copy_segments = np.array(seg, dtype=np.intp)
        counts = np.bincount(self._copy_segments, minlength=len(self.genes)).astype(np.float64)
        self._inv_counts = (1.0 / counts)[:, None]

    def forward_supra(self) -> Tensor:
        h = self.h0
        for layer in self.layers:
            h = layer.forward(h, self.src, self.dst, self.supra.n_supra)
        return h

    def forward(self) -> Tensor:
        h = self.forward_supra()
        gathered = ad.gather_rows(h, self._copy_rows)
        summed = ad.segment_sum(gathered, self._copy_segments, len(self.genes))
        return ad.mul(summed, Tensor(self._inv_counts))

    def params(self):
        out = [self.h0]
        for layer in self.layers:
            out.extend(layer.params())
        return out


class BasalEncoder:
    """identity (s = x) or a learned MLP from expression to latent."""

    def __init__(self, kind: str, n_genes: int, out_dim: int | None = None,
                 hidden=(128,), rng=None, slope: float = 0.01, input_dim: int | None = None):
        if kind not in ("identity", "mlp"):
            raise ValueError(f"unknown basal encoder kind {kind!r}")
        self.kind = kind
        self.n_genes = n_genes
        if kind == "identity":
            self.out_dim = n_genes
            self.mlp = None
        else:
            if out_dim is None:
                raise ValueError("mlp basal encoder needs an output dim")
            d_in = input_dim if input_dim is not None else n_genes
            widths = (d_in, *hidden, out_dim)
            self.mlp = Mlp(widths, rng if rng is not None else make_rng(0), "basal", slope=slope)
            self.out_dim = out_dim

    def forward(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        if self.kind == "identity":
            return t
        if t.shape[1] != self.mlp.widths[0]:
            raise ValueError(f"basal input dim {t.shape[1]} != expected {self.mlp.widths[0]}")
        return self.mlp.forward(t)

    def params(self):
        return [] if self.mlp is None else self.mlp.params()


def build_encoder(config: EncoderConfig, graphs, rng,
                  expander: ExpanderGraph | None = None):
    """Construct the configured perturbation encoder over the given graphs."""
    graphs = list(graphs) if isinstance(graphs, (list, tuple)) else [graphs]
    if config.kind == "gatv2":
        return GatV2Encoder(graphs[0], config, rng)
    if config.kind == "hybrid":
        return HybridEncoder(graphs, config, rng)
    if config.kind == "exphormer":
        if expander is None and not isinstance(graphs[0], UnionGraph):
            expander = generate_expander(graphs[0].n_nodes, config.expander_degree,
                                         make_rng(config.expander_degree + 1))
        return ExphormerEncoder(graphs[0], config, rng, expander=expander)
    if config.kind == "exphormer_mg":
        from .graphs import build_union
        if isinstance(graphs[0], UnionGraph):
            union = graphs[0]
        else:
            nodes = sorted(set().union(*[set(g.nodes) for g in graphs]))
            if expander is None:
                expander = generate_expander(len(nodes), config.expander_degree,
                                             make_rng(config.expander_degree + 1))
            union = build_union(graphs, expander)
        return ExphormerEncoder(union, config, rng)
    if config.kind == "multilayer":
        return MultiLayerEncoder(graphs, config, rng)
    raise ValueError(f"unknown encoder kind {config.kind!r}")


def encode_perturbations(encoder) -> Tensor:
    """Z = H^L: stacked encoder layers over the node table."""
    return encoder.forward()


def gene_index(encoder) -> dict:
    """Gene -> Z row mapping, cached on the encoder."""
    idx = getattr(encoder, "_gene_index", None)
    if idx is None:
        idx = {g: i for i, g in enumerate(encoder.genes)}
        encoder._gene_index = idx
    return idx


def perturbation_rows(encoder, pert: tuple) -> list:
    """Row indices of a perturbation's genes; errors name unknown genes."""
    idx = gene_index(encoder)
    rows = []
    for gene in pert:
        if gene not in idx:
            raise ValueError(f"perturbation gene {gene!r} is absent from the encoder graph")
        rows.append(idx[gene])
    return rows
