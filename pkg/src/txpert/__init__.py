"""Graph-informed perturbation effect prediction with batch-matched
evaluation metrics and graph ablation tooling."""

from .autodiff import (Optimizer, Parameter, Tensor, backward, grad_check,
                       kaiming_init, make_rng, mse_loss, segment_softmax)
from .data import (ControlIndex, ExpressionDataset, SplitSpec, control_means,
                   delta, load_dataset, match_control, normalize, save_dataset,
                   split_by_perturbation, split_cross_cell_line)
from .encoders import (BasalEncoder, EncoderConfig, ExphormerEncoder,
                       GatV2Encoder, HybridEncoder, MultiLayerEncoder,
                       NodeEmbeddingTable, build_encoder)
from .evaluation import (GeneralBaseline, MetricReport, evaluate, pearson,
                         pearson_delta, retrieval, split_half_reproducibility)
from .graphs import (ExpanderGraph, KnowledgeGraph, SupraGraph, UnionGraph,
                     build_from_embeddings, build_supra, build_union,
                     downsample, generate_expander, load_edge_list, rewire,
                     save_graph, small_world_graph)
from .model import (TrainConfig, TxPertModel, load_checkpoint, predict,
                    predict_perturbation_deltas, save_checkpoint, train)
from .synthetic import SyntheticSpec, SynthTruth, synth_generate

__version__ = "0.1.0"
