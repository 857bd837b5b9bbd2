import numpy as np
import pytest

from txpert.autodiff import Tensor, grad_check, make_rng, mse_loss
from txpert.data import ExpressionDataset, SplitSpec, control_means, split_by_perturbation
from txpert.encoders import BasalEncoder, EncoderConfig, GatV2Encoder
from txpert.graphs import random_graph, small_world_graph
from txpert.model import (TrainConfig, TxPertModel, load_checkpoint, predict,
                          predict_perturbation_deltas, save_checkpoint, train)
from txpert.synthetic import SyntheticSpec, synth_generate


def tiny_model(n_genes=8, d=4, layers=1, seed=0, mode="latent_shift", graph=None):
    rng = make_rng(seed)
    g = graph if graph is not None else random_graph(n_genes, 3 * n_genes, rng=seed + 1)
    enc = GatV2Encoder(g, EncoderConfig(layers=layers, hidden_dim=d, heads=1,
                                        leaky_slope=0.2), rng)
    if mode == "latent_shift":
        basal = BasalEncoder("mlp", n_genes=n_genes, out_dim=d, hidden=(6,), rng=rng)
    else:
        basal = BasalEncoder("identity", n_genes=n_genes)
    return TxPertModel(basal, enc, n_genes, rng=rng, mode=mode,
                       decoder_hidden=(8, 8)), g


def test_forward_empty_perturbation_is_pure_basal():
    model, _ = tiny_model()
    x = make_rng(2).normal(size=(1, 8))
    out_empty = model.forward(x, [()]).value
    s = model.basal.forward(Tensor(x))
    expected = model.decoder.forward(s).value
    assert np.allclose(out_empty, expected, atol=1e-12)


def test_forward_commutative_in_perturbation_order():
    model, g = tiny_model()
    a, b = g.nodes[0], g.nodes[1]
    x = make_rng(3).normal(size=(1, 8))
    out_ab = model.forward(x, [(a, b)]).value
    out_ba = model.forward(x, [tuple(reversed((a, b)))]).value
    assert np.array_equal(out_ab, out_ba)


def test_delta_on_raw_zero_decoder_is_identity():
    model, g = tiny_model(mode="delta_on_raw")
    for p in model.decoder.params():
        p.value[:] = 0.0
    x = make_rng(4).normal(size=(2, 8))
    out = model.forward(x, [(g.nodes[0],), ()]).value
    assert np.array_equal(out, x)


def test_delta_on_raw_requires_identity_basal():
    rng = make_rng(5)
    g = random_graph(6, 12, rng=6)
    enc = GatV2Encoder(g, EncoderConfig(layers=1, hidden_dim=4, heads=1), rng)
    basal = BasalEncoder("mlp", n_genes=6, out_dim=4, rng=rng)
    with pytest.raises(ValueError, match="identity"):
        TxPertModel(basal, enc, 6, rng=rng, mode="delta_on_raw")


def test_latent_shift_dim_mismatch_rejected():
    rng = make_rng(7)
    g = random_graph(6, 12, rng=8)
    enc = GatV2Encoder(g, EncoderConfig(layers=1, hidden_dim=4, heads=1), rng)
    basal = BasalEncoder("mlp", n_genes=6, out_dim=3, rng=rng)
    with pytest.raises(ValueError, match="basal dim"):
        TxPertModel(basal, enc, 6, rng=rng)


def test_latent_additivity():
    model, g = tiny_model(n_genes=10, seed=9)
    x = make_rng(10).normal(size=(1, 10))
    p1, p2 = (g.nodes[0],), (g.nodes[3], g.nodes[5])
    s = model.basal.forward(Tensor(x)).value
    lat_union = model.latent(x, [tuple(sorted(p1 + p2))]).value
    lat_1 = model.latent(x, [p1]).value
    lat_2 = model.latent(x, [p2]).value
    assert np.allclose(lat_union, lat_1 + lat_2 - s, atol=1e-12)


def test_unknown_perturbation_token_errors():
    model, _ = tiny_model()
    with pytest.raises(ValueError, match="absent from the encoder graph"):
        model.forward(np.zeros((1, 8)), [("NOPE",)])


def make_training_dataset(n_genes=10, n_perts=5, reps=6, noise=0.05, seed=0):
    graph = small_world_graph(n_genes, k=4, p=0.1, rng=seed)
    spec = SyntheticSpec(n_genes=n_genes, n_perturbations=n_perts, cell_lines=("L",),
                        n_batches=1, replicates=reps, latent_dim=4, noise_std=noise,
                        graph=graph, seed=seed)
    ds, truth = synth_generate(spec)
    return ds, truth, graph


def test_memorization_overfits_single_perturbation():
    ds, _, graph = make_training_dataset(n_genes=10, n_perts=1, reps=10, noise=0.01, seed=11)
    model, _ = tiny_model(n_genes=10, d=4, seed=12, graph=graph)
    pert = ds.unique_perturbations()[0]
    split = SplitSpec({pert: "train"})
    cfg = TrainConfig(batch_size=10, max_epochs=200, learning_rate=3e-3, seed=1)
    history = train(model, ds, split, cfg)
    assert len(history) == 200  # no val split: runs to max_epochs
    assert history[-1][1] < 1e-3


def test_training_deterministic_given_seed():
    ds, _, graph = make_training_dataset(seed=13)
    perts = ds.unique_perturbations()
    split = SplitSpec({p: ("train" if i % 2 == 0 else "val") for i, p in enumerate(perts)})
    cfg = TrainConfig(batch_size=8, max_epochs=5, learning_rate=1e-3, seed=3)

    def run():
        model, _ = tiny_model(n_genes=10, d=4, seed=14, graph=graph)
        return train(model, ds, split, cfg)

    assert run() == run()


def test_empty_train_split_errors():
    ds, _, graph = make_training_dataset(seed=15)
    split = SplitSpec({p: "test" for p in ds.unique_perturbations()})
    model, _ = tiny_model(n_genes=10, d=4, seed=16, graph=graph)
    with pytest.raises(ValueError, match="empty train split"):
        train(model, ds, split, TrainConfig())


def test_end_to_end_grad_check():
    ds, _, graph = make_training_dataset(n_genes=10, n_perts=5, reps=2, seed=17)
    model, _ = tiny_model(n_genes=10, d=4, seed=18, graph=graph)
    idx = control_means(ds)
    cells = [i for i in range(ds.n_cells) if ds.perturbations[i]][:6]
    x = np.stack([idx.mean(ds.cell_lines[i], ds.batches[i]) for i in cells])
    y = Tensor(ds.normalized[cells])
    perts = [ds.perturbations[i] for i in cells]

    def loss_fn():
        return mse_loss(model.forward(x, perts), y)

    assert grad_check(loss_fn, model.params()) < 1e-4


def test_predict_shapes_order_and_delta_definition():
    ds, _, graph = make_training_dataset(seed=19)
    model, _ = tiny_model(n_genes=10, d=4, seed=20, graph=graph)
    idx = control_means(ds)
    perts = ds.unique_perturbations()
    requests = [(p, "L", "b0") for p in perts] * 4
    out = predict(model, ds, requests, index=idx)
    assert len(out) == len(requests)
    # order preserved: repeated requests give identical rows
    first, second = out[0], out[len(perts)]
    assert np.array_equal(first[0], second[0])
    for yhat, dhat in out:
        assert np.allclose(dhat, yhat - idx.mean("L", "b0"), atol=1e-12)


def test_predict_control_request_zero_delta_for_zero_decoder():
    ds, _, graph = make_training_dataset(seed=21)
    model, _ = tiny_model(n_genes=10, mode="delta_on_raw", seed=22, graph=graph)
    for p in model.decoder.params():
        p.value[:] = 0.0
    (yhat, dhat), = predict(model, ds, [((), "L", "b0")])
    assert np.allclose(dhat, 0.0, atol=1e-12)


def test_predict_unseen_vs_absent_distinction():
    ds, _, graph = make_training_dataset(n_perts=4, seed=23)
    model, _ = tiny_model(n_genes=10, d=4, seed=24, graph=graph)
    split = SplitSpec({p: ("train" if i else "test")
                       for i, p in enumerate(ds.unique_perturbations())})
    cfg = TrainConfig(batch_size=8, max_epochs=2, seed=0)
    train(model, ds, split, cfg)
    unseen = ds.unique_perturbations()[0]  # test-only: in graph, not trained
    out = predict(model, ds, [(unseen, "L", "b0")])
    assert len(out) == 1
    with pytest.raises(ValueError, match="absent from the encoder graph"):
        predict(model, ds, [(("MISSING",), "L", "b0")])


def test_predict_clamp_target_value():
    ds, _, graph = make_training_dataset(seed=25)
    model, _ = tiny_model(n_genes=10, d=4, seed=26, graph=graph)
    pert = ds.unique_perturbations()[0]
    (yhat, _), = predict(model, ds, [(pert, "L", "b0")], clamp_target_value=0.123)
    gene_idx = ds.genes.index(pert[0])
    assert yhat[gene_idx] == 0.123


def test_predict_perturbation_deltas_weighting():
    spec = SyntheticSpec(n_genes=10, n_perturbations=3, cell_lines=("L1", "L2"),
                        n_batches=2, replicates=3, noise_std=0.05, seed=27,
                        graph=small_world_graph(10, k=4, p=0.1, rng=27))
    ds, _ = synth_generate(spec)
    model, _ = tiny_model(n_genes=10, d=4, seed=28,
                          graph=small_world_graph(10, k=4, p=0.1, rng=27))
    split = SplitSpec({p: "test" for p in ds.unique_perturbations()})
    idx = control_means(ds)
    deltas = predict_perturbation_deltas(model, ds, split, index=idx)
    assert set(deltas) == set(ds.unique_perturbations())
    # hand recompute for one perturbation
    pert = ds.unique_perturbations()[0]
    contexts = sorted({(ds.cell_lines[i], ds.batches[i])
                       for i in range(ds.n_cells) if ds.perturbations[i] == pert})
    preds = predict(model, ds, [(pert, c, b) for c, b in contexts], index=idx)
    counts = [sum(1 for i in range(ds.n_cells)
                  if ds.perturbations[i] == pert
                  and (ds.cell_lines[i], ds.batches[i]) == ctx) for ctx in contexts]
    expected = sum(k * d for k, (_, d) in zip(counts, preds)) / sum(counts)
    assert np.allclose(deltas[pert], expected, atol=1e-12)


def test_early_stopping_bookkeeping():
    ds, _, graph = make_training_dataset(n_perts=6, reps=8, seed=29)
    perts = ds.unique_perturbations()
    split = SplitSpec({p: ("train" if i < 4 else "val") for i, p in enumerate(perts)})
    model, _ = tiny_model(n_genes=10, d=4, seed=30, graph=graph)
    cfg = TrainConfig(batch_size=16, max_epochs=60, learning_rate=2e-3,
                      patience=5, seed=4)
    history = train(model, ds, split, cfg)
    assert len(history) <= 60
    # best-checkpoint sequence: the running best val metric is non-decreasing
    vals = [v for _, _, v in history if np.isfinite(v)]
    best_seq = np.maximum.accumulate(vals)
    assert np.all(np.diff(best_seq) >= 0)
    # restored parameters reproduce the best recorded validation metric
    idx = control_means(ds)
    from txpert.model import _model_split_pearson, _observed_split_deltas
    observed = _observed_split_deltas(ds, split, "val", idx)
    assert _model_split_pearson(model, ds, observed, idx) == pytest.approx(max(vals), abs=1e-9)


def test_checkpoint_round_trip_bitwise(tmp_path):
    model, _ = tiny_model(seed=31)
    path = tmp_path / "model.npz"
    save_checkpoint(model, path)
    originals = [p.value.copy() for p in model.params()]
    for p in model.params():
        p.value = p.value + 1.0
    meta = load_checkpoint(model, path)
    for p, orig in zip(model.params(), originals):
        assert np.array_equal(p.value, orig)
    assert meta["encoder_kind"] == "gatv2"


def test_checkpoint_shape_mismatch(tmp_path):
    model, _ = tiny_model(seed=32)
    path = tmp_path / "model.npz"
    save_checkpoint(model, path)
    other, _ = tiny_model(n_genes=8, d=4, layers=2, seed=33)
    with pytest.raises(ValueError, match="missing parameter"):
        load_checkpoint(other, path)
