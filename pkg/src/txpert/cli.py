"""Command-line surface for the full experiment lifecycle.

Subcommands: build-graph, synth, split, train, eval, baseline, ablate,
report. Exit codes: 0 success, 1 usage error, 2 data error. Every
output directory gets a manifest listing inputs, hashes, and versions;
reruns with identical config and seed reproduce identical artifacts
(timestamps live in their own report field).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import make_rng
from .config import DEFAULT_CONFIG, dumps_config, load_config, save_config
from .data import (ExpressionDataset, SplitSpec, load_dataset, save_dataset,
                   split_by_perturbation, split_cross_cell_line)
from .encoders import BasalEncoder, EncoderConfig, build_encoder
from .evaluation import GeneralBaseline, MetricReport, evaluate
from .graphs import (build_from_embeddings, downsample, generate_expander,
                     load_edge_list, load_embeddings, rewire, save_graph,
                     small_world_graph)
from .model import TrainConfig, TxPertModel, load_checkpoint, save_checkpoint, train
from .synthetic import SyntheticSpec, synth_generate

logger = logging.getLogger("txpert")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, inputs, seed, config: dict | None = None) -> None:
    manifest = {
        "txpert_version": __version__,
        "numpy_version": np.__version__,
        "seed": seed,
        "inputs": [{"path": str(p), "sha256": _sha256(Path(p))}
                   for p in inputs if Path(p).is_file()],
    }
    if config is not None:
        manifest["config"] = config
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True),
                                           encoding="utf-8")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_graphs_from_config(cfg: dict):
    paths = cfg["graphs"]["paths"]
    if not paths:
        raise UsageError("no graphs configured (graphs.paths)")
    graphs = []
    for i, path in enumerate(paths):
        names = cfg["graphs"].get("names") or []
        name = names[i] if i < len(names) else None
        graphs.append(load_edge_list(_require_file(path, "graph file"), name=name))
    return graphs


def _split_from_config(cfg: dict, dataset: ExpressionDataset) -> SplitSpec:
    sc = cfg["split"]
    if sc.get("path"):
        return SplitSpec.from_json(_require_file(sc["path"], "split file").read_text())
    if sc.get("held_out_line"):
        return split_cross_cell_line(dataset, sc["held_out_line"], rng_seed=sc["seed"])
    return split_by_perturbation(dataset, ratios=tuple(sc["ratios"]), seed=sc["seed"])


def _encoder_config(cfg: dict) -> EncoderConfig:
    e = cfg["encoder"]
    return EncoderConfig(kind=e["kind"], layers=e["layers"], hidden_dim=e["hidden_dim"],
                         heads=e["heads"], head_aggregation=e["head_aggregation"],
                         leaky_slope=e["leaky_slope"], expander_degree=e["expander_degree"],
                         edge_feat_dim=e["edge_feat_dim"])


def _build_model(cfg: dict, dataset: ExpressionDataset, graphs) -> TxPertModel:
    seed = cfg["run"]["seed"]
    rng = make_rng(seed)
    enc_cfg = _encoder_config(cfg)
    expander = None
    if enc_cfg.kind in ("exphormer", "exphormer_mg"):
        universe = sorted(set().union(*[set(g.nodes) for g in graphs]))
        expander = generate_expander(len(universe), enc_cfg.expander_degree, seed + 1)
    encoder = build_encoder(enc_cfg, graphs, rng, expander=expander)
    mode = cfg["model"]["mode"]
    if cfg["basal"]["kind"] == "identity" or mode == "delta_on_raw":
        basal = BasalEncoder("identity", n_genes=dataset.n_genes)
    else:
        basal = BasalEncoder("mlp", n_genes=dataset.n_genes, out_dim=encoder.out_dim,
                             hidden=tuple(cfg["basal"]["hidden"]), rng=rng)
    decoder_hidden = tuple(cfg["model"]["decoder_hidden"]) or None
    return TxPertModel(basal, encoder, dataset.n_genes, rng=rng, mode=mode,
                       decoder_hidden=decoder_hidden)


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(batch_size=t["batch_size"], max_epochs=t["max_epochs"],
                       learning_rate=t["learning_rate"], patience=t["patience"],
                       seed=cfg["run"]["seed"], basal_mode=t["basal_mode"],
                       optimizer=t["optimizer"], target_mode=t["target_mode"])


def _emit_report(report: MetricReport, out_dir: Path, stem: str = "report") -> Path:
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(report.to_json(), encoding="utf-8")
    (out_dir / f"{stem}.csv").write_text(report.to_csv(), encoding="utf-8")
    return json_path


def _evaluate_model(cfg: dict, model: TxPertModel, dataset, split) -> MetricReport:
    from .data import control_means
    from .model import predict

    index = control_means(dataset)

    def predict_fn(pert, line, batch):
        (yhat, _), = predict(model, dataset, [(pert, line, batch)], index=index)
        return yhat

    ev = cfg["evaluation"]
    return evaluate(predict_fn, dataset, split, fast_seed=ev["fast_seed"],
                    repro_seeds=ev["repro_seeds"], repro_seed=ev["repro_seed"],
                    index=index)


# ---------------------------------------------------------------------------
# subcommands


def cmd_build_graph(args) -> int:
    if bool(args.embeddings) == bool(args.edges):
        raise UsageError("build-graph needs exactly one of --embeddings or --edges")
    if args.embeddings:
        genes, emb = load_embeddings(_require_file(args.embeddings, "embedding file"))
        max_in = args.max_in if args.max_in and args.max_in > 0 else None
        graph = build_from_embeddings(genes, emb, top_fraction=args.top_fraction,
                                      max_in=max_in, symmetrize=args.symmetrize,
                                      name=args.name or "embedding")
        inputs = [args.embeddings]
    else:
        graph = load_edge_list(_require_file(args.edges, "edge list"),
                               symmetrize=args.symmetrize, name=args.name)
        inputs = [args.edges]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_graph(graph, out)
    _write_manifest(out.parent, inputs, args.seed)
    print(f"wrote {out} ({graph.n_nodes} nodes, {graph.n_edges} edges)")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(n_genes=args.genes, n_perturbations=args.perturbations,
                         cell_lines=tuple(args.cell_lines.split(",")),
                         n_batches=args.batches, replicates=args.replicates,
                         latent_dim=args.latent_dim, noise_std=args.noise_std,
                         seed=args.seed)
    dataset, truth = synth_generate(spec)
    save_dataset(dataset, out)
    graph = small_world_graph(spec.n_genes, k=6, p=0.1, rng=make_rng(spec.seed + 1))
    save_graph(graph, out / "graph.tsv")
    with open(out / "truth_deltas.tsv", "w", encoding="utf-8") as fh:
        fh.write("perturbation\t" + "\t".join(dataset.genes) + "\n")
        for pert in sorted(truth.deltas):
            vals = "\t".join(repr(float(v)) for v in truth.deltas[pert])
            fh.write("+".join(pert) + "\t" + vals + "\n")
    _write_manifest(out, [], args.seed)
    print(f"wrote synthetic dataset to {out} ({dataset.n_cells} cells, "
          f"{dataset.n_genes} genes, {len(truth.deltas)} perturbations)")
    return 0


def cmd_split(args) -> int:
    dataset = load_dataset(_require_file(Path(args.data) / "cells.tsv", "dataset").parent)
    if args.held_out_line:
        spec = split_cross_cell_line(dataset, args.held_out_line, rng_seed=args.seed)
    else:
        ratios = tuple(float(x) for x in args.ratios.split(","))
        spec = split_by_perturbation(dataset, ratios=ratios, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(spec.to_json(), encoding="utf-8")
    sizes = {s: len(spec.perturbations(s)) for s in ("train", "val", "test")}
    print(f"wrote {out} {sizes}")
    return 0


def _load_run_inputs(cfg: dict):
    data_dir = _require_file(Path(cfg["data"]["path"]) / "cells.tsv", "dataset").parent
    dataset = load_dataset(data_dir)
    graphs = _load_graphs_from_config(cfg)
    split = _split_from_config(cfg, dataset)
    return dataset, graphs, split


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset, graphs, split = _load_run_inputs(cfg)
    (out / "split.json").write_text(split.to_json(), encoding="utf-8")
    model = _build_model(cfg, dataset, graphs)
    history = train(model, dataset, split, _train_config(cfg))
    save_checkpoint(model, out / "model.npz")
    with open(out / "history.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,train_mse,val_pearson_delta\n")
        for epoch, mse, val in history:
            fh.write(f"{epoch},{mse!r},{val!r}\n")
    echo = {sec: dict(vals) for sec, vals in cfg.items()}
    echo["split"]["path"] = str(out / "split.json")
    save_config(echo, out / "config.toml")
    _write_manifest(out, [Path(cfg["data"]["path"]) / "cells.tsv",
                          *cfg["graphs"]["paths"]], cfg["run"]["seed"], config=echo)
    print(f"trained {len(history)} epochs; checkpoint at {out / 'model.npz'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out or cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset, graphs, split = _load_run_inputs(cfg)
    model = _build_model(cfg, dataset, graphs)
    load_checkpoint(model, _require_file(args.checkpoint, "checkpoint"))
    report = _evaluate_model(cfg, model, dataset, split)
    path = _emit_report(report, out)
    _write_manifest(out, [args.checkpoint], cfg["run"]["seed"])
    print(f"wrote {path}; test Pearson delta "
          f"{report.aggregates['pearson_delta']}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out or cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    data_dir = _require_file(Path(cfg["data"]["path"]) / "cells.tsv", "dataset").parent
    dataset = load_dataset(data_dir)
    split = _split_from_config(cfg, dataset)
    base = GeneralBaseline(dataset, split)
    ev = cfg["evaluation"]
    report = evaluate(base, dataset, split, fast_seed=ev["fast_seed"],
                      repro_seeds=ev["repro_seeds"], repro_seed=ev["repro_seed"],
                      include_baseline=False)
    path = _emit_report(report, out, stem="baseline")
    print(f"wrote {path}; baseline Pearson delta {report.aggregates['pearson_delta']}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    if bool(args.rewire) == bool(args.downsample):
        raise UsageError("ablate needs exactly one of --rewire or --downsample")
    points = [float(x) for x in (args.rewire or args.downsample).split(",")]
    transform = "rewire" if args.rewire else "downsample"
    out = Path(cfg["run"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    dataset, graphs, split = _load_run_inputs(cfg)
    seed = cfg["run"]["seed"]
    rows = []
    for value in points:
        point_dir = out / f"{transform}_{value:g}"
        point_dir.mkdir(parents=True, exist_ok=True)
        rng = make_rng(seed + 10_000)
        if transform == "rewire":
            g = rewire(graphs[0], value, args.rewire_mode, rng) if value > 0 else graphs[0]
        else:
            g = downsample(graphs[0], value, rng)
        save_graph(g, point_dir / "graph.tsv")
        model = _build_model(cfg, dataset, [g] + graphs[1:])
        train(model, dataset, split, _train_config(cfg))
        save_checkpoint(model, point_dir / "model.npz")
        report = _evaluate_model(cfg, model, dataset, split)
        _emit_report(report, point_dir)
        rows.append({transform: value,
                     "pearson_delta": report.aggregates["pearson_delta"],
                     "retrieval": report.aggregates["retrieval"],
                     "baseline_pearson_delta": report.baseline.get("pearson_delta"),
                     "reproducibility_pearson_delta":
                         report.reproducibility.get("pearson_delta")})
        print(f"{transform}={value:g}: pearson_delta={rows[-1]['pearson_delta']}")
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    _write_manifest(out, cfg["graphs"]["paths"], seed)
    print(f"wrote {out / 'summary.csv'}")
    return 0


def cmd_report(args) -> int:
    paths = [_require_file(p, "report") for p in args.inputs.split(",")]
    rows = []
    for p in paths:
        rep = MetricReport.from_json(p.read_text(encoding="utf-8"))
        rows.append({
            "report": str(p),
            "n_perturbations": rep.aggregates.get("n_perturbations"),
            "pearson_delta": rep.aggregates.get("pearson_delta"),
            "retrieval": rep.aggregates.get("retrieval"),
            "fast_retrieval": rep.aggregates.get("fast_retrieval"),
            "baseline_pearson_delta": rep.baseline.get("pearson_delta"),
            "reproducibility_pearson_delta": rep.reproducibility.get("pearson_delta"),
        })
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {out} ({len(rows)} reports)")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _config_from_args(args) -> dict:
    if getattr(args, "config", None):
        cfg = load_config(_require_file(args.config, "config file"))
    else:
        cfg = {sec: dict(vals) for sec, vals in DEFAULT_CONFIG.items()}
    if getattr(args, "seed", None) is not None:
        cfg["run"]["seed"] = args.seed
    if getattr(args, "out", None):
        cfg["run"]["out"] = args.out
    if getattr(args, "data", None):
        cfg["data"]["path"] = args.data
    if getattr(args, "graphs", None):
        cfg["graphs"]["paths"] = args.graphs.split(",")
    if getattr(args, "split", None):
        cfg["split"]["path"] = args.split
    if getattr(args, "held_out_line", None):
        cfg["split"]["held_out_line"] = args.held_out_line
    if getattr(args, "encoder", None):
        cfg["encoder"]["kind"] = args.encoder
    return cfg


def _add_run_flags(p, checkpoint=False):
    p.add_argument("--config", help="TOML-style run config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--graphs", help="comma-separated graph TSV paths")
    p.add_argument("--split", help="precomputed split JSON")
    p.add_argument("--held-out-line", dest="held_out_line")
    p.add_argument("--encoder", choices=["gatv2", "hybrid", "exphormer",
                                         "exphormer_mg", "multilayer"])
    if checkpoint:
        p.add_argument("--checkpoint", required=True)


def build_parser() -> _Parser:
    parser = _Parser(prog="txpert", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("build-graph", help="build a knowledge graph from embeddings or edges")
    p.add_argument("--embeddings")
    p.add_argument("--edges")
    p.add_argument("--top-fraction", type=float, default=0.01)
    p.add_argument("--max-in", type=int, default=0)
    p.add_argument("--symmetrize", action="store_true")
    p.add_argument("--name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--genes", type=int, default=200)
    p.add_argument("--perturbations", type=int, default=60)
    p.add_argument("--cell-lines", default="lineA,lineB")
    p.add_argument("--batches", type=int, default=3)
    p.add_argument("--replicates", type=int, default=30)
    p.add_argument("--latent-dim", type=int, default=10)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a perturbation split")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.5625,0.1875,0.25")
    p.add_argument("--held-out-line", dest="held_out_line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model per config")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_run_flags(p, checkpoint=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="evaluate the general baseline")
    _add_run_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("ablate", help="sweep graph corruption, retraining per point")
    _add_run_flags(p)
    p.add_argument("--rewire", help="comma-separated fractions")
    p.add_argument("--rewire-mode", default="both", choices=["source", "target", "both"])
    p.add_argument("--downsample", help="comma-separated keep ratios")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge metric reports into a summary table")
    p.add_argument("--inputs", required=True, help="comma-separated report JSON paths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("TXPERT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
