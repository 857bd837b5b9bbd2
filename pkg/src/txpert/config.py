"""Flat TOML-style run configuration: [section] headers and key = value
lines with JSON-encoded scalars/lists. Round-trips unchanged."""

from __future__ import annotations

import json
from pathlib import Path

__all__ = ["loads_config", "dumps_config", "load_config", "save_config", "DEFAULT_CONFIG"]


DEFAULT_CONFIG = {
    "run": {"seed": 0, "out": "runs/out"},
    "data": {"path": "data"},
    "graphs": {"paths": [], "names": []},
    "split": {"seed": 0, "ratios": [0.5625, 0.1875, 0.25], "held_out_line": "", "path": ""},
    "encoder": {"kind": "gatv2", "layers": 4, "hidden_dim": 64, "heads": 1,
                "head_aggregation": "avg", "leaky_slope": 0.2, "expander_degree": 6,
                "edge_feat_dim": 4},
    "basal": {"kind": "mlp", "hidden": [128]},
    "model": {"mode": "latent_shift", "decoder_hidden": []},
    "train": {"batch_size": 128, "max_epochs": 60, "learning_rate": 0.002,
              "patience": 12, "basal_mode": "average", "optimizer": "adam",
              "target_mode": "mean"},
    "evaluation": {"fast_seed": 0, "repro_seeds": 5, "repro_seed": 0},
}


def loads_config(text: str) -> dict:
    out: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ValueError(f"config line {lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        try:
            out[section][key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            raise ValueError(f"config line {lineno}: bad value {value.strip()!r}") from None
    return out


def dumps_config(config: dict) -> str:
    lines = []
    for section in config:
        lines.append(f"[{section}]")
        for key, value in config[section].items():
            lines.append(f"{key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> dict:
    merged = {sec: dict(vals) for sec, vals in DEFAULT_CONFIG.items()}
    user = loads_config(Path(path).read_text(encoding="utf-8"))
    for sec, vals in user.items():
        if sec not in merged:
            raise ValueError(f"unknown config section [{sec}]")
        for key, value in vals.items():
            if key not in merged[sec]:
                raise ValueError(f"unknown config key {sec}.{key}")
            merged[sec][key] = value
    return merged


def save_config(config: dict, path) -> None:
    Path(path).write_text(dumps_config(config), encoding="utf-8")
