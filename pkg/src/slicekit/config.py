"""Flat key=value run configuration with [task], [model], [train] sections.

Typed schema with defaults; any key is overridable from the command line
via --set section.key=value. Parsing then serializing then parsing is the
identity on the typed values.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

_SCHEMA = {
    "task": {
        "id": ("str", "a5"),
        "train_low": ("int", 0),       # 0: task default range
        "train_high": ("int", 0),
        "eval_low": ("int", 0),
        "eval_high": ("int", 0),
    },
    "model": {
        "kind": ("str", "block_diagonal"),
        "d_h": ("int", 64),
        "layers": ("int", 1),
        "embed_dim": ("int", 32),
        "block_size": ("int", 8),
        "rank": ("int", 2),
        "density": ("float", 0.25),
        "block_style": ("str", "tanh_mix"),
        "dropout": ("float", 0.1),
        "embed_std": ("float", 0.3),
        "solver": ("str", "sequential"),
    },
    "train": {
        "steps": ("int", 10_000),
        "batch_size": ("int", 64),
        "peak_lr": ("float", 1e-3),
        "min_lr": ("float", 1e-5),
        "warmup_steps": ("int", 500),
        "weight_decay": ("float", 0.01),
        "seed": ("int", 0),
        "eval_every": ("int", 500),
        "len2_fraction": ("float", 0.125),
        "grad_clip": ("float", 0.0),
    },
}

PAPER_SCALE = {
    ("train", "steps"): 100_000,
    ("train", "batch_size"): 256,
    ("model", "d_h"): 1024,
}


class ConfigError(ValueError):
    pass


def _convert(section: str, key: str, raw: str):
    if section not in _SCHEMA or key not in _SCHEMA[section]:
        raise ConfigError(f"unknown config key [{section}] {key}")
    typ = _SCHEMA[section][key][0]
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: expected {typ}, got {raw!r}") from exc


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {s: {k: v[1] for k, v in keys.items()} for s, keys in _SCHEMA.items()}
        for s, kv in self.values.items():
            for k, v in kv.items():
                _convert(s, k, str(v))
                full[s][k] = type(full[s][k])(v)
        self.values = full

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set(self, dotted: str, raw: str) -> None:
        if "." not in dotted:
            raise ConfigError(f"--set expects section.key=value, got {dotted!r}")
        section, key = dotted.split(".", 1)
        self.values[section][key] = _convert(section, key, raw)

    def apply_paper_scale(self) -> None:
        for (section, key), v in PAPER_SCALE.items():
            self.values[section][key] = v

    def serialize(self) -> str:
        out = io.StringIO()
        for section in _SCHEMA:
            out.write(f"[{section}]\n")
            for key in _SCHEMA[section]:
                out.write(f"{key} = {self.values[section][key]}\n")
            out.write("\n")
        return out.getvalue()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse failure: {exc}") from exc
    values: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            values[section][key] = _convert(section, key, raw)
    return RunConfig(values)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
