"""Output files: metadata header line, CSV writing, config loading."""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Iterable, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .sampler import SamplerConfig
from .trainer import InitSpec, TrainConfig


def inputs_checksum(paths: Iterable) -> str:
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            continue
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def header_line(command: str, seed, options: dict, inputs: Sequence) -> str:
    """One-line provenance record; contains nothing that varies between identical runs."""
    opts = json.dumps(options, sort_keys=True, separators=(",", ":"), default=str)
    return (
        f"# phi4mrf {__version__} command={command} seed={seed} "
        f"options={opts} inputs_sha256={inputs_checksum(inputs)}"
    )


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "isoformat"):
        return value.isoformat()
    return str(value)


def write_csv(path, header: str, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv_rows(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [r for r in reader if r]


_SAMPLER_KEYS = {f.name for f in fields(SamplerConfig)}
_INIT_KEYS = {f.name for f in fields(InitSpec)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"sampler", "init"}


def load_config(path) -> dict:
    if path is None:
        return {}
    with Path(path).open("rb") as fh:
        return tomllib.load(fh)


def build_configs(
    doc: dict, base_train: TrainConfig, base_sampler: SamplerConfig, overrides: dict | None = None
) -> tuple[TrainConfig, SamplerConfig]:
    """Apply a flat config document (plus CLI overrides) onto the base configs.

    Top-level keys name ``TrainConfig``, ``InitSpec`` or (training)
    ``SamplerConfig`` fields. An optional ``[posterior]`` table holds
    ``SamplerConfig`` fields for the sampling done after training. Changing
    ``epochs`` without setting ``average_last`` rescales the base averaging
    window in proportion.
    """
    flat = {k: v for k, v in doc.items() if not isinstance(v, dict)}
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(flat) - _SAMPLER_KEYS - _INIT_KEYS - _TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    train_kw = {k: flat[k] for k in flat if k in _TRAIN_KEYS}
    if "epochs" in train_kw and "average_last" not in train_kw and base_train.average_last:
        # an inherited averaging window keeps its share of the run
        train_kw["average_last"] = max(1, round(base_train.average_last * train_kw["epochs"] / base_train.epochs))
    cfg = replace(
        base_train,
        sampler=replace(base_train.sampler, **{k: flat[k] for k in flat if k in _SAMPLER_KEYS}),
        init=replace(base_train.init, **{k: flat[k] for k in flat if k in _INIT_KEYS}),
        **train_kw,
    )
    post = doc.get("posterior", {})
    bad = set(post) - _SAMPLER_KEYS
    if bad:
        raise ValueError(f"unknown [posterior] keys: {sorted(bad)}")
    return cfg, replace(base_sampler, **post)


def config_record(cfg: TrainConfig) -> dict:
    out = {k: getattr(cfg, k) for k in sorted(_TRAIN_KEYS) if k != "threads"}
    out["sampler"] = {f.name: getattr(cfg.sampler, f.name) for f in fields(SamplerConfig)}
    out["init"] = {f.name: getattr(cfg.init, f.name) for f in fields(InitSpec)}
    return out
