"""Run configuration, single training runs and multi-run ablations.

A :class:`RunConfig` is the flat union of the estimator's hyperparameters, the
synthetic scene settings and the dataset sizes. Keys shared by both sides
(``image_size``, ``class_names``, ``focal_length``, ``seed``) drive both, so
one seed fixes the data stream, the initialization and the batch order.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .core_types import ScaleSet, out_of_range_fraction
from .data import SceneConfig, generate_dataset, read_dataset
from .estimator import ScaleAwareMonoDetector
from .metrics import HEADLINE_METRICS, chance_position_precision, evaluate

logger = logging.getLogger(__name__)

_ESTIMATOR_KEYS = tuple(k for k in ScaleAwareMonoDetector().get_params()
                        if k not in ("log_path", "checkpoint_path", "checkpoint_extra"))
_SCENE_KEYS = tuple(f.name for f in dataclasses.fields(SceneConfig))
_RUN_DEFAULTS = {"train_size": 2000, "val_size": 200, "data_dir": None}

# value kinds for keys whose default is None or ambiguous
_KINDS = {"scales": "int_tuple?", "vertical_expansion": "int?", "data_dir": "str?",
          "image_size": "int_tuple", "object_count": "int_tuple", "depth_range": "float_tuple",
          "class_names": "str_tuple"}

# ablation axis name -> run config key
AXES = {"scale-set": "scales", "lambda8": "lambda_wsm", "wsm-mode": "wsm_mode",
        "scale-loss-mode": "scale_loss_mode", "attention": "attention"}


def _defaults() -> Dict[str, object]:
    out = dict(ScaleAwareMonoDetector().get_params())
    for k in ("log_path", "checkpoint_path", "checkpoint_extra"):
        out.pop(k)
    for f in dataclasses.fields(SceneConfig):
        out.setdefault(f.name, f.default)
    out.update(_RUN_DEFAULTS)
    return out


def _kind(key: str, default) -> str:
    if key in _KINDS:
        return _KINDS[key]
    if isinstance(default, bool):
        return "bool"
    if isinstance(default, int):
        return "int"
    if isinstance(default, float):
        return "float"
    return "str"


def _parse(key: str, raw: str, kind: str):
    raw = raw.strip()
    optional = kind.endswith("?")
    kind = kind.rstrip("?")
    if optional and raw.lower() in ("", "none"):
        return None
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.endswith("_tuple"):
            cast = {"int": int, "float": float, "str": str}[kind.split("_")[0]]
            return tuple(cast(v.strip()) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ValueError(f"bad value for {key}: {raw!r}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


class RunConfig:
    """Flat key=value configuration of one training run; unknown keys are rejected."""

    def __init__(self, **overrides):
        self.values = _defaults()
        self.update(**overrides)

    def update(self, **overrides) -> "RunConfig":
        for key, value in overrides.items():
            if key not in self.values:
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(value, str) and _kind(key, self.values[key]) != "str":
                value = _parse(key, value, _kind(key, self.values[key]))
            elif isinstance(value, list):
                value = tuple(value)
            self.values[key] = value
        self.scene_config()  # validate eagerly
        self.estimator()
        return self

    def replace(self, **overrides) -> "RunConfig":
        return RunConfig(**{**self.values, **overrides})

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.values.items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        defaults = _defaults()
        parsed = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in defaults:
                raise ValueError(f"line {lineno}: unknown config key {key!r}")
            parsed[key] = _parse(key, raw, _kind(key, defaults[key]))
        return cls(**parsed)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    def scene_config(self) -> SceneConfig:
        return SceneConfig(**{k: self.values[k] for k in _SCENE_KEYS})

    def estimator(self, **extra) -> ScaleAwareMonoDetector:
        est = ScaleAwareMonoDetector(**{k: self.values[k] for k in _ESTIMATOR_KEYS}, **extra)
        est.validate_params()
        return est

    def datasets(self):
        """(train, val) samples: read from ``data_dir`` if set, else generated."""
        if self.values["data_dir"]:
            root = self.values["data_dir"]
            return read_dataset(root, "train"), read_dataset(root, "val")
        scene = self.scene_config()
        return (generate_dataset(scene, self.values["train_size"], "train"),
                generate_dataset(scene, self.values["val_size"], "val"))

    def val_dataset(self):
        if self.values["data_dir"]:
            return read_dataset(self.values["data_dir"], "val")
        return generate_dataset(self.scene_config(), self.values["val_size"], "val")


# ------------------------------------------------------------------ runs

def train_run(config: RunConfig, out_dir, evaluate_after: bool = True) -> dict:
    """Train one run into ``out_dir`` (config.txt, log.jsonl, checkpoint.pt, metrics.json)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.txt")
    log_path = out / "log.jsonl"
    if log_path.exists():
        log_path.unlink()
    train, val = config.datasets()
    est = config.estimator(log_path=str(log_path), checkpoint_path=str(out / "checkpoint.pt"),
                           checkpoint_extra={"run_config": config.to_text()})
    est.fit(train)
    if not evaluate_after:
        return {}
    return write_metrics(est, val, out / "metrics.json")


def write_metrics(est: ScaleAwareMonoDetector, samples, path) -> dict:
    """Write the flat metrics report to ``path`` and diagnostics next to it.

    The diagnostics are the chance position precision and the fraction of
    labels whose scale falls outside the scale set. Returns the report merged
    with the diagnostics.
    """
    report, audits = evaluate(est.model_, samples, return_audits=True)
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    labels = [lab for s in samples for lab in s.labels]
    diag = {"chance_position_precision": chance_position_precision(audits[-1], est.image_size),
            "scale_out_of_range_fraction": out_of_range_fraction(labels, est.model_config().scale_set)}
    (path.parent / "diagnostics.json").write_text(json.dumps(diag, indent=2) + "\n")
    return {**report, **diag}


def cached_run(config: RunConfig, out_dir) -> dict:
    """Reuse a finished run in ``out_dir`` if its resolved config is identical."""
    out = Path(out_dir)
    cfg_path, metrics_path = out / "config.txt", out / "metrics.json"
    diag_path = out / "diagnostics.json"
    if (cfg_path.exists() and metrics_path.exists() and diag_path.exists()
            and cfg_path.read_text() == config.to_text()):
        return {**json.loads(metrics_path.read_text()), **json.loads(diag_path.read_text())}
    return train_run(config, out)


def axis_values(axis: str, values: str) -> List[object]:
    """Parse a ``--values`` string for ``axis``; scale sets are ``;``-separated."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    key = AXES[axis]
    if axis == "scale-set":
        parsed = [tuple(int(v) for v in chunk.split(",")) for chunk in values.split(";") if chunk.strip()]
        for s in parsed:
            ScaleSet(s)
        return parsed
    kind = _kind(key, _defaults()[key])
    return [_parse(key, v, kind) for v in values.split(",") if v.strip()]


def ablate(base: RunConfig, axis: str, values: Sequence, out_dir, seeds: Iterable[int] = (0,),
           reuse: bool = True) -> List[dict]:
    """One run per (value, seed) with shared seeds; returns one row per value.

    Each row holds the seed-mean of every headline metric plus the per-seed
    reports under ``runs``.
    """
    key = AXES[axis]
    seeds = list(seeds)
    rows = []
    for value in values:
        label = _format(value).replace(",", "-")
        runs = []
        for seed in seeds:
            cfg = base.replace(**{key: value, "seed": seed})
            run_dir = Path(out_dir) / f"{axis}={label}" / f"seed{seed}"
            logger.info("ablation %s=%s seed %d -> %s", axis, label, seed, run_dir)
            runs.append(cached_run(cfg, run_dir) if reuse else train_run(cfg, run_dir))
        row = {"axis": axis, "value": _format(value), "seeds": seeds, "runs": runs}
        for metric in (*HEADLINE_METRICS, "chance_position_precision"):
            vals = [r[metric] for r in runs if r.get(metric) is not None]
            row[metric] = float(np.mean(vals)) if vals else None
        rows.append(row)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    cols = ("value", *HEADLINE_METRICS, "chance_position_precision")
    header = [rows[0]["axis"] if rows else "value", *cols[1:]]
    body = [[r["value"]] + ["-" if r[c] is None else f"{r[c]:.4f}" for c in cols[1:]] for r in rows]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)) for line in [header, *body]]
    return "\n".join(lines) + "\n"

