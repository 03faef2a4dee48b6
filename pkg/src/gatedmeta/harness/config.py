"""JSON experiment configuration with strict validation.

A config is a JSON object with these sections (all optional except ``kind``)::

    {
      "kind": "metagater",
      "seed": 0,
      "out": "runs/mnist",
      "arch": {...}, "data": {...}, "federation": {...},
      "schedule": {...}, "penalty": {...}, "adaptation": {...},
      "diagnostics": {...}
    }

Unknown keys are rejected. Relative paths resolve against the directory of
the config file. See ``configs/`` and the README for complete examples.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..core_math import Schedule, ScheduleError

KINDS = (
    "metagater",
    "fedavg",
    "metasnip",
    "diagnostics-lemma3",
    "diagnostics-smoothness",
    "diagnostics-convergence",
)

DEFAULTS = {
    "kind": None,
    "seed": 0,
    "out": None,
    "arch": {
        "type": "mlp",
        "n_in": 196,
        "hidden": 100,
        "c_in": 3,
        "c1": 8,
        "c2": 16,
        "n_classes": 10,
        "gated": False,
        "gate_hidden": 16,
        "grad_mode": "gumbel",
        "temperature": 1.0,
        "gumbel_noise": False,
        "gate_bias_init": 1.0,
    },
    "data": {
        "source": "mnist-idx",
        "images": None,
        "labels": None,
        "downsample": 1,
        "n_classes": 10,
        "n_per_class": 300,
        "channels": 3,
        "size": 8,
        "image_noise": 0.35,
        "n_train_nodes": 20,
        "n_target_nodes": 5,
        "classes_per_node": 2,
        "size_range": None,
        "train_fraction": 0.8,
        "dim": 10,
        "rho": 1.0,
        "heterogeneity": 1.0,
    },
    "federation": {
        "T": 200,
        "m": 5,
        "local_mode": "fixed",
        "local_steps": 1,
        "local_lr": 0.05,
        "tol0": 1e-2,
        "exact_local": False,
        "warm_start": False,
        "workers": None,
    },
    "schedule": {"rule": "paper-experiment", "lam": 0.2, "rho": None, "beta": None},
    "penalty": {"kind": "none", "strength": 0.0, "start": None, "stop": None, "group_size": 2},
    "adaptation": {"gate_step": 0.05, "backbone_step": 0.05, "keep_ratio": 0.8},
    "diagnostics": {"federations": 10, "pairs": 10000},
}

_SOURCES = ("mnist-idx", "synthetic-images", "quadratic")
_ARCHS = ("mlp", "cnn")
_PENALTIES = ("none", "l1", "group_lasso")


class ConfigError(ValueError):
    """Invalid configuration; the message names the field and, when known, the line."""

    def __init__(self, message, field_path=None, line=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field_path:
            where.append(f"field '{field_path}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.field_path = field_path
        self.line = line


def _line_of(text: Optional[str], key: str) -> Optional[int]:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _merge(defaults: dict, given: dict, path: str, text: Optional[str]) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        full = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError("unknown key", full, _line_of(text, key))
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError("expected an object", full, _line_of(text, key))
            out[key] = _merge(defaults[key], value, full, text)
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 0
    out: Optional[str] = None
    arch: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["arch"]))
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["data"]))
    federation: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["federation"]))
    schedule: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["schedule"]))
    penalty: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["penalty"]))
    adaptation: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["adaptation"]))
    diagnostics: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["diagnostics"]))
    source_path: Optional[str] = None

    # ------------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict, base_dir=None, text=None, source_path=None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("top level must be a JSON object")
        merged = _merge(DEFAULTS, raw, "", text)
        cfg = cls(**merged, source_path=source_path)
        cfg._resolve_paths(Path(base_dir) if base_dir else Path.cwd(), text)
        cfg.validate(text)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        text = path.read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", line=exc.lineno) from exc
        return cls.from_dict(raw, base_dir=path.parent, text=text, source_path=str(path))

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in DEFAULTS}

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        out = ExperimentConfig(**d, source_path=self.source_path)
        out.validate()
        return out

    # ------------------------------------------------------------------

    def _resolve_paths(self, base: Path, text):
        for key in ("images", "labels"):
            p = self.data.get(key)
            if p is None:
                continue
            p = Path(p)
            if not p.is_absolute():
                p = (base / p).resolve()
            self.data[key] = str(p)

    def validate(self, text=None):
        def fail(msg, path):
            raise ConfigError(msg, path, _line_of(text, path.rsplit(".", 1)[-1]))

        if self.kind not in KINDS:
            fail(f"kind must be one of {', '.join(KINDS)}", "kind")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            fail("seed must be a non-negative integer", "seed")
        a, d, f, s, p = self.arch, self.data, self.federation, self.schedule, self.penalty
        if a["type"] not in _ARCHS:
            fail(f"must be one of {_ARCHS}", "arch.type")
        if a["grad_mode"] not in ("gumbel", "ste"):
            fail("must be 'gumbel' or 'ste'", "arch.grad_mode")
        if d["source"] not in _SOURCES:
            fail(f"must be one of {_SOURCES}", "data.source")
        diag = self.kind.startswith("diagnostics")
        if diag and d["source"] != "quadratic":
            fail("diagnostics experiments need the quadratic source", "data.source")
        if not diag and d["source"] == "quadratic":
            fail("training experiments need an image source", "data.source")
        if d["source"] == "mnist-idx":
            for key in ("images", "labels"):
                if d[key] is None:
                    fail("path required for the mnist-idx source", f"data.{key}")
                if not Path(d[key]).exists():
                    fail(f"file {d[key]} does not exist", f"data.{key}")
        if d["size_range"] is not None:
            sr = d["size_range"]
            if not (isinstance(sr, list) and len(sr) == 2 and all(isinstance(v, int) for v in sr)):
                fail("must be a pair of integers", "data.size_range")
        for key in ("n_train_nodes", "n_target_nodes", "classes_per_node", "downsample"):
            if not isinstance(d[key], int) or d[key] < (0 if key == "n_target_nodes" else 1):
                fail("must be a positive integer", f"data.{key}")
        if not isinstance(f["T"], int) or f["T"] < 1:
            fail("must be a positive integer", "federation.T")
        if f["local_mode"] not in ("fixed", "tolerance"):
            fail("must be 'fixed' or 'tolerance'", "federation.local_mode")
        if not isinstance(f["local_steps"], int) or f["local_steps"] < 1:
            fail("must be a positive integer", "federation.local_steps")
        if f["workers"] is not None and (not isinstance(f["workers"], int) or f["workers"] < 1):
            fail("must be a positive integer", "federation.workers")
        if p["kind"] not in _PENALTIES:
            fail(f"must be one of {_PENALTIES}", "penalty.kind")
        if p["strength"] < 0:
            fail("must be non-negative", "penalty.strength")
        if not isinstance(p["group_size"], int) or p["group_size"] < 1:
            fail("must be a positive integer", "penalty.group_size")
        kr = self.adaptation["keep_ratio"]
        if not 0 < kr <= 1:
            fail("must lie in (0, 1]", "adaptation.keep_ratio")
        if s["rule"] not in ("paper-experiment", "theorem1"):
            fail("must be 'paper-experiment' or 'theorem1'", "schedule.rule")
        if s["rule"] == "theorem1":
            rho = s["rho"] if s["rho"] is not None else (d["rho"] if d["source"] == "quadratic" else None)
            if rho is None:
                fail("theorem1 rule needs rho", "schedule.rho")
            try:
                self.build_schedule()
            except ScheduleError as exc:
                fail(str(exc), "schedule.lam")

    # ------------------------------------------------------------------

    @property
    def rho(self) -> Optional[float]:
        if self.schedule["rho"] is not None:
            return float(self.schedule["rho"])
        if self.data["source"] == "quadratic":
            return float(self.data["rho"])
        return None

    def build_schedule(self) -> Schedule:
        s = self.schedule
        return Schedule(
            rule=s["rule"],
            lam=float(s["lam"]),
            T=int(self.federation["T"]),
            rho=self.rho if s["rule"] == "theorem1" else None,
            beta=s["beta"],
        )
