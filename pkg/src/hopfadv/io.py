"""JSON/CSV persistence for fields, datasets, models and run manifests.

Every float is written as ``%.17g`` so a load after a save reproduces the
exact binary value.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import UnknownArchitecture
from .hopf import BlochField, LabeledSample, PhaseLabel
from .network import ARCH, PARAM_SHAPES, CnnModel


def _fmt_float(x: float) -> str:
    if math.isnan(x) or math.isinf(x):
        raise ValueError(f"cannot serialize non-finite float {x}")
    if x == 0.0:
        # "-0" would parse back as the integer 0 and lose the sign bit
        return "-0.0" if math.copysign(1.0, x) < 0 else "0.0"
    return format(x, ".17g")


def encode(obj) -> str:
    """Serialize to JSON text with 17-significant-digit floats."""
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, (int, np.integer)) and not isinstance(obj, bool):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        if obj.dtype.kind == "f":
            return "[" + ",".join(_fmt_float(v) for v in obj.ravel().tolist()) + "]"
        return encode(obj.tolist())
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(encode(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(encode(obj))
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


def field_to_dict(field: BlochField) -> dict:
    return {"n": field.n, "h": field.h, "bloch": field.data.reshape(-1)}


def field_from_dict(d: dict) -> BlochField:
    return BlochField.from_flat(int(d["n"]), d["bloch"], d.get("h"))


def save_field(path, field: BlochField) -> Path:
    return write_json(path, field_to_dict(field))


def load_field(path) -> BlochField:
    d = read_json(path)
    if "field" in d and "bloch" not in d:
        d = d["field"]
    return field_from_dict(d)


def dataset_to_list(samples) -> list:
    return [{"h": s.h, "label": s.label.chi, "field": field_to_dict(s.field)} for s in samples]


def dataset_from_list(items) -> list[LabeledSample]:
    return [LabeledSample(field_from_dict(d["field"]), float(d["h"]), PhaseLabel.from_chi(d["label"])) for d in items]


def save_dataset(path, samples) -> Path:
    return write_json(path, dataset_to_list(samples))


def load_dataset(path) -> list[LabeledSample]:
    return dataset_from_list(read_json(path))


def model_to_dict(model: CnnModel, extra: dict | None = None) -> dict:
    d = {"arch": ARCH,
         "tensors": {k: {"shape": list(v.shape), "data": v.reshape(-1)} for k, v in model.params.items()}}
    if extra:
        d.update(extra)
    return d


def model_from_dict(d: dict) -> CnnModel:
    if d.get("arch") != ARCH:
        raise UnknownArchitecture(f"unknown architecture {d.get('arch')!r}, expected {ARCH!r}")
    params = {}
    for name, t in d["tensors"].items():
        shape = tuple(t["shape"])
        if name in PARAM_SHAPES and shape != PARAM_SHAPES[name]:
            raise UnknownArchitecture(f"tensor {name} has shape {shape}, expected {PARAM_SHAPES[name]}")
        params[name] = np.asarray(t["data"], dtype=np.float64).reshape(shape)
    return CnnModel(params)


def save_model(path, model: CnnModel, extra: dict | None = None) -> Path:
    return write_json(path, model_to_dict(model, extra))


def load_model(path) -> CnnModel:
    return model_from_dict(read_json(path))


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt_float(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def manifest(command: str, flags: dict, seed, outputs, started: datetime, finished: datetime | None = None) -> dict:
    finished = finished or datetime.now(timezone.utc)
    return {
        "command": command,
        "flags": {k: _plain(v) for k, v in flags.items()},
        "seed": seed,
        "code_version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "pid": os.getpid(),
        "started": started.isoformat(),
        "finished": finished.isoformat(),
        "outputs": [str(p) for p in outputs],
    }


def _plain(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v
