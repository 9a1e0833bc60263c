"""Shared JSON checkpoint reader/writer.

Every persisted artifact (base model, adapters, graph processor, prototype
sets) uses the same layout: {"kind": ..., "meta": {...}, "arrays": {name:
nested lists}}. Floats survive the round trip exactly (repr-based JSON), and
keys are written sorted so identical state yields identical bytes.
"""

from __future__ import annotations

import json
import os

import numpy as np


def save_checkpoint(path: str, kind: str, meta: dict, arrays: dict):
    payload = {
        "kind": kind,
        "meta": meta,
        "arrays": {name: np.asarray(a, dtype=np.float64).tolist() for name, a in arrays.items()},
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path: str, expect_kind: str | None = None):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path) as fh:
        payload = json.load(fh)
    for key in ("kind", "meta", "arrays"):
        if key not in payload:
            raise ValueError(f"checkpoint {path} is missing the '{key}' field")
    if expect_kind is not None and payload["kind"] != expect_kind:
        raise ValueError(f"checkpoint {path} is a '{payload['kind']}', expected '{expect_kind}'")
    arrays = {name: np.asarray(a, dtype=np.float64) for name, a in payload["arrays"].items()}
    return payload["kind"], payload["meta"], arrays
