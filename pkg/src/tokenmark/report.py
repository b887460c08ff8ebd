"""Watermark-rate reports and JSON helpers shared by extraction and attacks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class WRReport:
    scheme: str
    wr: float
    n_samples: int
    scores: list[float]
    hits: list[bool]
    threshold: float | None = None
    target: int | None = None
    fpr: float | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return finite(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def watermark_rate(hits) -> float:
    hits = np.asarray(hits, dtype=bool)
    if hits.size == 0:
        raise ValueError("watermark rate of an empty extraction set")
    return float(hits.sum()) / hits.size


def finite(obj):
    """Recursively convert numpy scalars and refuse NaN/Inf."""
    if isinstance(obj, dict):
        return {str(k): finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [finite(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError("refusing to serialise a non-finite number")
        return v
    if isinstance(obj, np.ndarray):
        return finite(obj.tolist())
    return obj
