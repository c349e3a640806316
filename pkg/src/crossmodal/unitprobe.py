"""Top-activating examples per unit and a cross-modal consistency score."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import network as nw
from .curriculum import TrainedModel
from .synthdata import Dataset

DEFAULT_K = 5


class ProbeError(ValueError):
    pass


@dataclass
class TopList:
    example_ids: list[int]
    activations: list[float]
    labels: list[int]


@dataclass
class UnitReport:
    layer: str
    unit: int
    top: dict[str, TopList]
    consistency: float

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "unit": self.unit,
            "consistency": self.consistency,
            "top": {m: {"ids": t.example_ids, "activations": t.activations, "labels": t.labels}
                    for m, t in self.top.items()},
        }


def layer_activations(model: TrainedModel, ds: Dataset, layer: str) -> dict[str, np.ndarray]:
    """Validation activations of ``layer`` for every modality."""
    return {m: nw.forward(model.params, model.spec, ds.val[m].x, m)[layer] for m in ds.modalities}


def _top_k(values: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -value keeps ascending ids among ties
    return np.argsort(-values, kind="stable")[:k]


def top_from_activations(acts: dict[str, np.ndarray], ds: Dataset, unit: int, k: int) -> dict[str, TopList]:
    if k < 1:
        raise ProbeError("k must be >= 1")
    out = {}
    for m, a in acts.items():
        if not 0 <= unit < a.shape[1]:
            raise ProbeError(f"unit {unit} out of range for width {a.shape[1]}")
        col = a[:, unit]
        ids = _top_k(col, k)
        out[m] = TopList([int(i) for i in ids], [float(col[i]) for i in ids],
                         [int(ds.val[m].labels[i]) for i in ids])
    return out


def top_activating(model: TrainedModel, ds: Dataset, layer: str, unit: int, k: int = DEFAULT_K) -> dict[str, TopList]:
    return top_from_activations(layer_activations(model, ds, layer), ds, unit, k)


def _plurality(labels) -> int:
    counts = Counter(labels)
    best = max(counts.values())
    return min(l for l, c in counts.items() if c == best)


def consistency_of(top: dict[str, TopList]) -> float:
    """Fraction of modalities whose top-k majority label is the plurality across modalities."""
    majors = [_plurality(t.labels) for t in top.values()]
    if len(majors) <= 1:
        return 1.0
    winner = _plurality(majors)
    return sum(m == winner for m in majors) / len(majors)


def unit_consistency(model: TrainedModel, ds: Dataset, layer: str, unit: int, k: int = DEFAULT_K) -> float:
    return consistency_of(top_activating(model, ds, layer, unit, k))


def probe_layer(model: TrainedModel, ds: Dataset, layer: str, k: int = DEFAULT_K) -> list[UnitReport]:
    acts = layer_activations(model, ds, layer)
    width = next(iter(acts.values())).shape[1]
    reports = []
    for unit in range(width):
        top = top_from_activations(acts, ds, unit, k)
        reports.append(UnitReport(layer, unit, top, consistency_of(top)))
    return reports


def consistency_summary(model: TrainedModel, ds: Dataset, layer: str, k: int = DEFAULT_K,
                        bins: int = 5) -> dict:
    scores = np.array([r.consistency for r in probe_layer(model, ds, layer, k)])
    return summarize(scores, bins)


def summarize(scores: np.ndarray, bins: int = 5) -> dict:
    hist, edges = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return {
        "units": int(scores.size),
        "mean": float(scores.mean()),
        "median": float(np.median(scores)),
        "histogram": [int(h) for h in hist],
        "bin_edges": [float(e) for e in edges],
    }
