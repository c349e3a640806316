"""Cross-modal and within-modal retrieval evaluation (cosine ranking, AP, mAP)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import network as nw
from .curriculum import TrainedModel
from .synthdata import Dataset

FEATURE_LAYERS = ("join", "shared1", "shared2")
NORM_EPS = 1e-12


class RetrievalError(ValueError):
    pass


@dataclass
class FeatureTable:
    layer: str
    modalities: list[str]          # per row
    labels: np.ndarray             # per row
    features: np.ndarray           # (rows, dim)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def modality_names(self) -> list[str]:
        return list(dict.fromkeys(self.modalities))

    def rows(self, modality: str) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.modalities) == modality)


@dataclass
class RetrievalReport:
    layer: str
    modalities: list[str]
    map: dict[str, dict[str, float]]              # query -> target -> percent
    query_counts: dict[str, dict[str, int]]
    within: dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        vals = [v for q, row in self.map.items() for t, v in row.items() if q != t]
        return float(np.mean(vals))

    def pairs(self) -> list[tuple[str, str]]:
        return [(q, t) for q in self.modalities for t in self.modalities if q != t]

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "modalities": self.modalities,
            "map": self.map,
            "query_counts": self.query_counts,
            "mean": self.mean,
            "within": self.within,
        }


def extract_features(model: TrainedModel, ds: Dataset, layer: str) -> FeatureTable:
    if layer not in FEATURE_LAYERS:
        raise RetrievalError(f"unknown layer {layer!r}")
    mods, labels, feats = [], [], []
    for m in ds.modalities:
        split = ds.val[m]
        feats.append(nw.forward(model.params, model.spec, split.x, m)[layer])
        labels.append(split.labels)
        mods.extend([m] * len(split))
    return FeatureTable(layer, mods, np.concatenate(labels), np.concatenate(feats))


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise RetrievalError("length mismatch")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(a @ b / (na * nb))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norms < NORM_EPS, 0.0, x / np.where(norms < NORM_EPS, 1.0, norms))


def average_precision(relevance: Sequence[int]) -> float:
    """Non-interpolated AP of a ranked 0/1 list (0 if nothing is relevant)."""
    rel = np.asarray(relevance, dtype=np.float64)
    hits = rel.sum()
    if hits == 0:
        return 0.0
    precision = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float((precision * rel).sum() / hits)


def _ap_rows(relevance: np.ndarray) -> np.ndarray:
    hits = relevance.sum(axis=1)
    precision = np.cumsum(relevance, axis=1) / np.arange(1, relevance.shape[1] + 1)
    num = (precision * relevance).sum(axis=1)
    return np.divide(num, hits, out=np.zeros_like(num), where=hits > 0)


def rank_targets(query_feats: np.ndarray, target_feats: np.ndarray) -> np.ndarray:
    """Target indices per query, by descending cosine; ties by ascending index."""
    sims = _unit_rows(query_feats) @ _unit_rows(target_feats).T
    return np.argsort(-sims, axis=1, kind="stable")


def _query_rows(n: int, num_queries: int | None, rng: np.random.Generator) -> np.ndarray:
    if num_queries is None:
        return np.arange(n)
    return rng.integers(0, n, size=num_queries)


def _pair_map(ft: FeatureTable, q_rows, t_rows, exclude_self: bool) -> float:
    q_feats = ft.features[q_rows]
    t_feats = ft.features[t_rows]
    order = rank_targets(q_feats, t_feats)
    rel = (ft.labels[t_rows][order] == ft.labels[q_rows][:, None]).astype(np.float64)
    if exclude_self:
        keep = t_rows[order] != q_rows[:, None]
        rel = rel[keep].reshape(len(q_rows), len(t_rows) - 1)
    return float(_ap_rows(rel).mean())


def cross_modal_map(ft: FeatureTable, num_queries: int | None = None, seed: int = 0) -> RetrievalReport:
    """mAP (percent) for every ordered pair of distinct modalities.

    ``num_queries=None`` uses every row of the query modality once; otherwise
    that many queries are drawn uniformly with replacement.
    """
    mods = ft.modality_names()
    if len(mods) < 2:
        raise RetrievalError("need at least 2 modalities")
    rows = {m: ft.rows(m) for m in mods}
    for m, r in rows.items():
        if r.size == 0:
            raise RetrievalError(f"modality {m!r} has no rows")
    rng = np.random.default_rng(seed)
    table: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    for q in mods:
        table[q], counts[q] = {}, {}
        for t in mods:
            if t == q:
                continue
            q_rows = rows[q][_query_rows(rows[q].size, num_queries, rng)]
            table[q][t] = 100.0 * _pair_map(ft, q_rows, rows[t], exclude_self=False)
            counts[q][t] = int(q_rows.size)
    return RetrievalReport(ft.layer, mods, table, counts)


def within_modal_map(ft: FeatureTable, num_queries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Per-modality mAP (percent) retrieving within the query's own modality, query excluded."""
    rng = np.random.default_rng(seed)
    out = {}
    for m in ft.modality_names():
        r = ft.rows(m)
        if r.size < 2:
            raise RetrievalError(f"modality {m!r} needs at least 2 rows")
        q_rows = r[_query_rows(r.size, num_queries, rng)]
        out[m] = 100.0 * _pair_map(ft, q_rows, r, exclude_self=True)
    return out


def evaluate(model: TrainedModel, ds: Dataset, layer: str, num_queries: int | None = None,
             seed: int = 0) -> RetrievalReport:
    ft = extract_features(model, ds, layer)
    report = cross_modal_map(ft, num_queries, seed)
    report.within = within_modal_map(ft, num_queries, seed)
    return report


def layer_sweep(model: TrainedModel, ds: Dataset, layers: Sequence[str] = FEATURE_LAYERS,
                num_queries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Mean cross-modal mAP per layer, every layer evaluated with the same seed."""
    if not layers:
        raise RetrievalError("no layers requested")
    return {l: cross_modal_map(extract_features(model, ds, l), num_queries, seed).mean for l in layers}


def chance_map(n_targets: int, n_relevant: int, trials: int = 10_000, seed: int = 0) -> float:
    """Monte Carlo mAP (percent) of uniformly random rankings."""
    rng = np.random.default_rng(seed)
    base = np.zeros(n_targets)
    base[:n_relevant] = 1.0
    rel = np.stack([rng.permutation(base) for _ in range(trials)])
    return 100.0 * float(_ap_rows(rel).mean())
