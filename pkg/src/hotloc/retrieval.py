"""Descriptor database, L2 top-N retrieval and recall / MRR metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

TRUE_POSITIVE_RADIUS = 30.0


@dataclass
class DescriptorDatabase:
    ids: np.ndarray  # int64
    positions: np.ndarray  # [M, 2] horizontal pose positions, meters
    descriptors: np.ndarray  # [M, D]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("database ids must be unique")
        if not (len(self.ids) == len(self.positions) == len(self.descriptors)):
            raise ValueError("ids, positions and descriptors must have equal length")
        norms = np.linalg.norm(self.descriptors, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("database descriptors must be unit norm")

    def __len__(self) -> int:
        return len(self.ids)


def query_topn(db: DescriptorDatabase, q: np.ndarray, n: int) -> np.ndarray:
    """Ids by ascending L2 distance to ``q``, ties by ascending id."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(db) == 0:
        raise ValueError("database is empty")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (db.descriptors.shape[1],):
        raise ValueError(f"query dimension {q.shape} does not match database dimension {db.descriptors.shape[1]}")
    dist = np.linalg.norm(db.descriptors - q, axis=1)
    order = np.lexsort((db.ids, dist))
    return db.ids[order[:n]]


def rank_all(db: DescriptorDatabase, queries: np.ndarray) -> np.ndarray:
    """``[Q, M]`` full rankings (database ids) for each query."""
    return np.stack([query_topn(db, q, len(db)) for q in np.asarray(queries)])


def true_positive_matrix(
    query_positions: np.ndarray, db_positions: np.ndarray, radius: float = TRUE_POSITIVE_RADIUS
) -> np.ndarray:
    """``[Q, M]`` booleans: horizontal distance within ``radius``."""
    qp = np.asarray(query_positions, dtype=np.float64).reshape(-1, 2)
    dp = np.asarray(db_positions, dtype=np.float64).reshape(-1, 2)
    d = np.hypot(qp[:, None, 0] - dp[None, :, 0], qp[:, None, 1] - dp[None, :, 1])
    return d <= radius


@dataclass(frozen=True)
class RecallResult:
    recall: float
    hits: int
    evaluated: int
    excluded: int


def _rank_hits(rankings, db: DescriptorDatabase, query_positions, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Per query: is-true-positive flags along its ranking, and has-any-positive."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    tp = true_positive_matrix(query_positions, db.positions, radius)
    col = {int(i): j for j, i in enumerate(db.ids)}
    rankings = np.asarray(rankings)
    flags = np.zeros(rankings.shape, dtype=bool)
    for qi, row in enumerate(rankings):
        flags[qi] = tp[qi, [col[int(i)] for i in row]]
    return flags, tp.any(axis=1)


def recall_at_n(rankings, db: DescriptorDatabase, query_positions, n: int,
                radius: float = TRUE_POSITIVE_RADIUS) -> RecallResult:
    """Fraction of queries (with a reachable positive) whose top ``n`` contains one."""
    flags, reachable = _rank_hits(rankings, db, query_positions, radius)
    hits = int(np.sum(flags[:, :n].any(axis=1) & reachable))
    evaluated = int(reachable.sum())
    return RecallResult(hits / evaluated if evaluated else 0.0, hits, evaluated, int(len(reachable) - evaluated))


def one_percent_n(db_size: int) -> int:
    return max(1, math.ceil(db_size / 100))


@dataclass(frozen=True)
class MRRResult:
    mrr: float
    evaluated: int
    excluded: int


def mrr(rankings, db: DescriptorDatabase, query_positions, radius: float = TRUE_POSITIVE_RADIUS) -> MRRResult:
    """Mean of ``1 / rank`` of the first true positive; queries without one are excluded."""
    flags, _ = _rank_hits(rankings, db, query_positions, radius)
    return mrr_from_first_ranks([int(np.argmax(f)) + 1 if f.any() else None for f in flags])


def mrr_from_first_ranks(ranks: Sequence[int | None]) -> MRRResult:
    found = [r for r in ranks if r is not None]
    value = sum(1.0 / r for r in found) / len(found) if found else 0.0
    return MRRResult(value, len(found), len(ranks) - len(found))


def evaluate(db: DescriptorDatabase, queries: np.ndarray, query_positions, max_n: int = 25,
             radius: float = TRUE_POSITIVE_RADIUS) -> dict:
    """Report dict: AR@1, AR@1%, AR@N for N = 1..max_n, MRR and excluded queries."""
    rankings = rank_all(db, queries)
    flags, reachable = _rank_hits(rankings, db, query_positions, radius)
    evaluated = int(reachable.sum())
    curve = []
    for n in range(1, min(max_n, len(db)) + 1):
        hits = int(np.sum(flags[:, :n].any(axis=1) & reachable))
        curve.append({"n": n, "recall": hits / evaluated if evaluated else 0.0})
    one_pct = recall_at_n(rankings, db, query_positions, one_percent_n(len(db)), radius)
    m = mrr(rankings, db, query_positions, radius)
    return {
        "ar@1": curve[0]["recall"],
        "ar@1%": one_pct.recall,
        "ar@n": curve,
        "mrr": m.mrr,
        "queries": int(len(reachable)),
        "excluded": int(len(reachable) - evaluated),
    }
