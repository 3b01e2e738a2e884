"""Descriptor databases and place-recognition evaluation.

Map records are scored exhaustively against each query with a pairwise
scorer (normally the learned tail). A query is accepted when its best score
reaches the threshold; an accepted query is a true positive when the matched
map pose lies within ``gt_radius`` of the query pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from recnet.engine import Tensor, no_grad
from recnet.errors import ConfigError
from recnet.pointcloud_io import Pose

MAP_SECONDS = 170.0


@dataclass(frozen=True)
class DescriptorRecord:
    """One scan's bottleneck with its id, pose and timestamp (seconds)."""

    scan_id: int
    bottleneck: np.ndarray
    pose: Pose = Pose()
    timestamp: float = 0.0

    def __post_init__(self):
        b = np.array(self.bottleneck, dtype=np.float32, copy=True)
        if b.ndim != 2:
            raise ValueError(f"bottleneck must be 2-D, got shape {b.shape}")
        b.flags.writeable = False
        object.__setattr__(self, "bottleneck", b)


class DescriptorDB:
    """Map records in insertion order, all with the same bottleneck shape."""

    def __init__(self, records: Sequence[DescriptorRecord] = ()):
        self.records = list(records)
        ids = [r.scan_id for r in self.records]
        if len(set(ids)) != len(ids):
            seen, dup = set(), None
            for i in ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise ConfigError(f"duplicate scan_id {dup} in descriptor database")
        shapes = {r.bottleneck.shape for r in self.records}
        if len(shapes) > 1:
            raise ConfigError(f"mixed bottleneck shapes in database: {sorted(shapes)}")
        self.shape = shapes.pop() if shapes else None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def scan_ids(self) -> np.ndarray:
        return np.array([r.scan_id for r in self.records], dtype=np.int64)

    def translations(self) -> np.ndarray:
        return np.array([r.pose.translation for r in self.records]).reshape(-1, 3)

    def bottlenecks(self) -> np.ndarray:
        return np.stack([r.bottleneck for r in self.records]) if self.records else np.zeros((0, 0, 0), np.float32)


def build_db(records: Sequence[DescriptorRecord]) -> DescriptorDB:
    return DescriptorDB(records)


def split_map_queries(records: Sequence[DescriptorRecord], map_seconds: float = MAP_SECONDS):
    """Records within the first ``map_seconds`` of the sequence form the map; the rest are queries."""
    records = list(records)
    if not records:
        return DescriptorDB(), []
    t0 = min(r.timestamp for r in records)
    mapped = [r for r in records if r.timestamp - t0 < map_seconds]
    queries = [r for r in records if r.timestamp - t0 >= map_seconds]
    return DescriptorDB(mapped), queries


class Scorer(Protocol):
    def score(self, queries: Sequence[DescriptorRecord], db: DescriptorDB) -> np.ndarray:
        """``(len(queries), len(db))`` similarity matrix."""


class TailScorer:
    """Scores pairs with a model's tail (query as leg 1, map as leg 2)."""

    def __init__(self, model, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size

    def score(self, queries, db: DescriptorDB) -> np.ndarray:
        queries = list(queries)
        out = np.zeros((len(queries), len(db)), dtype=np.float64)
        if not queries or not len(db):
            return out
        mapb = db.bottlenecks()
        was_training = self.model.training
        self.model.eval()
        try:
            with no_grad():
                for qi, q in enumerate(queries):
                    for s in range(0, len(db), self.batch_size):
                        chunk = mapb[s : s + self.batch_size]
                        b1 = np.broadcast_to(q.bottleneck, chunk.shape)
                        out[qi, s : s + len(chunk)] = self.model.tail(Tensor(np.ascontiguousarray(b1)), Tensor(chunk)).data
        finally:
            if was_training:
                self.model.train()
        return out


class OracleScorer:
    """Ground-truth stand-in for the tail: ``exp(-d / m)`` from the poses."""

    def __init__(self, m: float = 10.0):
        self.m = m

    def score(self, queries, db: DescriptorDB) -> np.ndarray:
        q = np.array([r.pose.translation for r in queries]).reshape(-1, 3)
        d = np.linalg.norm(q[:, None, :] - db.translations()[None, :, :], axis=2)
        return np.exp(-d / self.m)


@dataclass(frozen=True)
class QueryResult:
    best_id: int
    score: float
    accepted: bool


def _best(scores: np.ndarray, ids: np.ndarray) -> int:
    """Column of the highest score; ties go to the lowest scan_id."""
    top = np.flatnonzero(scores == scores.max())
    return int(top[np.argmin(ids[top])])


def pairwise_score_matrix(db: DescriptorDB, queries: Sequence[DescriptorRecord], scorer: Scorer) -> np.ndarray:
    queries = list(queries)
    if db.shape is not None:
        for q in queries:
            if q.bottleneck.shape != db.shape:
                raise ConfigError(f"query {q.scan_id}: bottleneck shape {q.bottleneck.shape} != database {db.shape}")
    if not queries:
        return np.zeros((0, len(db)))
    return np.asarray(scorer.score(queries, db), dtype=np.float64)


def query(db: DescriptorDB, q: DescriptorRecord, scorer: Scorer, threshold: float = 0.75) -> QueryResult:
    """Best map match for one query and whether it clears ``threshold``."""
    if not len(db):
        raise ConfigError("cannot query an empty descriptor database")
    row = pairwise_score_matrix(db, [q], scorer)[0]
    col = _best(row, db.scan_ids)
    return QueryResult(int(db.scan_ids[col]), float(row[col]), bool(row[col] >= threshold))


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    accepted: np.ndarray
    true_positives: np.ndarray
    relevant: int

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.recall.tolist()))


def evaluate_pr(
    db: DescriptorDB,
    queries: Sequence[DescriptorRecord],
    scorer: Scorer,
    gt_radius: float = 3.0,
    thresholds: Sequence[float] = tuple(np.round(np.linspace(0.0, 1.0, 21), 10)),
) -> PRCurve:
    """Threshold-swept precision and recall of best-match retrieval.

    Relevant queries are those with at least one map record within
    ``gt_radius``. Precision with nothing accepted is reported as 1 and
    recall with no relevant query as 0.
    """
    queries = list(queries)
    if not len(db) or not queries:
        raise ConfigError("evaluate_pr needs a non-empty map and query set")
    ths = np.unique(np.asarray(thresholds, dtype=np.float64))
    scores = pairwise_score_matrix(db, queries, scorer)
    ids = db.scan_ids
    best = np.array([_best(row, ids) for row in scores])
    best_score = scores[np.arange(len(queries)), best]
    qpos = np.array([q.pose.translation for q in queries])
    mpos = db.translations()
    correct = np.linalg.norm(qpos - mpos[best], axis=1) <= gt_radius
    dist = np.linalg.norm(qpos[:, None, :] - mpos[None, :, :], axis=2)
    relevant = int(np.sum(np.any(dist <= gt_radius, axis=1)))
    accepted = best_score[None, :] >= ths[:, None]
    tp = np.sum(accepted & correct[None, :], axis=1)
    n_acc = np.sum(accepted, axis=1)
    precision = np.where(n_acc > 0, tp / np.maximum(n_acc, 1), 1.0)
    recall = tp / relevant if relevant else np.zeros(len(ths))
    return PRCurve(ths, precision, recall, n_acc, tp, relevant)


def write_pr_csv(curve: PRCurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall\n")
        for t, p, r in curve.rows():
            fh.write(f"{t!r},{p!r},{r!r}\n")
