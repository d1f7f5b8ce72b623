"""
Exact nearest-exemplar retrieval over global views.

Queries never return entries of the query's own patient. Results are the
exact k nearest by the chosen metric, ties broken by the smaller window id.
"""
import dataclasses
import logging
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import write_atomic
from .config import METRICS
from .data import DatasetBundle
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    InsufficientExemplarsError,
)
from .extractor import ExtractorModel

__all__ = (
    "IndexEntry",
    "ExemplarSet",
    "ExemplarIndex",
    "distance",
    "build_index",
)

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"EGNI"
INDEX_VERSION = 1
BLOCK_SIZE = 4096


def _distances(matrix: np.ndarray, query: np.ndarray, metric: str) -> np.ndarray:
    """
    Distance of every row of `matrix` to `query`. Row results don't depend on
    the other rows, so a block gives the same values as single rows.
    """
    if metric == "l2":
        diff = matrix - query
        return np.sqrt(np.sum(diff * diff, axis=1))
    if metric == "l1":
        return np.sum(np.abs(matrix - query), axis=1)
    if metric == "cosine":
        query_norm = np.sqrt(np.sum(query * query))
        if query_norm == 0:
            raise DegenerateInputError("Cosine distance is undefined for a zero query.")
        row_norms = np.sqrt(np.sum(matrix * matrix, axis=1))
        # Zero rows come out as nan and sort after every real distance.
        with np.errstate(divide="ignore", invalid="ignore"):
            similarity = np.sum(matrix * query, axis=1) / (row_norms * query_norm)
        return np.maximum(1.0 - similarity, 0.0)
    raise ConfigError([f"Unknown metric {metric!r}; expected one of {METRICS!r}."])


def distance(a: np.ndarray, b: np.ndarray, metric: str) -> float:
    """
    l2: Euclidean norm of the difference. l1: sum of absolute differences.
    cosine: ``1 - a.b / (|a| |b|)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"Cannot compare shapes {a.shape} and {b.shape}.")
    if metric == "cosine" and not b.any():
        raise DegenerateInputError("Cosine distance is undefined for a zero vector.")
    return float(_distances(b[None, :], a, metric)[0])


@dataclass
class IndexEntry:
    window_id: int
    patient_id: int
    global_view: np.ndarray
    expression: np.ndarray


@dataclass
class ExemplarSet:
    """
    The k nearest cross-patient entries for one query, nearest first.
    """

    query_window_id: Optional[int]
    window_ids: np.ndarray
    patient_ids: np.ndarray
    distances: np.ndarray
    views: np.ndarray
    expressions: np.ndarray

    def __len__(self) -> int:
        return len(self.window_ids)

    @property
    def entries(self) -> List[IndexEntry]:
        return [
            IndexEntry(int(w), int(p), v, y)
            for w, p, v, y in zip(self.window_ids, self.patient_ids, self.views, self.expressions)
        ]


@dataclass
class ExemplarIndex:
    """
    :param views: (N, D) global views e_j.
    :param expressions: (N, M) normalized expressions y_j.
    """

    window_ids: np.ndarray
    patient_ids: np.ndarray
    views: np.ndarray
    expressions: np.ndarray

    def __post_init__(self) -> None:
        self.window_ids = np.asarray(self.window_ids, dtype=np.int64)
        self.patient_ids = np.asarray(self.patient_ids, dtype=np.int64)
        self.views = np.asarray(self.views, dtype=np.float64)
        self.expressions = np.asarray(self.expressions, dtype=np.float64)
        n = len(self.window_ids)
        if self.views.ndim != 2 or self.expressions.ndim != 2:
            raise DimensionError("Views and expressions must be matrices.")
        if not (len(self.patient_ids) == len(self.views) == len(self.expressions) == n):
            raise DimensionError(
                f"Index columns disagree in length: {n} ids, {len(self.patient_ids)} patients, "
                f"{len(self.views)} views, {len(self.expressions)} expressions."
            )

    def __len__(self) -> int:
        return len(self.window_ids)

    @property
    def style_dim(self) -> int:
        return int(self.views.shape[1])

    @property
    def num_genes(self) -> int:
        return int(self.expressions.shape[1])

    def entry(self, position: int) -> IndexEntry:
        return IndexEntry(
            int(self.window_ids[position]),
            int(self.patient_ids[position]),
            self.views[position],
            self.expressions[position],
        )

    def subset(self, window_ids: Sequence[int]) -> "ExemplarIndex":
        "Entries for `window_ids`, in that order."
        lookup = {int(w): i for i, w in enumerate(self.window_ids)}
        try:
            rows = np.array([lookup[int(w)] for w in window_ids], dtype=np.int64)
        except KeyError as e:
            raise DimensionError(f"Window {e.args[0]!r} is not in the index.")
        return ExemplarIndex(
            self.window_ids[rows], self.patient_ids[rows], self.views[rows], self.expressions[rows]
        )

    def with_expressions(self, expressions: np.ndarray) -> "ExemplarIndex":
        return dataclasses.replace(self, expressions=expressions)

    def query(
        self,
        view: np.ndarray,
        patient_id: int,
        k: int,
        metric: str = "l2",
        query_window_id: Optional[int] = None,
    ) -> ExemplarSet:
        """
        Exact k nearest entries of other patients. The query window itself is
        excluded as well (it shares the patient anyway).
        """
        view = np.asarray(view, dtype=np.float64)
        if view.shape != (self.style_dim,):
            raise DimensionError(
                f"Query view has shape {view.shape}, the index holds {self.style_dim}-vectors."
            )
        if k < 1:
            raise ConfigError([f"k must be >= 1, got {k!r}."])

        eligible = self.patient_ids != patient_id
        if query_window_id is not None:
            eligible &= self.window_ids != query_window_id
        candidates = np.flatnonzero(eligible)
        if len(candidates) < k:
            raise InsufficientExemplarsError(len(candidates), k)

        distances = np.empty(len(candidates))
        for start in range(0, len(candidates), BLOCK_SIZE):
            block = candidates[start : start + BLOCK_SIZE]
            distances[start : start + len(block)] = _distances(self.views[block], view, metric)

        order = np.lexsort((self.window_ids[candidates], distances))[:k]
        rows = candidates[order]
        return ExemplarSet(
            query_window_id=query_window_id,
            window_ids=self.window_ids[rows],
            patient_ids=self.patient_ids[rows],
            distances=distances[order],
            views=self.views[rows],
            expressions=self.expressions[rows],
        )

    def retrieve_all(
        self,
        views: np.ndarray,
        patient_ids: Sequence[int],
        k: int,
        metric: str = "l2",
        window_ids: Optional[Sequence[int]] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        Query many windows. Returns (positions into this index, distances),
        both of shape (Q, k).
        """
        lookup = {int(w): i for i, w in enumerate(self.window_ids)}
        positions = np.empty((len(views), k), dtype=np.int64)
        distances = np.empty((len(views), k))
        for q, (view, patient) in enumerate(zip(views, patient_ids)):
            window_id = None if window_ids is None else int(window_ids[q])
            result = self.query(view, int(patient), k, metric, query_window_id=window_id)
            positions[q] = [lookup[int(w)] for w in result.window_ids]
            distances[q] = result.distances
        return positions, distances

    def to_bytes(self) -> bytes:
        n, d = self.views.shape
        m = self.num_genes
        parts = [INDEX_MAGIC, struct.pack("<I3Q", INDEX_VERSION, d, m, n)]
        for i in range(n):
            parts.append(struct.pack("<2Q", int(self.window_ids[i]), int(self.patient_ids[i])))
            parts.append(np.ascontiguousarray(self.views[i], dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(self.expressions[i], dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, path: str = "<bytes>") -> "ExemplarIndex":
        header = 4 + struct.calcsize("<I3Q")
        if len(data) < header or data[:4] != INDEX_MAGIC:
            raise CheckpointError(f"{path!r} is not an EGNI index.")
        version, d, m, n = struct.unpack("<I3Q", data[4:header])
        if version != INDEX_VERSION:
            raise CheckpointError(f"{path!r}: unsupported index version {version}.")
        record = 16 + 8 * (d + m)
        if len(data) != header + n * record:
            raise CheckpointError(f"{path!r} is truncated or has trailing bytes.")

        window_ids = np.empty(n, dtype=np.int64)
        patient_ids = np.empty(n, dtype=np.int64)
        views = np.empty((n, d))
        expressions = np.empty((n, m))
        for i in range(n):
            offset = header + i * record
            window_ids[i], patient_ids[i] = struct.unpack("<2Q", data[offset : offset + 16])
            values = np.frombuffer(data, dtype="<f8", count=d + m, offset=offset + 16)
            views[i] = values[:d]
            expressions[i] = values[d:]
        return cls(window_ids, patient_ids, views, expressions)

    def save(self, path: str) -> None:
        write_atomic(path, self.to_bytes())
        logger.info("Wrote index of %d entries to %s", len(self), path)

    @classmethod
    def load(cls, path: str) -> "ExemplarIndex":
        try:
            with open(path, "rb") as f:
                data = f.read()
        except FileNotFoundError:
            raise CheckpointError(f"No such index: {path!r}.")
        return cls.from_bytes(data, path)


def build_index(
    bundle: DatasetBundle, extractor: ExtractorModel, expressions: np.ndarray
) -> ExemplarIndex:
    """
    One entry per window of `bundle`, holding its global view and its
    normalized expression.
    """
    if bundle.image_size != extractor.image_size:
        raise DimensionError(
            f"Bundle windows are {bundle.image_size}px, the extractor expects {extractor.image_size}px."
        )
    expressions = np.asarray(expressions, dtype=np.float64)
    if expressions.shape != (len(bundle), bundle.num_genes):
        raise DimensionError(
            f"Expressions have shape {expressions.shape}, expected {(len(bundle), bundle.num_genes)}."
        )
    views = extractor.encode_batch(bundle.windows)
    zero = np.flatnonzero(~views.any(axis=1))
    if len(zero):
        window_id = int(bundle.window_ids[zero[0]])
        logger.error("%d windows have an all-zero global view", len(zero))
        raise DegenerateInputError(
            f"Window {window_id} has an all-zero global view; cosine retrieval is undefined for it."
        )
    logger.info(
        "Built index: %d entries, D=%d, M=%d", len(bundle), views.shape[1], bundle.num_genes
    )
    return ExemplarIndex(bundle.window_ids, bundle.patient_ids, views, expressions)
