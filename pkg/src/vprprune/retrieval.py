"""The map: descriptor database, exact matching, recall@k and resource accounting."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

MIB = 2**20
BYTES_PER_VALUE = 4


@dataclass
class EmbeddingMap:
    descriptors: np.ndarray  # (N, D) float32, unit rows
    place_ids: np.ndarray

    def __post_init__(self):
        self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 2 or len(self.descriptors) == 0:
            raise ValueError("map needs at least one descriptor row")
        if len(self.place_ids) != len(self.descriptors):
            raise ValueError("one place id per map row")
        norms = np.linalg.norm(self.descriptors.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise ValueError("map rows must be l2-normalized")

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self) -> int:
        return len(self.descriptors)


@dataclass
class ResourceReport:
    round: int
    backbone_sparsity: float
    agg_sparsity: float
    descriptor_dim: int
    param_count: int
    model_mib: float
    map_mib: float
    extract_ms: float
    match_ms: float
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float

    def as_row(self) -> dict:
        return asdict(self)


def build_map(model, images: np.ndarray, place_ids) -> EmbeddingMap:
    if len(images) == 0:
        raise ValueError("empty database")
    return EmbeddingMap(model.embed(images), np.asarray(place_ids))


def match(emap: EmbeddingMap, query, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k by inner product, descending; ties keep the lower index."""
    q = np.asarray(query, dtype=np.float32).reshape(-1)
    if q.shape[0] != emap.dim:
        raise ValueError(f"query dim {q.shape[0]} != map dim {emap.dim}")
    if not 1 <= k <= len(emap):
        raise ValueError(f"k={k} outside 1..{len(emap)}")
    sims = emap.descriptors @ q
    if k < len(sims):
        # partition then stable-sort the candidates; boundary ties resolved by index
        kth = np.partition(-sims, k - 1)[k - 1]
        cand = np.flatnonzero(-sims <= kth)
    else:
        cand = np.arange(len(sims))
    order = cand[np.lexsort((cand, -sims[cand]))][:k]
    return order, sims[order]


def recall_at_k(emap: EmbeddingMap, queries: np.ndarray, query_places, k: int) -> float:
    q = np.asarray(queries, dtype=np.float32)
    hits = 0
    for desc, place in zip(q, query_places):
        idx, _ = match(emap, desc, min(k, len(emap)))
        hits += bool(np.any(emap.place_ids[idx] == place))
    return hits / len(q)


def recalls(emap: EmbeddingMap, queries, query_places, ks=(1, 5, 10)) -> dict[int, float]:
    """recall@k for several k from one similarity matrix."""
    q = np.asarray(queries, dtype=np.float32)
    sims = q @ emap.descriptors.T
    n = sims.shape[1]
    order = np.lexsort((np.broadcast_to(np.arange(n), sims.shape), -sims), axis=1)
    correct = emap.place_ids[order] == np.asarray(query_places)[:, None]
    return {k: float(np.mean(correct[:, : min(k, n)].any(axis=1))) for k in ks}


def model_memory_bytes(model) -> int:
    if model is None:
        return 0
    return int(model.param_count) * BYTES_PER_VALUE


def map_memory_bytes(emap_or_n, dim: int | None = None) -> int:
    if dim is None:
        n, dim = emap_or_n.descriptors.shape
    else:
        n = emap_or_n
    return int(n) * int(dim) * BYTES_PER_VALUE


def to_mib(nbytes: int) -> float:
    return nbytes / MIB


@dataclass
class LatencyStats:
    median_ms: float
    p95_ms: float
    trials: int


def measure_latency(fn, warmup: int = 10, trials: int = 50) -> LatencyStats:
    if trials < 1:
        raise ValueError("need at least one timed trial")
    for _ in range(warmup):
        fn()
    times = np.empty(trials)
    for i in range(trials):
        t0 = time.perf_counter()
        fn()
        times[i] = (time.perf_counter() - t0) * 1e3
    return LatencyStats(float(np.median(times)), float(np.percentile(times, 95)), trials)


CSV_COLUMNS = (
    "round", "backbone_sparsity", "agg_sparsity", "descriptor_dim", "param_count", "model_mib",
    "map_mib", "extract_ms", "match_ms", "recall_at_1", "recall_at_5", "recall_at_10",
)
NONDETERMINISTIC_COLUMNS = ("extract_ms", "match_ms")
CSV_HEADER_NOTE = "# extract_ms, match_ms: environment-dependent wall-clock medians; all other columns are reproducible"


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else f"{float(v):.10g}"


def write_reports_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER_NOTE + "\n")
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in reports:
            row = r.as_row()
            fh.write(",".join(_fmt(row[c]) for c in CSV_COLUMNS) + "\n")


def read_reports_csv(path) -> list[ResourceReport]:
    import csv

    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        out.append(ResourceReport(**{
            c: int(row[c]) if c in ("round", "descriptor_dim", "param_count") else float(row[c])
            for c in CSV_COLUMNS
        }))
    return out
