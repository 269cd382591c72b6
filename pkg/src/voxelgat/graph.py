"""Region adjacency graph built from a supervoxel labeling."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .supervoxel import SupervoxelLabeling
from .volume import N_CLASSES, LabelVolume, MultiModalVolume

PERCENTILES = (10.0, 25.0, 50.0, 75.0, 90.0)
N_FEATURES = 4 * len(PERCENTILES)
RAG_MAGIC = b"RAG1"
CLASS_NAMES = ("background", "necrosis", "edema", "enhancing")


class ContractError(ValueError):
    pass


@dataclass
class Rag:
    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray | None = None
    node_to_cluster: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] != N_FEATURES:
            raise ContractError(f"features must be n x {N_FEATURES}, got {self.features.shape}")
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = self.n_nodes
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise ContractError("edge endpoint out of range")
            if np.any(self.edges[:, 0] >= self.edges[:, 1]):
                raise ContractError("edges must be stored once as (a, b) with a < b")
            if len(np.unique(self.edges, axis=0)) != len(self.edges):
                raise ContractError("duplicate edge")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (n,):
                raise ContractError("labels length differs from node count")
        if self.node_to_cluster is None:
            self.node_to_cluster = np.arange(n)
        self.node_to_cluster = np.asarray(self.node_to_cluster, dtype=np.int64)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]


def cluster_percentiles(values: np.ndarray, labels: np.ndarray, n: int,
                        qs=PERCENTILES) -> np.ndarray:
    """Linear-interpolation percentiles of ``values`` grouped by ``labels``.

    Returns an ``n x len(qs)`` array. Every group must be non-empty.
    """
    sizes = np.bincount(labels, minlength=n)
    if np.any(sizes == 0):
        raise ContractError(f"cluster {int(np.flatnonzero(sizes == 0)[0])} is empty")
    order = np.lexsort((values, labels))
    sv = values[order]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    out = np.empty((n, len(qs)))
    for j, q in enumerate(qs):
        pos = (q / 100.0) * (sizes - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, sizes - 1)
        frac = pos - lo
        a = sv[starts + lo]
        b = sv[starts + hi]
        out[:, j] = a + (b - a) * frac
    return out


def extract_features(s: SupervoxelLabeling, v: MultiModalVolume) -> np.ndarray:
    """Per-cluster 10/25/50/75/90th percentiles of each modality, modality-major."""
    inside = s.assignment >= 0
    labels = s.assignment[inside]
    blocks = [cluster_percentiles(ch[inside], labels, s.n_clusters) for ch in v.channels]
    return np.hstack(blocks)


def build_adjacency(assignment: np.ndarray) -> np.ndarray:
    """Undirected face-adjacency pairs ``(a, b)``, ``a < b``, sorted and unique."""
    pairs = []
    for ax in range(assignment.ndim):
        a = np.moveaxis(assignment, ax, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        keep = (lo >= 0) & (hi >= 0) & (lo != hi)
        p = np.stack([lo[keep], hi[keep]], axis=1)
        pairs.append(np.sort(p, axis=1))
    pairs = np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=np.int64)
    if len(pairs) == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.unique(pairs, axis=0).astype(np.int64)


def attach_labels(s: SupervoxelLabeling, gt: LabelVolume) -> np.ndarray:
    """Majority ground-truth class per cluster; ties go to the smaller class id."""
    if gt.shape != s.shape:
        raise ContractError(f"label shape {gt.shape} != labeling shape {s.shape}")
    inside = s.assignment >= 0
    idx = s.assignment[inside] * N_CLASSES + gt.labels[inside].astype(np.int64)
    counts = np.bincount(idx, minlength=s.n_clusters * N_CLASSES).reshape(-1, N_CLASSES)
    return counts.argmax(axis=1)


def project_to_voxels(s: SupervoxelLabeling, node_labels, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    node_labels = np.asarray(node_labels, dtype=np.int64)
    if node_labels.shape != (s.n_clusters,):
        raise ContractError(f"expected {s.n_clusters} node labels, got {node_labels.shape}")
    out = np.zeros(s.shape, dtype=np.uint8)
    inside = s.assignment >= 0
    out[inside] = node_labels[s.assignment[inside]]
    return LabelVolume(out, spacing)


def build_rag(s: SupervoxelLabeling, v: MultiModalVolume, gt: LabelVolume | None = None) -> Rag:
    labels = attach_labels(s, gt) if gt is not None else None
    return Rag(extract_features(s, v), build_adjacency(s.assignment), labels,
               np.arange(s.n_clusters))


def self_loop_edges(n: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Directed (src, dst) arrays: both directions of every edge plus a self-loop per node."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    loops = np.arange(n, dtype=np.int64)
    src = np.concatenate([edges[:, 0], edges[:, 1], loops])
    dst = np.concatenate([edges[:, 1], edges[:, 0], loops])
    return src, dst


def class_counts(labels: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=N_CLASSES)


def write_node_counts_csv(path, rows: list[tuple[str, np.ndarray, np.ndarray | None]]) -> None:
    """One row per (case, class): ground-truth and predicted node counts."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "class", "label_nodes", "predicted_nodes"])
        for case, gt, pred in rows:
            gtc = class_counts(gt) if gt is not None else None
            pc = class_counts(pred) if pred is not None else None
            for c in range(1, N_CLASSES):
                w.writerow([case, CLASS_NAMES[c],
                            "" if gtc is None else int(gtc[c]),
                            "" if pc is None else int(pc[c])])


# --------------------------------------------------------------------------
# RAG1 cache: magic, node count (u32), edge count (u32), label flag (u8),
# f64 features (n x 20), u32 edge pairs (E x 2), u8 labels (if flagged),
# u32 node -> cluster map.


def write_rag(path, g: Rag) -> None:
    n, e = g.n_nodes, len(g.edges)
    with open(path, "wb") as fh:
        fh.write(RAG_MAGIC)
        fh.write(struct.pack("<IIB", n, e, 0 if g.labels is None else 1))
        fh.write(g.features.astype("<f8").tobytes())
        fh.write(g.edges.astype("<u4").tobytes())
        if g.labels is not None:
            fh.write(g.labels.astype(np.uint8).tobytes())
        fh.write(g.node_to_cluster.astype("<u4").tobytes())


def read_rag(path) -> Rag:
    raw = Path(path).read_bytes()
    if raw[:4] != RAG_MAGIC:
        raise ValueError(f"{path}: not a RAG1 file")
    n, e, has_labels = struct.unpack_from("<IIB", raw, 4)
    off = 13
    feats = np.frombuffer(raw, "<f8", n * N_FEATURES, off).reshape(n, N_FEATURES).copy()
    off += 8 * n * N_FEATURES
    edges = np.frombuffer(raw, "<u4", 2 * e, off).reshape(e, 2).astype(np.int64)
    off += 8 * e
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, np.uint8, n, off).astype(np.int64)
        off += n
    n2c = np.frombuffer(raw, "<u4", n, off).astype(np.int64)
    return Rag(feats, edges, labels, n2c)
