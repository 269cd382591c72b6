"""SLIC supervoxels over a 4-channel volume.

Voxels are points in a 7-d space (4 intensities + 3 grid coordinates).
The clustering distance is

    D_s = sqrt(D_i**2 + (omega / lam)**2 * D_xyz**2)

with D_i the intensity distance and D_xyz the spatial distance, so large
``omega`` gives compact, grid-like supervoxels and small ``omega`` lets
them follow intensity edges.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from skimage.measure import label as label_components

from .volume import MultiModalVolume

SVX_MAGIC = b"SVX1"
# number of voxels in a full-size BraTS volume (240 x 240 x 155)
BRATS_VOXELS = 240 * 240 * 155
DEFAULT_K = 15000


class ParameterError(ValueError):
    pass


class EmptyGraphError(ValueError):
    pass


@dataclass
class SlicParams:
    k: int = DEFAULT_K
    omega: float = 1.0
    lam: float | None = None
    max_iters: int = 10
    tol: float | None = None
    enforce_connectivity: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError("k must be >= 1")
        if self.omega <= 0:
            raise ParameterError("omega must be > 0")
        if self.lam is not None and self.lam <= 0:
            raise ParameterError("lam must be > 0")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")
        if self.tol is not None and self.tol < 0:
            raise ParameterError("tol must be >= 0")

    def spacing_for(self, shape) -> float:
        if self.lam is not None:
            return float(self.lam)
        return (float(np.prod(shape)) / self.k) ** (1.0 / 3.0)

    def tol_for(self, shape) -> float:
        return 1e-4 * self.spacing_for(shape) if self.tol is None else self.tol


def scaled_k(n_voxels: int, k_full: int = DEFAULT_K) -> int:
    """Supervoxel count scaled from the full-size default to ``n_voxels``."""
    return max(1, int(round(k_full * n_voxels / BRATS_VOXELS)))


@dataclass
class SupervoxelLabeling:
    """Per-voxel cluster ids (``-1`` for unassigned voxels) and cluster stats.

    ``centroids`` rows are (t1, t1ce, t2, flair, x, y, z) means, with the
    spatial part in voxel index units along the array axes.
    """

    assignment: np.ndarray
    centroids: np.ndarray
    sizes: np.ndarray
    objective_trace: list[float] = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return len(self.sizes)

    @property
    def shape(self):
        return self.assignment.shape


def slic_distance(p, q, omega: float, lam: float) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    d_i2 = np.sum((p[:4] - q[:4]) ** 2)
    d_xyz2 = np.sum((p[4:7] - q[4:7]) ** 2)
    return float(np.sqrt(d_i2 + (omega / lam) ** 2 * d_xyz2))


def voxel_vectors(v: MultiModalVolume, mask: np.ndarray | None = None):
    """Return (intensities N x 4, positions N x 3, flat index grid) for masked voxels."""
    mask = v.brain_mask if mask is None else mask
    idx = np.nonzero(mask)
    feats = v.channels[:, mask].T.copy()
    pos = np.stack(idx, axis=1).astype(np.float64)
    index_grid = np.full(mask.shape, -1, dtype=np.int64)
    index_grid[mask] = np.arange(len(pos))
    return feats, pos, index_grid


def _gradient_magnitude(channels: np.ndarray) -> np.ndarray:
    g = np.zeros(channels.shape[1:])
    for ch in channels:
        for ax in range(3):
            fwd = np.roll(ch, -1, axis=ax)
            bwd = np.roll(ch, 1, axis=ax)
            # replicate border instead of wrapping
            sl_first = [slice(None)] * 3
            sl_last = [slice(None)] * 3
            sl_first[ax] = 0
            sl_last[ax] = -1
            bwd[tuple(sl_first)] = ch[tuple(sl_first)]
            fwd[tuple(sl_last)] = ch[tuple(sl_last)]
            g += np.abs(fwd - bwd)
    return g


def grid_seeds(shape, lam: float) -> np.ndarray:
    counts = [max(1, int(round(s / lam))) for s in shape]
    # cell centres in voxel-index coordinates (voxel i spans [i - 0.5, i + 0.5])
    axes = [np.clip(np.floor((np.arange(n) + 0.5) * s / n - 0.5), 0, s - 1).astype(np.int64)
            for n, s in zip(counts, shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _place_seeds(v: MultiModalVolume, lam: float) -> np.ndarray:
    mask = v.brain_mask
    seeds = grid_seeds(v.shape, lam)
    # snap seeds that fall outside the brain to the nearest brain voxel,
    # dropping those whose grid cell holds no brain at all
    dist, nearest = ndi.distance_transform_edt(~mask, return_indices=True)
    reach = lam * math.sqrt(3) / 2
    keep = []
    for s in seeds:
        s = tuple(s)
        if not mask[s]:
            if dist[s] > reach:
                continue
            s = tuple(int(nearest[a][s]) for a in range(3))
        keep.append(s)
    if not keep:
        keep = [tuple(int(nearest[a][tuple(seeds[0])]) for a in range(3))]
    grad = _gradient_magnitude(v.channels)
    offsets = [(0, 0, 0)] + [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1)
                             for c in (-1, 0, 1) if (a, b, c) != (0, 0, 0)]
    placed = []
    seen = set()
    for s in keep:
        best, best_g = s, math.inf
        for off in offsets:
            q = tuple(si + oi for si, oi in zip(s, off))
            if any(qi < 0 or qi >= n for qi, n in zip(q, v.shape)) or not mask[q]:
                continue
            if grad[q] < best_g:
                best, best_g = q, grad[q]
        if best not in seen:
            seen.add(best)
            placed.append(best)
    return np.array(placed, dtype=np.int64)


def _objective(feats, pos, labels, centroids, m2) -> float:
    c = centroids[labels]
    return float(np.sum((feats - c[:, :4]) ** 2) + m2 * np.sum((pos - c[:, 4:]) ** 2))


def _update_centroids(feats, pos, labels, old: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = len(old)
    sizes = np.bincount(labels, minlength=n)
    sums = np.empty((n, 7))
    for j in range(4):
        sums[:, j] = np.bincount(labels, weights=feats[:, j], minlength=n)
    for j in range(3):
        sums[:, 4 + j] = np.bincount(labels, weights=pos[:, j], minlength=n)
    new = old.copy()
    nz = sizes > 0
    new[nz] = sums[nz] / sizes[nz, None]
    return new, sizes


def _assign(feats, pos, index_grid, centroids, labels, m2, radius) -> tuple[np.ndarray, np.ndarray]:
    """Windowed nearest-centroid assignment.

    A voxel's current centroid is always a candidate, so the step never
    increases the objective even when that centroid drifted out of range.
    """
    shape = index_grid.shape
    n = len(feats)
    if labels is None:
        best = np.full(n, np.inf)
        labels = np.full(n, -1, dtype=np.int64)
    else:
        c = centroids[labels]
        best = np.sum((feats - c[:, :4]) ** 2, axis=1) + m2 * np.sum((pos - c[:, 4:]) ** 2, axis=1)
        labels = labels.copy()
    for ci, cen in enumerate(centroids):
        box = tuple(slice(max(0, int(math.floor(cen[4 + a] - radius))),
                          min(shape[a], int(math.ceil(cen[4 + a] + radius)) + 1))
                    for a in range(3))
        sub = index_grid[box]
        sel = sub[sub >= 0]
        if sel.size == 0:
            continue
        d = (np.sum((feats[sel] - cen[:4]) ** 2, axis=1)
             + m2 * np.sum((pos[sel] - cen[4:]) ** 2, axis=1))
        better = d < best[sel]
        idx = sel[better]
        best[idx] = d[better]
        labels[idx] = ci
    missing = labels < 0
    if missing.any():
        from scipy.spatial import cKDTree

        m = math.sqrt(m2)
        tree = cKDTree(np.hstack([centroids[:, :4], m * centroids[:, 4:]]))
        q = np.hstack([feats[missing], m * pos[missing]])
        dist, nearest = tree.query(q)
        labels[missing] = nearest
        best[missing] = dist ** 2
    return labels, best


def enforce_connectivity(assignment: np.ndarray) -> np.ndarray:
    """Split every cluster into 6-connected pieces and merge the stray ones.

    The largest piece of each cluster keeps the id. Every other piece joins
    the adjacent cluster with the most voxels; pieces with no neighbour
    become clusters of their own. Returned ids are compacted.
    """
    comp = label_components(assignment + 1, background=0, connectivity=1)
    n_comp = int(comp.max())
    if n_comp == 0:
        return assignment.copy()
    flat_comp = comp.ravel()
    flat_lab = assignment.ravel()
    inside = flat_comp > 0
    comp_cluster = np.zeros(n_comp + 1, dtype=np.int64)
    comp_cluster[flat_comp[inside]] = flat_lab[inside]
    comp_size = np.bincount(flat_comp, minlength=n_comp + 1)
    comp_size[0] = 0
    n_clusters = int(assignment.max()) + 1
    cluster_size = np.bincount(flat_lab[inside], minlength=n_clusters)

    # main piece per cluster: largest, lowest component id on ties
    order = np.lexsort((np.arange(n_comp + 1), -comp_size))
    main = np.full(n_clusters, -1, dtype=np.int64)
    for c in order:
        if c == 0:
            continue
        cl = comp_cluster[c]
        if main[cl] < 0:
            main[cl] = c
    is_main = np.zeros(n_comp + 1, dtype=bool)
    is_main[main[main >= 0]] = True
    if is_main[1:].all():
        return _compact(assignment)

    # face-adjacent component pairs
    pairs = []
    for ax in range(3):
        a = np.moveaxis(comp, ax, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        keep = (lo > 0) & (hi > 0) & (lo != hi)
        pairs.append(np.stack([lo[keep], hi[keep]], axis=1))
    pairs = np.concatenate(pairs)
    pairs = np.unique(np.concatenate([pairs, pairs[:, ::-1]]), axis=0)

    target = np.arange(n_comp + 1)
    orphan = ~is_main
    orphan[0] = False
    starts = np.searchsorted(pairs[:, 0], np.arange(n_comp + 2))
    for o in np.flatnonzero(orphan):
        nb = pairs[starts[o]:starts[o + 1], 1]
        if nb.size == 0:
            continue
        nb_cl = comp_cluster[nb]
        score = cluster_size[nb_cl]
        best = np.lexsort((nb_cl, -score))[0]
        target[o] = nb[best]
    src = np.arange(n_comp + 1)
    graph = sp.coo_matrix((np.ones(n_comp + 1), (src, target)),
                          shape=(n_comp + 1, n_comp + 1))
    _, group = connected_components(graph, directed=False)
    group_label = {}
    next_id = n_clusters
    for c in range(1, n_comp + 1):
        if is_main[c]:
            group_label[group[c]] = comp_cluster[c]
    comp_label = np.full(n_comp + 1, -1, dtype=np.int64)
    for c in range(1, n_comp + 1):
        g = group[c]
        if g not in group_label:
            group_label[g] = next_id
            next_id += 1
        comp_label[c] = group_label[g]
    out = comp_label[comp]
    out[comp == 0] = -1
    return _compact(out)


def _compact(assignment: np.ndarray) -> np.ndarray:
    out = np.full(assignment.shape, -1, dtype=np.int64)
    inside = assignment >= 0
    _, inv = np.unique(assignment[inside], return_inverse=True)
    out[inside] = inv
    return out


def labeling_from_assignment(assignment: np.ndarray, v: MultiModalVolume,
                             objective_trace=None) -> SupervoxelLabeling:
    """Recompute centroids and sizes for a given assignment grid."""
    mask = assignment >= 0
    feats, pos, _ = voxel_vectors(v, mask)
    labels = assignment[mask]
    n = int(labels.max()) + 1 if labels.size else 0
    centroids, sizes = _update_centroids(feats, pos, labels, np.zeros((n, 7)))
    return SupervoxelLabeling(assignment.astype(np.int64), centroids, sizes,
                              list(objective_trace or []))


def run_slic(v: MultiModalVolume, params: SlicParams) -> SupervoxelLabeling:
    """Cluster the in-brain voxels of ``v`` into roughly ``params.k`` supervoxels."""
    feats, pos, index_grid = voxel_vectors(v)
    n_vox = len(feats)
    if n_vox == 0:
        raise ParameterError("volume has no in-brain voxel")
    if params.k > n_vox:
        raise ParameterError(f"k={params.k} exceeds the {n_vox} in-brain voxels")
    lam = params.spacing_for(v.shape)
    m2 = (params.omega / lam) ** 2
    tol = params.tol_for(v.shape)
    radius = lam

    seeds = _place_seeds(v, lam)
    centroids = np.hstack([v.channels[:, seeds[:, 0], seeds[:, 1], seeds[:, 2]].T,
                           seeds.astype(np.float64)])
    labels = None
    trace: list[float] = []
    for _ in range(params.max_iters):
        labels, _ = _assign(feats, pos, index_grid, centroids, labels, m2, radius)
        trace.append(_objective(feats, pos, labels, centroids, m2))
        new, _ = _update_centroids(feats, pos, labels, centroids)
        trace.append(_objective(feats, pos, labels, new, m2))
        d = new - centroids
        moved = np.sqrt(np.sum(d[:, :4] ** 2, axis=1) + m2 * np.sum(d[:, 4:] ** 2, axis=1)).sum()
        centroids = new
        if moved < tol:
            break

    assignment = np.full(v.shape, -1, dtype=np.int64)
    assignment[v.brain_mask] = labels
    if params.enforce_connectivity:
        assignment = enforce_connectivity(assignment)
    else:
        assignment = _compact(assignment)
    return labeling_from_assignment(assignment, v, trace)


def remove_outliers(s: SupervoxelLabeling, v: MultiModalVolume) -> SupervoxelLabeling:
    """Drop clusters that are all-zero in every modality or lie outside the brain."""
    a = s.assignment
    inside = a >= 0
    labels = a[inside]
    n = s.n_clusters
    absval = np.zeros(n)
    for ch in v.channels:
        absval += np.bincount(labels, weights=np.abs(ch[inside]), minlength=n)
    in_brain = np.bincount(labels, weights=v.brain_mask[inside].astype(np.float64), minlength=n)
    keep = (absval > 0) & (in_brain > 0)
    if not keep.any():
        raise EmptyGraphError("every supervoxel was removed as an outlier")
    new_id = np.full(n, -1, dtype=np.int64)
    new_id[keep] = np.arange(int(keep.sum()))
    out = np.full(a.shape, -1, dtype=np.int64)
    out[inside] = new_id[labels]
    return SupervoxelLabeling(out, s.centroids[keep].copy(), s.sizes[keep].copy(),
                              list(s.objective_trace))


def components_per_cluster(assignment: np.ndarray) -> np.ndarray:
    """Number of 6-connected pieces of every cluster."""
    comp = label_components(assignment + 1, background=0, connectivity=1)
    inside = comp > 0
    pairs = np.unique(np.stack([assignment[inside], comp[inside]], axis=1), axis=0)
    return np.bincount(pairs[:, 0], minlength=int(assignment.max()) + 1)


# --------------------------------------------------------------------------
# SVX1 cache: magic, dims (3 x u32), cluster count (u32), u32 assignment
# grid (0xFFFFFFFF = unassigned), f64 centroid table (n x 7).


def write_labeling(path, s: SupervoxelLabeling) -> None:
    D, H, W = s.shape
    grid = np.where(s.assignment < 0, 0xFFFFFFFF, s.assignment).astype("<u4")
    with open(path, "wb") as fh:
        fh.write(SVX_MAGIC)
        fh.write(struct.pack("<4I", D, H, W, s.n_clusters))
        fh.write(grid.tobytes(order="C"))
        fh.write(np.asarray(s.centroids, dtype="<f8").tobytes(order="C"))


def read_labeling(path) -> SupervoxelLabeling:
    raw = Path(path).read_bytes()
    if raw[:4] != SVX_MAGIC:
        raise ValueError(f"{path}: not an SVX1 file")
    D, H, W, n = struct.unpack_from("<4I", raw, 4)
    off = 20
    grid = np.frombuffer(raw, dtype="<u4", count=D * H * W, offset=off).astype(np.int64)
    grid[grid == 0xFFFFFFFF] = -1
    off += 4 * D * H * W
    cents = np.frombuffer(raw, dtype="<f8", count=7 * n, offset=off).reshape(n, 7).copy()
    assignment = grid.reshape(D, H, W)
    sizes = np.bincount(assignment[assignment >= 0], minlength=n)
    return SupervoxelLabeling(assignment, cents, sizes)
