import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelgat.graph import (N_FEATURES, ContractError, Rag, attach_labels, build_adjacency,
                            build_rag, cluster_percentiles, extract_features, project_to_voxels,
                            read_rag, self_loop_edges, write_rag)
from voxelgat.supervoxel import SlicParams, labeling_from_assignment, run_slic
from voxelgat.volume import LabelVolume, MultiModalVolume

from conftest import naive_percentile


def labeling(assignment, channels=None):
    assignment = np.asarray(assignment, dtype=np.int64)
    if channels is None:
        channels = np.ones((4,) + assignment.shape)
    v = MultiModalVolume(channels, brain_mask=assignment >= 0)
    return labeling_from_assignment(assignment, v), v


def test_constant_cluster_features():
    s, v = labeling(np.zeros((3, 3, 3)), np.full((4, 3, 3, 3), 0.7))
    f = extract_features(s, v)
    assert f.shape == (1, N_FEATURES) and np.all(f == 0.7)


def test_features_of_one_to_hundred():
    vals = np.arange(1, 101, dtype=float).reshape(4, 5, 5)
    s, v = labeling(np.zeros((4, 5, 5)), np.stack([vals] * 4))
    f = extract_features(s, v)[0]
    expected = [10.9, 25.75, 50.5, 75.25, 90.1]
    assert np.allclose(f[:5], expected, atol=1e-12)
    assert np.allclose(f.reshape(4, 5), [expected] * 4, atol=1e-12)


def test_features_are_modality_major(rng):
    ch = np.stack([np.full((2, 2, 2), float(c)) for c in range(4)])
    s, v = labeling(np.zeros((2, 2, 2)), ch)
    assert extract_features(s, v)[0].tolist() == [c for c in range(4) for _ in range(5)]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 200), st.integers(0, 2**31 - 1))
def test_percentiles_match_naive_oracle(n, m, seed):
    r = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(n), r.integers(0, n, m)])
    values = r.normal(size=len(labels))
    got = cluster_percentiles(values, labels, n)
    for c in range(n):
        ref = [naive_percentile(values[labels == c], q) for q in (10, 25, 50, 75, 90)]
        assert np.allclose(got[c], ref, atol=1e-12, rtol=0)
        assert np.all(np.diff(got[c]) >= 0)


def test_single_cluster_has_no_edges():
    assert len(build_adjacency(np.zeros((4, 4, 4), dtype=np.int64))) == 0


def test_two_halves_one_edge():
    a = np.zeros((4, 4, 4), dtype=np.int64)
    a[2:] = 1
    assert build_adjacency(a).tolist() == [[0, 1]]


def brute_adjacency(a):
    pairs = set()
    for p in itertools.product(*[range(s) for s in a.shape]):
        for ax in range(3):
            q = list(p)
            q[ax] += 1
            if q[ax] >= a.shape[ax]:
                continue
            x, y = a[p], a[tuple(q)]
            if x >= 0 and y >= 0 and x != y:
                pairs.add((min(x, y), max(x, y)))
    return sorted(pairs)


def test_two_by_two_grid_four_edges():
    a = np.array([[0, 1], [2, 3]]).repeat(2, 0).repeat(2, 1)[:, :, None]
    a = np.repeat(a, 3, axis=2)
    got = build_adjacency(a)
    assert len(got) == 4
    assert [tuple(e) for e in got.tolist()] == brute_adjacency(a)


def test_adjacency_matches_brute_force(rng):
    for _ in range(10):
        a = rng.integers(-1, 6, (5, 4, 6))
        assert [tuple(e) for e in build_adjacency(a).tolist()] == brute_adjacency(a)


def test_self_loop_edges_symmetric():
    src, dst = self_loop_edges(3, np.array([[0, 1], [1, 2]]))
    directed = set(zip(src.tolist(), dst.tolist()))
    assert directed == {(0, 1), (1, 0), (1, 2), (2, 1), (0, 0), (1, 1), (2, 2)}


def test_majority_label_and_ties():
    a = np.zeros((1, 1, 10), dtype=np.int64)
    gt = np.array([0] * 6 + [2] * 4, dtype=np.uint8).reshape(1, 1, 10)
    s, _ = labeling(a)
    assert attach_labels(s, LabelVolume(gt)).tolist() == [0]
    gt_tie = np.array([1] * 5 + [3] * 5, dtype=np.uint8).reshape(1, 1, 10)
    assert attach_labels(s, LabelVolume(gt_tie)).tolist() == [1]


def test_label_projection_round_trip(rng):
    a = np.arange(8).reshape(2, 2, 2).repeat(2, 0).repeat(2, 1).repeat(2, 2)
    s, _ = labeling(a)
    node = rng.integers(0, 4, 8)
    gt = project_to_voxels(s, node)
    assert np.array_equal(attach_labels(s, gt), node)


def test_rag_round_trip(tmp_path, rng):
    ch = rng.normal(size=(4, 12, 12, 12))
    v = MultiModalVolume(ch)
    s = run_slic(v, SlicParams(k=20))
    gt = LabelVolume(rng.integers(0, 4, (12, 12, 12)))
    g = build_rag(s, v, gt)
    write_rag(tmp_path / "g.rag", g)
    assert (tmp_path / "g.rag").read_bytes()[:4] == b"RAG1"
    back = read_rag(tmp_path / "g.rag")
    assert back.features.tobytes() == g.features.tobytes()
    assert np.array_equal(back.edges, g.edges)
    assert np.array_equal(back.labels, g.labels)
    assert np.array_equal(back.node_to_cluster, g.node_to_cluster)
    assert g.features.shape == (s.n_clusters, 20)


def test_label_length_mismatch():
    with pytest.raises(ContractError):
        Rag(np.zeros((3, 20)), np.array([[0, 1]]), labels=[0, 1])


def test_reversed_edge_rejected():
    with pytest.raises(ContractError):
        Rag(np.zeros((3, 20)), np.array([[1, 0]]))
