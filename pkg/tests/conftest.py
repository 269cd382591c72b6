import numpy as np
import pytest

from voxelgat.graph import Rag

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def random_graph(rng, n, extra_edges=None, feat_scale=2.0):
    """Connected random graph: a random spanning tree plus extra edges."""
    pairs = set()
    perm = rng.permutation(n)
    for i in range(1, n):
        a, b = perm[i], perm[rng.integers(0, i)]
        pairs.add((min(a, b), max(a, b)))
    extra = n if extra_edges is None else extra_edges
    for _ in range(extra):
        a, b = rng.integers(0, n, 2)
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    x = rng.uniform(-feat_scale, feat_scale, (n, 20))
    y = rng.integers(0, 4, n)
    return Rag(x, edges, y)


def central_difference(f, arr: np.ndarray, step=1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` wrt ``arr`` (mutated in place, then restored)."""
    out = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + step
        hi = f()
        arr[i] = orig - step
        lo = f()
        arr[i] = orig
        out[i] = (hi - lo) / (2 * step)
    return out


def rel_err(analytic, numeric) -> float:
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def naive_percentile(values, q):
    """Sort-and-interpolate percentile (linear between order statistics)."""
    s = sorted(float(v) for v in values)
    pos = q / 100 * (len(s) - 1)
    lo = int(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def brute_hd95(pred, gt, spacing=(1.0, 1.0, 1.0)):
    p = np.argwhere(pred) * np.asarray(spacing)
    g = np.argwhere(gt) * np.asarray(spacing)
    if len(p) == 0 and len(g) == 0:
        return 0.0
    if len(p) == 0 or len(g) == 0:
        return float("nan")
    d = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return naive_percentile(pooled, 95)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion():
    def _record(name, ok, detail=""):
        ACCEPTANCE_RESULTS[name] = (bool(ok), detail)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE_RESULTS.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
