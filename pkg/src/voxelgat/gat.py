"""Multi-head graph attention network for node classification."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .graph import N_FEATURES, Rag, self_loop_edges
from .tensor import Tensor
from .volume import N_CLASSES

CKPT_MAGIC = b"GATC"
CKPT_VERSION = 1


class NumericFailure(FloatingPointError):
    def __init__(self, layer: int, what: str = "output"):
        super().__init__(f"non-finite values in layer {layer} {what}")
        self.layer = layer


def leaky(x: np.ndarray, eta: float) -> np.ndarray:
    return np.where(x >= 0, x, eta * x)


def edge_logit(W: np.ndarray, a: np.ndarray, h_p, h_q, eta: float = 0.2) -> float:
    """Attention logit of neighbour q for node p in a single head.

    ``W`` is the head's ``f' x f`` weight and ``a`` its length ``2 f'``
    attention vector; the first half of ``a`` scores the receiving node.
    """
    z_p = W @ np.asarray(h_p, dtype=np.float64)
    z_q = W @ np.asarray(h_q, dtype=np.float64)
    return float(leaky(np.dot(a, np.concatenate([z_p, z_q])), eta))


class GatConv:
    """One attention layer with ``heads`` independent heads.

    Hidden layers apply LeakyReLU per head and concatenate the heads;
    the output layer averages the heads and leaves activation to the
    caller.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int, concat: bool = True,
                 eta: float = 0.2, rng: np.random.Generator | None = None):
        if not 0 < eta < 1:
            raise ValueError("eta must be in (0, 1)")
        self.in_dim, self.out_dim, self.heads = in_dim, out_dim, heads
        self.concat, self.eta = concat, eta
        rng = np.random.default_rng(0) if rng is None else rng
        lim_w = np.sqrt(6.0 / (in_dim + out_dim))
        lim_a = np.sqrt(6.0 / (2 * out_dim + 1))
        # column block k holds head k's weight, transposed
        self.W = Tensor(rng.uniform(-lim_w, lim_w, (in_dim, heads * out_dim)), requires_grad=True)
        self.att_dst = Tensor(rng.uniform(-lim_a, lim_a, (heads, out_dim)), requires_grad=True)
        self.att_src = Tensor(rng.uniform(-lim_a, lim_a, (heads, out_dim)), requires_grad=True)

    @property
    def out_width(self) -> int:
        return self.heads * self.out_dim if self.concat else self.out_dim

    def parameters(self) -> list[Tensor]:
        return [self.W, self.att_dst, self.att_src]

    def n_params(self) -> int:
        return self.heads * (self.out_dim * self.in_dim + 2 * self.out_dim)

    def head_weight(self, k: int) -> np.ndarray:
        f = self.out_dim
        return self.W.data[:, k * f:(k + 1) * f].T

    def attention_vector(self, k: int) -> np.ndarray:
        return np.concatenate([self.att_dst.data[k], self.att_src.data[k]])

    def attention(self, h: Tensor, src, dst) -> tuple[Tensor, Tensor]:
        """Return (per-edge attention weights E x K, transformed features n x K x f')."""
        n = h.shape[0]
        z = T.reshape(T.matmul(h, self.W), (n, self.heads, self.out_dim))
        s_dst = T.tsum(T.mul(z, T.reshape(self.att_dst, (1, self.heads, self.out_dim))), axis=2)
        s_src = T.tsum(T.mul(z, T.reshape(self.att_src, (1, self.heads, self.out_dim))), axis=2)
        e = T.leaky_relu(T.add(T.gather(s_dst, dst), T.gather(s_src, src)), self.eta)
        return T.segment_softmax(e, dst, n), z

    def __call__(self, h: Tensor, src, dst) -> Tensor:
        n = h.shape[0]
        alpha, z = self.attention(h, src, dst)
        agg = T.edge_aggregate(alpha, z, src, dst)
        if self.concat:
            return T.reshape(T.leaky_relu(agg, self.eta), (n, self.heads * self.out_dim))
        return T.mul(T.tsum(agg, axis=1), Tensor(1.0 / self.heads))


@dataclass
class GatConfig:
    in_dim: int = N_FEATURES
    hidden_dim: int = 64
    heads: int = 8
    n_hidden: int = 8
    out_heads: int = 8
    n_classes: int = N_CLASSES
    eta: float = 0.2
    seed: int = 0


class GatModel:
    def __init__(self, config: GatConfig | None = None):
        self.config = cfg = config or GatConfig()
        rng = np.random.default_rng(cfg.seed)
        self.layers: list[GatConv] = []
        width = cfg.in_dim
        for _ in range(cfg.n_hidden):
            layer = GatConv(width, cfg.hidden_dim, cfg.heads, True, cfg.eta, rng)
            self.layers.append(layer)
            width = layer.out_width
        self.layers.append(GatConv(width, cfg.n_classes, cfg.out_heads, False, cfg.eta, rng))

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def param_count(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def forward(self, x, src, dst, check: bool = True) -> Tensor:
        """Row-stochastic class probabilities for every node (edges must include self-loops)."""
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h, src, dst)
            if check and not h.is_finite():
                raise NumericFailure(i)
        probs = T.softmax_rows(h)
        if check and not probs.is_finite():
            raise NumericFailure(len(self.layers) - 1, "softmax")
        return probs

    def __call__(self, g: Rag) -> np.ndarray:
        return model_forward(self, g)

    def state(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_state(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError("parameter count mismatch")
        for p, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.shape:
                raise ValueError(f"shape mismatch {a.shape} vs {p.shape}")
            p.data = a.copy()


def param_count(m: GatModel) -> int:
    return m.param_count()


def closed_form_param_count(cfg: GatConfig) -> int:
    total, width = 0, cfg.in_dim
    for _ in range(cfg.n_hidden):
        total += cfg.heads * (cfg.hidden_dim * width + 2 * cfg.hidden_dim)
        width = cfg.heads * cfg.hidden_dim
    return total + cfg.out_heads * (cfg.n_classes * width + 2 * cfg.n_classes)


def model_forward(m: GatModel, g: Rag) -> np.ndarray:
    if g.features.shape[1] != m.config.in_dim:
        raise ValueError(f"feature width {g.features.shape[1]} != {m.config.in_dim}")
    src, dst = self_loop_edges(g.n_nodes, g.edges)
    return m.forward(g.features, src, dst).data


def predict_labels(m: GatModel, g: Rag) -> np.ndarray:
    return model_forward(m, g).argmax(axis=1)


# --------------------------------------------------------------------------
# GATC checkpoint: magic, version (u32), JSON length (u32), JSON config,
# then every parameter as little-endian f64 in layer order (W, a_dst, a_src).


def save_checkpoint(path, m: GatModel, extra: dict | None = None) -> None:
    meta = {"config": asdict(m.config),
            "shapes": [list(p.shape) for p in m.parameters()]}
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for p in m.parameters():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> GatModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a GATC checkpoint")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[12:12 + n])
    m = GatModel(GatConfig(**meta["config"]))
    off = 12 + n
    arrays = []
    for shape in meta["shapes"]:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, "<f8", count, off).reshape(shape))
        off += 8 * count
    m.load_state(arrays)
    return m
