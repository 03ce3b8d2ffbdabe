"""Primitive attention operations over (T, H, W, C) feature maps.

An operation is defined by its attention dimension (temporal, spatial,
spatiotemporal), its type (map-based or dot-product), an activation for the
weight computation, and an optional channel-gating layer. Map-based attention
produces one weight per position of the attention dimension (a diagonal weight
matrix, stored as a vector); dot-product attention produces a full
position-by-position weight matrix from pairwise similarities.

All functions accept feature maps with or without a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DIMENSIONS = ("temporal", "spatial", "spatiotemporal")
OP_TYPES = ("map", "dot")
ACTIVATIONS = ("none", "relu", "sigmoid", "softmax")
KV_SOURCES = ("op_input", "cell_input")


@dataclass(frozen=True)
class AttentionOpSpec:
    """Discrete design choices of a single attention operation.

    input_weights optionally seeds the learnable mixing distribution over
    input_indices (used by cells derived from a trained supergraph); order
    follows the sorted input_indices.
    """

    dimension: str
    op_type: str
    activation: str
    use_gating: bool
    input_indices: tuple[int, ...]
    c_prime: int
    c_out: int
    input_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        pairs = sorted(set(int(i) for i in self.input_indices))
        if self.input_weights is not None:
            order = sorted(range(len(self.input_indices)),
                           key=lambda i: self.input_indices[i])
            object.__setattr__(
                self, "input_weights",
                tuple(float(self.input_weights[i]) for i in order))
        object.__setattr__(self, "input_indices", tuple(pairs))

    def validate(self) -> None:
        if self.dimension not in DIMENSIONS:
            raise ValueError(f"unknown attention dimension '{self.dimension}'")
        if self.op_type not in OP_TYPES:
            raise ValueError(f"unknown attention type '{self.op_type}'")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        if not self.input_indices:
            raise ValueError("input_indices must be nonempty")
        if any(i < 0 for i in self.input_indices):
            raise ValueError("input indices must be >= 0")
        if self.c_prime < 1 or self.c_out < 1:
            raise ValueError("c_prime and c_out must be positive")
        if self.c_prime > self.c_out:
            raise ValueError(
                f"c_prime ({self.c_prime}) must not exceed c_out ({self.c_out})")
        if self.input_weights is not None:
            if len(self.input_weights) != len(self.input_indices):
                raise ValueError("input_weights length must match input_indices")
            if any(w <= 0 for w in self.input_weights):
                raise ValueError("input_weights must be positive")

    def to_dict(self) -> dict:
        d = {
            "dimension": self.dimension,
            "type": self.op_type,
            "activation": self.activation,
            "gating": bool(self.use_gating),
            "inputs": list(self.input_indices),
            "c_prime": int(self.c_prime),
            "c_out": int(self.c_out),
        }
        if self.input_weights is not None:
            d["input_weights"] = list(self.input_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionOpSpec":
        weights = d.get("input_weights")
        spec = cls(dimension=d["dimension"], op_type=d["type"],
                   activation=d["activation"], use_gating=bool(d["gating"]),
                   input_indices=tuple(d["inputs"]), c_prime=int(d["c_prime"]),
                   c_out=int(d["c_out"]),
                   input_weights=None if weights is None else tuple(weights))
        spec.validate()
        return spec


def _ensure_batched(f: Tensor):
    """Promote (T,H,W,C) to (1,T,H,W,C); returns (tensor, had_batch)."""
    if f.ndim == 5:
        return f, True
    if f.ndim == 4:
        return T.reshape(f, (1,) + f.shape), False
    raise ShapeError(f"expected a 4D or 5D feature map, got shape {f.shape}")


def attention_rows(dimension: str, t: int, h: int, w: int, c: int):
    """(P, D) of the 2D view: P attention positions, D remaining size."""
    if dimension == "temporal":
        return t, h * w * c
    if dimension == "spatial":
        return h * w, c
    if dimension == "spatiotemporal":
        return t * h * w, c
    raise ValueError(f"unknown attention dimension '{dimension}'")


def _reshape_to_2d_batched(f: Tensor, dimension: str) -> Tensor:
    b, t, h, w, c = f.shape
    if dimension == "temporal":
        return T.reshape(f, (b, t, h * w * c))
    if dimension == "spatial":
        return T.reshape(f, (b, t, h * w, c))
    if dimension == "spatiotemporal":
        return T.reshape(f, (b, t * h * w, c))
    raise ValueError(f"unknown attention dimension '{dimension}'")


def _reshape_from_2d_batched(y: Tensor, dimension: str, t: int, h: int,
                             w: int, c: int) -> Tensor:
    b = y.shape[0]
    return T.reshape(y, (b, t, h, w, c))


def reshape_to_2d(f: Tensor, dimension: str) -> Tensor:
    """2D view of an unbatched (T,H,W,C) map: (T, HWC) for temporal,
    (THW, C) for spatiotemporal, and T stacked (HW, C) maps for spatial."""
    if f.ndim != 4:
        raise ShapeError(f"reshape_to_2d expects (T,H,W,C), got {f.shape}")
    t, h, w, c = f.shape
    if dimension == "temporal":
        return T.reshape(f, (t, h * w * c))
    if dimension == "spatial":
        return T.reshape(f, (t, h * w, c))
    if dimension == "spatiotemporal":
        return T.reshape(f, (t * h * w, c))
    raise ValueError(f"unknown attention dimension '{dimension}'")


def reshape_to_2d_inverse(y: Tensor, dimension: str, t: int, h: int, w: int,
                          c: int) -> Tensor:
    return T.reshape(y, (t, h, w, c))


@dataclass
class AttentionOpParams:
    """Trainable tensors of one attention operation.

    G1/G2/G3 are per-position linear layers (1x1x1 convolutions); for
    map-based attention G2 is a two-layer perceptron over the P attention
    positions, so its size is tied to the processed feature shape. For
    spatial attention all layers are shared across frames.
    """

    g1_w: Tensor
    g1_b: Tensor
    g3_w: Tensor
    g3_b: Tensor
    # map-based: MLP over positions
    g2_hidden_w: Tensor | None = None
    g2_hidden_b: Tensor | None = None
    g2_out_w: Tensor | None = None
    g2_out_b: Tensor | None = None
    # dot-product: key projection
    g2_w: Tensor | None = None
    g2_b: Tensor | None = None
    # optional channel gating
    gate_hidden_w: Tensor | None = None
    gate_hidden_b: Tensor | None = None
    gate_out_w: Tensor | None = None
    gate_out_b: Tensor | None = None

    @classmethod
    def create(cls, store: T.ParameterStore, prefix: str,
               spec: AttentionOpSpec, kv_source: str,
               input_shape: tuple[int, int, int, int],
               cell_input_channels: int, rng) -> "AttentionOpParams":
        """Register this op's parameters under `prefix` and return handles.

        input_shape is the op input's (T,H,W,C_in); cell_input_channels is
        the channel count of the cell input f_0 (keys/values source when
        kv_source == "cell_input").
        """
        spec.validate()
        if kv_source not in KV_SOURCES:
            raise ValueError(f"unknown kv source '{kv_source}'")
        t, h, w, c_in = input_shape
        p, d_q = attention_rows(spec.dimension, t, h, w, c_in)
        kw = {}
        kw["g1_w"] = store.create(f"{prefix}/g1_w", (d_q, spec.c_prime), rng)
        kw["g1_b"] = store.create(f"{prefix}/g1_b", (spec.c_prime,), rng, "zeros")
        if spec.op_type == "map":
            hidden = max(p // 2, 1)
            kw["g2_hidden_w"] = store.create(f"{prefix}/g2_hidden_w",
                                             (p, hidden), rng)
            kw["g2_hidden_b"] = store.create(f"{prefix}/g2_hidden_b",
                                             (hidden,), rng, "zeros")
            kw["g2_out_w"] = store.create(f"{prefix}/g2_out_w", (hidden, p), rng)
            kw["g2_out_b"] = store.create(f"{prefix}/g2_out_b", (p,), rng, "zeros")
            c_vsrc = c_in
        else:
            if kv_source == "cell_input":
                c_kv = cell_input_channels
            else:
                c_kv = c_in
            _, d_kv = attention_rows(spec.dimension, t, h, w, c_kv)
            kw["g2_w"] = store.create(f"{prefix}/g2_w", (d_kv, spec.c_prime), rng)
            kw["g2_b"] = store.create(f"{prefix}/g2_b", (spec.c_prime,), rng,
                                      "zeros")
            c_vsrc = c_kv
        kw["g3_w"] = store.create(f"{prefix}/g3_w", (c_vsrc, spec.c_out), rng)
        kw["g3_b"] = store.create(f"{prefix}/g3_b", (spec.c_out,), rng, "zeros")
        if spec.use_gating:
            hidden = max(spec.c_out // 2, 1)
            kw["gate_hidden_w"] = store.create(f"{prefix}/gate_hidden_w",
                                               (spec.c_out, hidden), rng)
            kw["gate_hidden_b"] = store.create(f"{prefix}/gate_hidden_b",
                                               (hidden,), rng, "zeros")
            # zero init: the gate starts flat at sigmoid(0) = 0.5
            kw["gate_out_w"] = store.create(f"{prefix}/gate_out_w",
                                            (hidden, spec.c_out), rng, "zeros")
            kw["gate_out_b"] = store.create(f"{prefix}/gate_out_b",
                                            (spec.c_out,), rng, "zeros")
        return cls(**kw)


def apply_activation(x: Tensor, activation: str, axis: int = -1) -> Tensor:
    if activation == "none":
        return x
    if activation == "relu":
        return T.relu(x)
    if activation == "sigmoid":
        return T.sigmoid(x)
    if activation == "softmax":
        return T.softmax(x, axis=axis)
    raise ValueError(f"unknown activation '{activation}'")


def map_attention_weights(f2d: Tensor, params: AttentionOpParams,
                          activation: str) -> Tensor:
    """Per-position weights: phi(G2(AvgPool(G1(f2d)))), one scalar per row.

    f2d has shape (..., P, D); the result (..., P) is the diagonal of the
    attention weight matrix.
    """
    h1 = T.channel_linear(f2d, params.g1_w, params.g1_b)
    pooled = T.mean(h1, axis=-1)
    hidden = T.relu(T.channel_linear(pooled, params.g2_hidden_w,
                                     params.g2_hidden_b))
    scores = T.channel_linear(hidden, params.g2_out_w, params.g2_out_b)
    return apply_activation(scores, activation, axis=-1)


def dot_product_attention_weights(f_query_2d: Tensor, f_kv_2d: Tensor,
                                  params: AttentionOpParams, activation: str,
                                  scaled_similarity: bool = False) -> Tensor:
    """Full weight matrix phi(G1(query) G2(kv)^T) of shape (..., P, P_kv)."""
    if params.g1_w.shape[1] != params.g2_w.shape[1]:
        raise ShapeError(
            f"query/key projection width mismatch: {params.g1_w.shape[1]} "
            f"vs {params.g2_w.shape[1]}")
    q = T.channel_linear(f_query_2d, params.g1_w, params.g1_b)
    k = T.channel_linear(f_kv_2d, params.g2_w, params.g2_b)
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    sim = T.matmul(q, T.transpose(k, axes))
    if scaled_similarity:
        sim = T.mul(sim, 1.0 / np.sqrt(params.g1_w.shape[1]))
    return apply_activation(sim, activation, axis=-1)


def apply_attention(w: Tensor, f_value_src: Tensor, dimension: str,
                    params: AttentionOpParams) -> Tensor:
    """Apply attention weights: ReshapeTo2D^-1(W ReshapeTo2D(G3(f))).

    `w` is either the diagonal-weight vector from map-based attention
    (shape (..., P)) or the full matrix from dot-product attention
    (shape (..., P, P_kv)). G3 only changes the channel count, so the
    spatiotemporal structure of the input carries over to the output.
    For spatial attention each frame's weights act on that frame alone.
    """
    f5, had_batch = _ensure_batched(f_value_src)
    if not had_batch:
        w = T.reshape(w, (1,) + w.shape)
    b, t, h, w_, c = f5.shape
    c_out = params.g3_w.shape[1]
    v = T.channel_linear(f5, params.g3_w, params.g3_b)
    v2 = _reshape_to_2d_batched(v, dimension)
    if w.ndim == v2.ndim - 1:
        if w.shape != v2.shape[:-1]:
            raise ShapeError(
                f"diagonal weights {w.shape} inconsistent with {dimension} "
                f"view {v2.shape}")
        out2 = T.mul(T.reshape(w, w.shape + (1,)), v2)
    elif w.ndim == v2.ndim:
        if w.shape[-1] != v2.shape[-2]:
            raise ShapeError(
                f"weight matrix {w.shape} inconsistent with {dimension} "
                f"view {v2.shape}")
        out2 = T.matmul(w, v2)
    else:
        raise ShapeError(
            f"weights of rank {w.ndim} do not match {dimension} attention")
    out = _reshape_from_2d_batched(out2, dimension, t, h, w_, c_out)
    return out if had_batch else T.reshape(out, (t, h, w_, c_out))


def feature_gating(f: Tensor, params: AttentionOpParams) -> Tensor:
    """Channel attention: scale each channel by a pooled, learned sigmoid
    factor."""
    f5, had_batch = _ensure_batched(f)
    b = f5.shape[0]
    c = f5.shape[-1]
    pooled = T.mean(f5, axis=(1, 2, 3))
    hidden = T.relu(T.channel_linear(pooled, params.gate_hidden_w,
                                     params.gate_hidden_b))
    factor = T.sigmoid(T.channel_linear(hidden, params.gate_out_w,
                                        params.gate_out_b))
    out = T.mul(f5, T.reshape(factor, (b, 1, 1, 1, c)))
    return out if had_batch else T.reshape(out, f.shape)


def run_attention_op(spec: AttentionOpSpec, f_in: Tensor, f_0: Tensor,
                     params: AttentionOpParams, kv_source: str = "op_input",
                     scaled_similarity: bool = False) -> Tensor:
    """Full attention operation: reshape, weights, apply, optional gating.

    f_0 is the cell input; dot-product operations draw their keys and values
    from it when kv_source == "cell_input", otherwise from f_in. Map-based
    operations always act on f_in.
    """
    f_in5, had_batch = _ensure_batched(f_in)
    f_05, _ = _ensure_batched(f_0)
    if f_in5.shape[:4] != f_05.shape[:4]:
        raise ShapeError(
            f"op input {f_in5.shape} and cell input {f_05.shape} disagree "
            f"on (batch, T, H, W)")
    t, h, w, _ = f_in5.shape[1:]
    fq2 = _reshape_to_2d_batched(f_in5, spec.dimension)
    if spec.op_type == "map":
        weights = map_attention_weights(fq2, params, spec.activation)
        out = apply_attention(weights, f_in5, spec.dimension, params)
    else:
        if kv_source == "cell_input":
            f_kv = f_05
        else:
            f_kv = f_in5
        fkv2 = _reshape_to_2d_batched(f_kv, spec.dimension)
        weights = dot_product_attention_weights(
            fq2, fkv2, params, spec.activation,
            scaled_similarity=scaled_similarity)
        out = apply_attention(weights, f_kv, spec.dimension, params)
    if spec.use_gating:
        out = feature_gating(out, params)
    if not had_batch:
        out = T.reshape(out, (t, h, w, spec.c_out))
    return out
