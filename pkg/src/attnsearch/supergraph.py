"""Differentiable relaxation of the attention-cell search space.

An m-level grid of n typed attention nodes. Each node at level i >= 2 takes a
learnable softmax mixture of all level i-1 outputs; each node mixes its
output over the four candidate activations (with G1/G2/G3 shared across the
activation branches) and over the gated/ungated variants; a sink node takes
a softmax-weighted sum of every node's output through per-node projections.
The whole grid is wrapped in the same preprocess/postprocess pipeline and
zero-initialized residual projection as a concrete cell, so an untrained
supergraph is an identity map.

derive_cell extracts a discrete CellSpec from trained logits by recursive
top-alpha/top-beta selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cell as cell_mod
from . import ops
from . import tensor as T
from .tensor import Tensor

PRESETS = ("sg1", "sg2", "sg3")

_DOT_ROW = (("dot", "temporal"), ("dot", "temporal"),
            ("dot", "spatial"), ("dot", "spatial"),
            ("dot", "spatiotemporal"), ("dot", "spatiotemporal"))
_MIXED_ROW = (("dot", "temporal"), ("map", "temporal"),
              ("dot", "spatial"), ("map", "spatial"),
              ("dot", "spatiotemporal"), ("map", "spatiotemporal"))


@dataclass(frozen=True)
class SupergraphConfig:
    """Static layout of the supergraph and its cell-pipeline dimensions."""

    m: int
    n: int
    node_table: tuple  # ((op_type, dimension), ...) of length m*n
    kv_source: str
    c_reduction: int = cell_mod.DEFAULT_C_REDUCTION
    c_op: int = cell_mod.DEFAULT_C_OP
    c_prime: int = cell_mod.DEFAULT_C_PRIME
    t_group: int = cell_mod.DEFAULT_T_GROUP
    h_resize: int = cell_mod.DEFAULT_RESIZE[0]
    w_resize: int = cell_mod.DEFAULT_RESIZE[1]
    include_gating_choice: bool = True
    preset: str | None = None

    def validate(self) -> None:
        if self.m < 1 or self.n < 1:
            raise ValueError("supergraph needs m, n >= 1")
        if len(self.node_table) != self.m * self.n:
            raise ValueError(
                f"node_table has {len(self.node_table)} entries, expected "
                f"{self.m * self.n}")
        for typ, dim in self.node_table:
            if typ not in ops.OP_TYPES or dim not in ops.DIMENSIONS:
                raise ValueError(f"bad node type ({typ}, {dim})")
        if self.kv_source not in ops.KV_SOURCES:
            raise ValueError(f"unknown kv source '{self.kv_source}'")
        if self.c_op > self.c_reduction:
            raise ValueError("c_op must not exceed c_reduction")
        if self.c_prime > self.c_op:
            raise ValueError("c_prime must not exceed c_op")

    def node(self, level: int, index: int):
        """(op_type, dimension) of the node; level and index are 1-based."""
        return self.node_table[(level - 1) * self.n + index - 1]


def preset_config(name: str, **overrides) -> SupergraphConfig:
    """The three stock search spaces over a 2-level, 6-node grid."""
    name = name.lower()
    if name == "sg1":
        table, kv = _DOT_ROW * 2, "cell_input"
    elif name == "sg2":
        table, kv = _MIXED_ROW * 2, "cell_input"
    elif name == "sg3":
        table, kv = _DOT_ROW * 2, "op_input"
    else:
        raise ValueError(f"unknown preset '{name}'; use one of {PRESETS}")
    kw = dict(m=2, n=6, node_table=table, kv_source=kv, preset=name)
    kw.update(overrides)
    config = SupergraphConfig(**kw)
    config.validate()
    return config


@dataclass
class ConnectionWeights:
    """Trainable tensors of one supergraph instance: architecture logits,
    per-node attention parameters, sink projections, and the wrapping
    reduce/project convolutions."""

    level_logits: dict  # (level, index) -> Tensor(n), for level >= 2
    activation_logits: dict  # (level, index) -> Tensor(|activations|)
    gating_logits: dict  # (level, index) -> Tensor(2), [ungated, gated]
    sink_logits: Tensor
    op_params: dict  # (level, index) -> AttentionOpParams
    sink_w: dict  # (level, index) -> Tensor(c_op, c_reduction)
    sink_b: dict
    reduce_w: Tensor
    reduce_b: Tensor
    project_w: Tensor
    project_b: Tensor

    @classmethod
    def create(cls, store: T.ParameterStore, prefix: str,
               config: SupergraphConfig, input_channels: int,
               rng, share_logits_from: "ConnectionWeights | None" = None,
               zero_init_residual: bool = True) -> "ConnectionWeights":
        """share_logits_from ties the architecture logits (level,
        activation, gating, sink) to another instance's tensors so several
        insertion positions vote on one shared architecture; op parameters
        and projections stay per-instance.

        zero_init_residual=False gives the output projection a live
        initialization (see CellParams.create)."""
        config.validate()
        proc = (config.t_group, config.h_resize, config.w_resize)
        shared = share_logits_from
        level_logits, act_logits, gate_logits = {}, {}, {}
        op_params, sink_w, sink_b = {}, {}, {}
        for level in range(1, config.m + 1):
            for index in range(1, config.n + 1):
                key = (level, index)
                tag = f"{prefix}/node{level}_{index}"
                typ, dim = config.node(level, index)
                c_in = config.c_reduction if level == 1 else config.c_op
                node_spec = ops.AttentionOpSpec(
                    dimension=dim, op_type=typ, activation="none",
                    use_gating=config.include_gating_choice,
                    input_indices=(0,), c_prime=config.c_prime,
                    c_out=config.c_op)
                op_params[key] = ops.AttentionOpParams.create(
                    store, tag, node_spec, kv_source=config.kv_source,
                    input_shape=proc + (c_in,),
                    cell_input_channels=config.c_reduction, rng=rng)
                if level >= 2:
                    level_logits[key] = (shared.level_logits[key] if shared
                                         else store.create(
                        f"{tag}/level_logits", (config.n,), rng, "zeros"))
                act_logits[key] = (shared.activation_logits[key] if shared
                                   else store.create(
                    f"{tag}/activation_logits", (len(ops.ACTIVATIONS),), rng,
                    "zeros"))
                if config.include_gating_choice:
                    gate_logits[key] = (shared.gating_logits[key] if shared
                                        else store.create(
                        f"{tag}/gating_logits", (2,), rng, "zeros"))
                sink_w[key] = store.create(
                    f"{tag}/sink_w", (config.c_op, config.c_reduction), rng)
                sink_b[key] = store.create(
                    f"{tag}/sink_b", (config.c_reduction,), rng, "zeros")
        sink_logits = (shared.sink_logits if shared else
                       store.create(f"{prefix}/sink_logits",
                                    (config.m * config.n,), rng, "zeros"))
        reduce_w = store.create(f"{prefix}/reduce_w",
                                (input_channels, config.c_reduction), rng)
        reduce_b = store.create(f"{prefix}/reduce_b", (config.c_reduction,),
                                rng, "zeros")
        project_w = store.create(f"{prefix}/project_w",
                                 (config.c_reduction, input_channels), rng,
                                 "zeros" if zero_init_residual
                                 else "uniform_fanin")
        project_b = store.create(f"{prefix}/project_b", (input_channels,),
                                 rng, "zeros")
        return cls(level_logits=level_logits, activation_logits=act_logits,
                   gating_logits=gate_logits, sink_logits=sink_logits,
                   op_params=op_params, sink_w=sink_w, sink_b=sink_b,
                   reduce_w=reduce_w, reduce_b=reduce_b,
                   project_w=project_w, project_b=project_b)


def _scalar(vec: Tensor, i: int) -> Tensor:
    return T.reshape(T.slice_(vec, (slice(i, i + 1),)), ())


def _mix(weights: Tensor, tensors: list) -> Tensor:
    out = T.mul(_scalar(weights, 0), tensors[0])
    for i in range(1, len(tensors)):
        out = T.add(out, T.mul(_scalar(weights, i), tensors[i]))
    return out


def _node_forward(config: SupergraphConfig, weights: ConnectionWeights,
                  key, f_in: Tensor, f_0: Tensor) -> Tensor:
    """One node: raw attention scores once, then the activation mixture
    (shared G1/G2/G3) and the gated/ungated mixture."""
    typ, dim = config.node(*key)
    params = weights.op_params[key]
    fq2 = ops._reshape_to_2d_batched(f_in, dim)
    if typ == "map":
        scores = ops.map_attention_weights(fq2, params, "none")
        value_src = f_in
    else:
        f_kv = f_0 if config.kv_source == "cell_input" else f_in
        fkv2 = ops._reshape_to_2d_batched(f_kv, dim)
        scores = ops.dot_product_attention_weights(fq2, fkv2, params, "none")
        value_src = f_kv
    act_w = T.softmax(weights.activation_logits[key], axis=0)
    branches = []
    for act in ops.ACTIVATIONS:
        w_act = ops.apply_activation(scores, act, axis=-1)
        branches.append(ops.apply_attention(w_act, value_src, dim, params))
    mixed = _mix(act_w, branches)
    if config.include_gating_choice:
        gate_w = T.softmax(weights.gating_logits[key], axis=0)
        gated = ops.feature_gating(mixed, params)
        mixed = T.add(T.mul(_scalar(gate_w, 0), mixed),
                      T.mul(_scalar(gate_w, 1), gated))
    return mixed


def supergraph_forward(config: SupergraphConfig, weights: ConnectionWeights,
                       f_input: Tensor) -> Tensor:
    """Full relaxed forward pass; output shape equals input shape."""
    f5, had_batch = cell_mod._ensure_batched(f_input)
    f0, restore = cell_mod.preprocess_with(
        f5, config.c_reduction, config.t_group, config.h_resize,
        config.w_resize, weights.reduce_w, weights.reduce_b)
    prev_outputs: list = []
    node_outputs: dict = {}
    for level in range(1, config.m + 1):
        current = []
        for index in range(1, config.n + 1):
            key = (level, index)
            if level == 1:
                f_in = f0
            else:
                lw = T.softmax(weights.level_logits[key], axis=0)
                f_in = _mix(lw, prev_outputs)
            out = _node_forward(config, weights, key, f_in, f0)
            node_outputs[key] = out
            current.append(out)
        prev_outputs = current
    sink_weights = T.softmax(weights.sink_logits, axis=0)
    total = None
    flat = 0
    for level in range(1, config.m + 1):
        for index in range(1, config.n + 1):
            key = (level, index)
            proj = T.channel_linear(node_outputs[key], weights.sink_w[key],
                                    weights.sink_b[key])
            term = T.mul(_scalar(sink_weights, flat), proj)
            total = term if total is None else T.add(total, term)
            flat += 1
    restored = cell_mod.postprocess(total, restore)
    out = T.channel_linear(restored, weights.project_w, weights.project_b)
    result = T.add(f5, out)
    return result if had_batch else T.reshape(result, f_input.shape)


def calibrate_node_scales(config: SupergraphConfig,
                          weights: ConnectionWeights, f_probe: Tensor,
                          target_rms: float = 1.0) -> dict:
    """Rescale every node's value projection so node outputs start near
    target_rms on a representative batch of inserted features.

    Each node mixes all four activation branches, and the unbounded ones
    ('relu', 'none') make level-2 output magnitude grow like the fourth
    power of the input scale; with plain SGD and no normalization layers
    the resulting step-one gradient spikes destroy training before the
    architecture logits see any signal. Scaling is applied to g3 (the
    value path), which every branch is linear in, so forward semantics
    are unchanged up to the returned per-node factors. Idempotent up to
    gating drift: a second call returns factors near 1.

    Returns the applied {(level, index): factor} map.
    """
    f5, _ = cell_mod._ensure_batched(f_probe)
    f0, _ = cell_mod.preprocess_with(
        f5, config.c_reduction, config.t_group, config.h_resize,
        config.w_resize, weights.reduce_w, weights.reduce_b)
    factors: dict = {}
    prev_outputs: list = []
    for level in range(1, config.m + 1):
        current = []
        for index in range(1, config.n + 1):
            key = (level, index)
            if level == 1:
                f_in = f0
            else:
                lw = T.softmax(weights.level_logits[key], axis=0)
                f_in = _mix(lw, prev_outputs)
            params = weights.op_params[key]
            out = _node_forward(config, weights, key, f_in, f0)
            rms = float(np.sqrt(np.mean(out.data ** 2)))
            factor = target_rms / max(rms, 1e-12)
            params.g3_w.data = params.g3_w.data * factor
            params.g3_b.data = params.g3_b.data * factor
            factors[key] = factor
            current.append(_node_forward(config, weights, key, f_in, f0))
        prev_outputs = current
    return factors


def search_step(forward_fn, store: T.ParameterStore, optimizer: T.SGD,
                batch, labels, lr: float | None = None,
                freeze_names=()) -> float:
    """One joint optimization step: forward, cross-entropy, backward, SGD.

    forward_fn(batch) must return (N, num_classes) logits recorded on the
    tape. freeze_names lists parameters whose gradients are zeroed (used to
    hold architecture logits fixed in control experiments).
    """
    logits = forward_fn(batch)
    loss = T.cross_entropy(logits, labels)
    grads = T.backward(loss, store)
    for name in freeze_names:
        grads[name] = np.zeros_like(grads[name])
    optimizer.step(grads, lr=lr)
    return loss.item()


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def derive_cell(config: SupergraphConfig, weights: ConnectionWeights,
                alpha: int = 3, beta: int = 2) -> cell_mod.CellSpec:
    """Discrete cell from trained logits: the top-alpha sink nodes plus,
    recursively, each selected node's top-beta predecessors.

    Deterministic: all ties break toward the lower (level, index); the
    result depends only on logit rankings.
    """
    return derive_cell_with_sources(config, weights, alpha, beta)[0]


def derive_cell_with_sources(config: SupergraphConfig,
                             weights: ConnectionWeights, alpha: int = 3,
                             beta: int = 2):
    """derive_cell plus the (level, index) node each op was taken from,
    aligned with the returned spec's op order."""
    config.validate()
    if not 1 <= alpha <= config.m * config.n:
        raise ValueError(f"alpha must be in 1..{config.m * config.n}")
    if not 1 <= beta <= config.n:
        raise ValueError(f"beta must be in 1..{config.n}")

    sink = _softmax_np(weights.sink_logits.data)
    keys = [(level, index)
            for level in range(1, config.m + 1)
            for index in range(1, config.n + 1)]
    flat_of = {key: i for i, key in enumerate(keys)}
    ranked = sorted(keys, key=lambda k: (-sink[flat_of[k]], k))
    top = ranked[:alpha]

    selected = set(top)
    frontier = list(top)
    predecessors: dict = {}
    while frontier:
        key = frontier.pop()
        level, _ = key
        if level == 1:
            continue
        lw = _softmax_np(weights.level_logits[key].data)
        order = sorted(range(1, config.n + 1), key=lambda j: (-lw[j - 1], j))
        chosen = [(level - 1, j) for j in order[:beta]]
        predecessors[key] = [(p, float(lw[p[1] - 1])) for p in chosen]
        for pred in chosen:
            if pred not in selected:
                selected.add(pred)
                frontier.append(pred)

    ordered = sorted(selected)
    position = {key: i + 1 for i, key in enumerate(ordered)}

    op_specs = []
    for key in ordered:
        level, index = key
        typ, dim = config.node(*key)
        act_idx = int(np.argmax(weights.activation_logits[key].data))
        activation = ops.ACTIVATIONS[act_idx]
        if config.include_gating_choice:
            use_gating = bool(np.argmax(weights.gating_logits[key].data))
        else:
            use_gating = False
        if level == 1:
            inputs, input_weights = (0,), None
        else:
            preds = predecessors[key]
            inputs = tuple(position[p] for p, _ in preds)
            raw = np.array([w for _, w in preds])
            input_weights = tuple(raw / raw.sum()) if len(preds) > 1 else None
        op_specs.append(ops.AttentionOpSpec(
            dimension=dim, op_type=typ, activation=activation,
            use_gating=use_gating, input_indices=inputs,
            c_prime=config.c_prime, c_out=config.c_op,
            input_weights=input_weights))

    combine = tuple(sorted(position[key] for key in top))
    spec = cell_mod.CellSpec(
        ops=tuple(op_specs), kv_source=config.kv_source,
        c_reduction=config.c_reduction, c_op=config.c_op,
        t_group=config.t_group, h_resize=config.h_resize,
        w_resize=config.w_resize, combine_indices=combine)
    spec.validate()
    return spec, tuple(ordered)
