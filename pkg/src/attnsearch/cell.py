"""Attention cells: K chained attention operations over a preprocessed
feature map, combined and added back to the cell input.

The cell pipeline is: preprocess (channel reduction, spatial resize,
temporal grouping) -> run the K operations, each taking a learnable
softmax-weighted mixture of earlier feature maps -> concatenate the
selected outputs and project to the reduced width -> postprocess (merge
groups, drop padding, resize back) -> project to the input width with a
zero-initialized conv -> residual add. An untrained cell is therefore an
exact identity map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import tensor as T
from .tensor import ShapeError, Tensor

# desk-scale defaults
DEFAULT_C_REDUCTION = 8
DEFAULT_C_OP = 4
DEFAULT_C_PRIME = 4
DEFAULT_T_GROUP = 4
DEFAULT_RESIZE = (4, 4)


@dataclass(frozen=True)
class CellSpec:
    """Complete discrete description of an attention cell."""

    ops: tuple[ops.AttentionOpSpec, ...]
    kv_source: str = "op_input"
    c_reduction: int = DEFAULT_C_REDUCTION
    c_op: int = DEFAULT_C_OP
    t_group: int = DEFAULT_T_GROUP
    h_resize: int = DEFAULT_RESIZE[0]
    w_resize: int = DEFAULT_RESIZE[1]
    combine_indices: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        combine = self.combine_indices or tuple(range(1, len(self.ops) + 1))
        object.__setattr__(self, "combine_indices",
                           tuple(sorted(set(int(i) for i in combine))))

    @property
    def k(self) -> int:
        return len(self.ops)

    def validate(self) -> None:
        if not self.ops:
            raise ValueError("a cell needs at least one operation")
        if self.kv_source not in ops.KV_SOURCES:
            raise ValueError(f"unknown kv source '{self.kv_source}'")
        for dim in (self.c_reduction, self.c_op, self.t_group, self.h_resize,
                    self.w_resize):
            if dim < 1:
                raise ValueError("cell dimensions must be positive")
        if self.c_op > self.c_reduction:
            raise ValueError(
                f"c_op ({self.c_op}) must not exceed c_reduction "
                f"({self.c_reduction})")
        for k, op in enumerate(self.ops, start=1):
            op.validate()
            if op.c_out != self.c_op:
                raise ValueError(
                    f"op {k} outputs {op.c_out} channels, cell expects "
                    f"{self.c_op}")
            if op.c_out > self.c_reduction:
                raise ValueError("op output wider than the reduced cell width")
            if k == 1 and op.input_indices != (0,):
                raise ValueError("the first operation must take exactly f_0")
            if any(i >= k for i in op.input_indices):
                raise ValueError(
                    f"op {k} references feature {max(op.input_indices)} "
                    f"which is not yet computed")
            mixes_cell_input = 0 in op.input_indices and len(op.input_indices) > 1
            if mixes_cell_input and self.c_reduction != self.c_op:
                raise ValueError(
                    f"op {k} mixes f_0 ({self.c_reduction} channels) with op "
                    f"outputs ({self.c_op} channels); widths must agree")
        if not self.combine_indices:
            raise ValueError("combine_indices must be nonempty")
        if any(i < 1 or i > self.k for i in self.combine_indices):
            raise ValueError(
                f"combine_indices {self.combine_indices} outside 1..{self.k}")

    def op_input_channels(self, k: int) -> int:
        """Channel width of op k's (1-based) input mixture."""
        return self.c_reduction if 0 in self.ops[k - 1].input_indices \
            else self.c_op

    def to_dict(self) -> dict:
        return {
            "K": self.k,
            "kv_source": self.kv_source,
            "c_reduction": int(self.c_reduction),
            "c_op": int(self.c_op),
            "t_group": int(self.t_group),
            "h_resize": int(self.h_resize),
            "w_resize": int(self.w_resize),
            "combine": list(self.combine_indices),
            "ops": [op.to_dict() for op in self.ops],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellSpec":
        spec = cls(
            ops=tuple(ops.AttentionOpSpec.from_dict(o) for o in d["ops"]),
            kv_source=d["kv_source"], c_reduction=int(d["c_reduction"]),
            c_op=int(d["c_op"]), t_group=int(d["t_group"]),
            h_resize=int(d["h_resize"]), w_resize=int(d["w_resize"]),
            combine_indices=tuple(d["combine"]))
        if int(d["K"]) != spec.k:
            raise ValueError(f"K={d['K']} but {spec.k} ops were given")
        spec.validate()
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CellSpec":
        return cls.from_dict(json.loads(text))


def render_cell(spec: CellSpec) -> str:
    """Human-readable sketch of the op graph."""
    lines = [f"cell: K={spec.k} kv={spec.kv_source} "
             f"c_red={spec.c_reduction} c_op={spec.c_op} "
             f"group={spec.t_group} resize=({spec.h_resize},{spec.w_resize})"]
    for k, op in enumerate(spec.ops, start=1):
        srcs = ", ".join(f"f{i}" for i in op.input_indices)
        gate = " +gate" if op.use_gating else ""
        lines.append(f"  f{k} = {op.op_type}/{op.dimension} "
                     f"phi={op.activation}{gate} <- [{srcs}]")
    lines.append("  out = combine(" +
                 ", ".join(f"f{i}" for i in spec.combine_indices) +
                 ") + residual")
    return "\n".join(lines)


@dataclass(frozen=True)
class RestoreInfo:
    """Shape bookkeeping carried from preprocess to postprocess."""

    batch: int
    t: int
    h: int
    w: int
    n_groups: int
    pad: int
    channels: int  # width of the processed maps


@dataclass
class CellParams:
    """All trainable tensors of one cell instance."""

    op_params: list
    mix_logits: dict  # op index (1-based) -> logits tensor
    reduce_w: Tensor
    reduce_b: Tensor
    combine_w: Tensor
    combine_b: Tensor
    project_w: Tensor
    project_b: Tensor

    @classmethod
    def create(cls, store: T.ParameterStore, prefix: str, spec: CellSpec,
               input_channels: int, rng,
               zero_init_residual: bool = True) -> "CellParams":
        spec.validate()
        proc_shape = (spec.t_group, spec.h_resize, spec.w_resize)
        op_params = []
        mix_logits = {}
        for k, op in enumerate(spec.ops, start=1):
            c_in = spec.op_input_channels(k)
            op_params.append(ops.AttentionOpParams.create(
                store, f"{prefix}/op{k}", op, kv_source=spec.kv_source,
                input_shape=proc_shape + (c_in,),
                cell_input_channels=spec.c_reduction, rng=rng))
            if len(op.input_indices) > 1:
                logits = store.create(f"{prefix}/op{k}/mix_logits",
                                      (len(op.input_indices),), rng, "zeros")
                if op.input_weights is not None:
                    w = np.asarray(op.input_weights, dtype=np.float64)
                    w = np.maximum(w / w.sum(), 1e-12)
                    logits.data = np.log(w)
                mix_logits[k] = logits
        reduce_w = store.create(f"{prefix}/reduce_w",
                                (input_channels, spec.c_reduction), rng)
        reduce_b = store.create(f"{prefix}/reduce_b", (spec.c_reduction,),
                                rng, "zeros")
        n_comb = len(spec.combine_indices)
        combine_w = store.create(f"{prefix}/combine_w",
                                 (n_comb * spec.c_op, spec.c_reduction), rng)
        combine_b = store.create(f"{prefix}/combine_b", (spec.c_reduction,),
                                 rng, "zeros")
        # zero init keeps insertion an exact identity (safe for trained
        # backbones); a live project is needed for joint from-scratch
        # training, where a dead residual branch can sit on a saddle when
        # the branch's mean output carries no label information
        project_w = store.create(f"{prefix}/project_w",
                                 (spec.c_reduction, input_channels), rng,
                                 "zeros" if zero_init_residual
                                 else "uniform_fanin")
        project_b = store.create(f"{prefix}/project_b", (input_channels,),
                                 rng, "zeros")
        return cls(op_params=op_params, mix_logits=mix_logits,
                   reduce_w=reduce_w, reduce_b=reduce_b, combine_w=combine_w,
                   combine_b=combine_b, project_w=project_w,
                   project_b=project_b)


def _ensure_batched(f: Tensor):
    if f.ndim == 5:
        return f, True
    if f.ndim == 4:
        return T.reshape(f, (1,) + f.shape), False
    raise ShapeError(f"expected (B,T,H,W,C) or (T,H,W,C), got {f.shape}")


def preprocess_with(f: Tensor, c_reduction: int, t_group: int, h_resize: int,
                    w_resize: int, reduce_w: Tensor, reduce_b: Tensor):
    """Reduce channels, resize space, group time; returns (f_0, RestoreInfo).

    Output shape is (B*n_groups, t_group, h_resize, w_resize, c_reduction);
    trailing frames of the last group are zero padding when t_group does not
    divide T.
    """
    b, t, h, w, c = f.shape
    reduced = T.channel_linear(f, reduce_w, reduce_b)
    resized = T.bilinear_resize(reduced, h_resize, w_resize)
    n = -(-t // t_group)
    pad = n * t_group - t
    if pad:
        resized = T.pad(resized, ((0, 0), (0, pad), (0, 0), (0, 0), (0, 0)))
    grouped = T.reshape(resized, (b * n, t_group, h_resize, w_resize,
                                  c_reduction))
    return grouped, RestoreInfo(batch=b, t=t, h=h, w=w, n_groups=n, pad=pad,
                                channels=c_reduction)


def preprocess(f: Tensor, spec: CellSpec, params: CellParams):
    return preprocess_with(f, spec.c_reduction, spec.t_group, spec.h_resize,
                           spec.w_resize, params.reduce_w, params.reduce_b)


def postprocess(f_processed: Tensor, restore: RestoreInfo) -> Tensor:
    """Merge temporal groups, drop padding frames, resize space back."""
    bn, tg, hr, wr, c = f_processed.shape
    if bn != restore.batch * restore.n_groups:
        raise ShapeError(
            f"processed batch {bn} inconsistent with restore "
            f"{restore.batch}x{restore.n_groups}")
    if restore.n_groups * tg != restore.t + restore.pad:
        raise ShapeError(
            f"group layout {restore.n_groups}x{tg} cannot restore "
            f"T={restore.t} with pad={restore.pad}")
    merged = T.reshape(f_processed,
                       (restore.batch, restore.n_groups * tg, hr, wr, c))
    if restore.pad:
        merged = T.slice_(merged, (slice(None), slice(0, restore.t)))
    return T.bilinear_resize(merged, restore.h, restore.w)


def run_cell(spec: CellSpec, params: CellParams, f_input: Tensor) -> Tensor:
    """Execute the cell; output shape equals input shape."""
    spec.validate()
    f5, had_batch = _ensure_batched(f_input)
    f0, restore = preprocess(f5, spec, params)
    feats = [f0]
    for k, op in enumerate(spec.ops, start=1):
        idx = op.input_indices
        if len(idx) == 1:
            f_in = feats[idx[0]]
        else:
            wts = T.softmax(params.mix_logits[k], axis=0)
            terms = [T.mul(T.reshape(T.slice_(wts, (slice(i, i + 1),)), ()),
                           feats[j])
                     for i, j in enumerate(idx)]
            f_in = terms[0]
            for term in terms[1:]:
                f_in = T.add(f_in, term)
        feats.append(ops.run_attention_op(op, f_in, f0, params.op_params[k - 1],
                                          kv_source=spec.kv_source))
    chosen = T.concat([feats[i] for i in spec.combine_indices], axis=-1)
    comb = T.channel_linear(chosen, params.combine_w, params.combine_b)
    restored = postprocess(comb, restore)
    out = T.channel_linear(restored, params.project_w, params.project_b)
    result = T.add(f5, out)
    return result if had_batch else T.reshape(result, f_input.shape)


def mixing_distributions(spec: CellSpec, params: CellParams) -> dict:
    """Current softmax mixing weights per multi-input op (numpy arrays)."""
    out = {}
    for k, logits in params.mix_logits.items():
        e = np.exp(logits.data - logits.data.max())
        out[k] = e / e.sum()
    return out


def random_cell_spec(rng, k: int = 4, c_reduction: int = DEFAULT_C_REDUCTION,
                     c_op: int = DEFAULT_C_OP, t_group: int = DEFAULT_T_GROUP,
                     h_resize: int = DEFAULT_RESIZE[0],
                     w_resize: int = DEFAULT_RESIZE[1],
                     max_inputs: int = 2) -> CellSpec:
    """Uniformly sampled valid cell with K ops (used by tests and search)."""
    specs = []
    for pos in range(1, k + 1):
        if pos == 1:
            inputs = (0,)
        else:
            pool = list(range(pos))
            n_in = int(rng.integers(1, min(max_inputs, len(pool)) + 1))
            inputs = tuple(rng.choice(pool, size=n_in, replace=False))
            if c_reduction != c_op and 0 in inputs and len(inputs) > 1:
                inputs = tuple(i for i in inputs if i != 0)
        specs.append(ops.AttentionOpSpec(
            dimension=str(rng.choice(ops.DIMENSIONS)),
            op_type=str(rng.choice(ops.OP_TYPES)),
            activation=str(rng.choice(ops.ACTIVATIONS)),
            use_gating=bool(rng.integers(0, 2)),
            input_indices=inputs,
            c_prime=int(rng.integers(1, c_op + 1)),
            c_out=c_op))
    n_comb = int(rng.integers(1, k + 1))
    combine = tuple(rng.choice(np.arange(1, k + 1), size=n_comb,
                               replace=False))
    spec = CellSpec(ops=tuple(specs),
                    kv_source=str(rng.choice(ops.KV_SOURCES)),
                    c_reduction=c_reduction, c_op=c_op, t_group=t_group,
                    h_resize=h_resize, w_resize=w_resize,
                    combine_indices=combine)
    spec.validate()
    return spec
