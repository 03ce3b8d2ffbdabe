"""Central finite-difference verification of autodiff gradients.

Used by the test suite and the `gradcheck` CLI command. Every check builds a
scalar loss from a fresh tape, backpropagates, and compares each parameter
gradient entry against (L(x+eps) - L(x-eps)) / (2 eps).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-6, abs(a), abs(n))


def check_loss_fn(loss_fn, store: T.ParameterStore, eps: float = 1e-5,
                  max_entries: int | None = None, rng=None) -> float:
    """Max relative error between autodiff and central FD over store entries.

    max_entries caps the number of randomly sampled entries per parameter
    (None checks every entry).
    """
    grads = T.backward(loss_fn(), store)
    worst = 0.0
    for name, p in store.items():
        flat = p.data.reshape(-1)
        gflat = grads[name].reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn().item()
            flat[i] = orig - eps
            lm = loss_fn().item()
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            worst = max(worst, relative_error(float(gflat[i]), numeric))
    return worst


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _project_loss(out: T.Tensor, r: np.ndarray) -> T.Tensor:
    return T.sum_(T.mul(out, r))


def primitive_cases(rng):
    """Yield (name, store, loss_fn) triples, one random instance per call."""

    def case(name, shapes, build):
        store = T.ParameterStore()
        params = [store.add_array(f"x{i}", _rand(rng, *s))
                  for i, s in enumerate(shapes)]
        return name, store, build(params)

    r23 = _rand(rng, 2, 4)
    yield case("matmul", [(2, 3), (3, 4)],
               lambda p: lambda: _project_loss(T.matmul(p[0], p[1]), r23))
    rb = _rand(rng, 2, 3, 4)
    yield case("matmul_batched", [(2, 3, 5), (5, 4)],
               lambda p: lambda: _project_loss(T.matmul(p[0], p[1]), rb))
    r34 = _rand(rng, 3, 4)
    yield case("add", [(3, 4), (3, 4)],
               lambda p: lambda: _project_loss(T.add(p[0], p[1]), r34))
    yield case("add_broadcast", [(3, 4), (4,)],
               lambda p: lambda: _project_loss(T.add(p[0], p[1]), r34))
    yield case("mul", [(3, 4), (3, 4)],
               lambda p: lambda: _project_loss(T.mul(p[0], p[1]), r34))
    yield case("mul_broadcast", [(3, 1), (3, 4)],
               lambda p: lambda: _project_loss(T.mul(p[0], p[1]), r34))
    r_cat = _rand(rng, 2, 5)
    yield case("concat", [(2, 3), (2, 2)],
               lambda p: lambda: _project_loss(T.concat(p, axis=1), r_cat))
    r_sl = _rand(rng, 2, 2)
    yield case("slice", [(4, 5)],
               lambda p: lambda: _project_loss(
                   T.slice_(p[0], (slice(1, 3), slice(0, 4, 2))), r_sl))
    r_rs = _rand(rng, 6, 2)
    yield case("reshape", [(3, 4)],
               lambda p: lambda: _project_loss(T.reshape(p[0], (6, 2)), r_rs))
    r_tr = _rand(rng, 4, 2, 3)
    yield case("transpose", [(2, 3, 4)],
               lambda p: lambda: _project_loss(
                   T.transpose(p[0], (2, 0, 1)), r_tr))
    r_bc = _rand(rng, 2, 3, 4)
    yield case("broadcast", [(1, 3, 1)],
               lambda p: lambda: _project_loss(
                   T.broadcast_to(p[0], (2, 3, 4)), r_bc))
    r_pad = _rand(rng, 5, 4)
    yield case("pad", [(3, 4)],
               lambda p: lambda: _project_loss(
                   T.pad(p[0], ((1, 1), (0, 0))), r_pad))
    r_mean = _rand(rng, 3)
    yield case("mean", [(3, 4)],
               lambda p: lambda: _project_loss(T.mean(p[0], axis=1), r_mean))
    yield case("mean_all", [(3, 4)],
               lambda p: lambda: T.mean(p[0]))
    r_sum = _rand(rng, 4)
    yield case("sum", [(3, 4)],
               lambda p: lambda: _project_loss(T.sum_(p[0], axis=0), r_sum))
    yield case("relu", [(3, 4)],
               lambda p: lambda: _project_loss(T.relu(p[0]), r34))
    yield case("sigmoid", [(3, 4)],
               lambda p: lambda: _project_loss(T.sigmoid(p[0]), r34))
    yield case("softmax", [(3, 4)],
               lambda p: lambda: _project_loss(T.softmax(p[0], axis=-1), r34))
    r_cl = _rand(rng, 2, 3, 5)
    yield case("channel_linear", [(2, 3, 4), (4, 5), (5,)],
               lambda p: lambda: _project_loss(
                   T.channel_linear(p[0], p[1], p[2]), r_cl))
    r_bl = _rand(rng, 2, 4, 6, 3)
    yield case("bilinear_resize", [(2, 3, 3, 3)],
               lambda p: lambda: _project_loss(
                   T.bilinear_resize(p[0], 4, 6), r_bl))
    labels = rng.integers(0, 4, size=3)
    yield case("cross_entropy", [(3, 4)],
               lambda p: lambda: T.cross_entropy(p[0], labels))


def check_primitives(seed: int = 0, cases_per_op: int = 20,
                     rel_tol: float = 1e-4) -> dict:
    """FD-check every primitive on `cases_per_op` random instances.

    Returns {primitive name: max relative error}; raises nothing, callers
    compare against rel_tol themselves.
    """
    worst: dict[str, float] = {}
    for k in range(cases_per_op):
        rng = np.random.default_rng((seed, k))
        for name, store, loss_fn in primitive_cases(rng):
            err = check_loss_fn(loss_fn, store)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def check_attention_ops(seed: int = 0, instances: int = 20,
                        max_entries: int = 25,
                        shape=(2, 3, 3, 4)) -> dict:
    """FD-check all 96 attention-op configurations.

    For each (dimension, type, activation, gating, kv-source) combination,
    `instances` random parameterizations are checked on a small input; both
    parameters and the op inputs take part. Returns {config key: max rel err}.
    """
    from . import ops

    t, h, w, c_in = shape
    results: dict[str, float] = {}
    config_idx = 0
    for dim in ops.DIMENSIONS:
        for op_type in ops.OP_TYPES:
            for act in ops.ACTIVATIONS:
                for gating in (False, True):
                    for kv in ops.KV_SOURCES:
                        key = f"{dim}/{op_type}/{act}/gate={gating}/kv={kv}"
                        config_idx += 1
                        spec = ops.AttentionOpSpec(
                            dimension=dim, op_type=op_type, activation=act,
                            use_gating=gating, input_indices=(0,),
                            c_prime=2, c_out=3)
                        worst = 0.0
                        for k in range(instances):
                            rng = np.random.default_rng((seed, config_idx, k))
                            store = T.ParameterStore()
                            f_in = store.add_array("f_in", _rand(rng, t, h, w, c_in))
                            f_0 = store.add_array("f_0", _rand(rng, t, h, w, c_in))
                            params = ops.AttentionOpParams.create(
                                store, "op", spec, kv_source=kv,
                                input_shape=(t, h, w, c_in),
                                cell_input_channels=c_in, rng=rng)
                            # jitter every parameter: zero-initialized biases
                            # would otherwise park relu/gate paths exactly on
                            # their kinks, where FD is undefined
                            for name, p in store.items():
                                if name.startswith("op/"):
                                    p.data = p.data + 0.2 * _rand(rng, *p.shape)
                            r = _rand(rng, t, h, w, spec.c_out)

                            def loss_fn():
                                out = ops.run_attention_op(
                                    spec, f_in, f_0, params, kv_source=kv)
                                return _project_loss(out, r)

                            err = check_loss_fn(loss_fn, store,
                                                max_entries=max_entries, rng=rng)
                            worst = max(worst, err)
                        results[key] = worst
    return results
