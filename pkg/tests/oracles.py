"""Straight-line reference implementations used to pin expected values.

Everything here is plain numpy with explicit loops over attention positions,
written independently of the package's tensor engine. Tests compare package
outputs against these oracles; the oracles never import from attnsearch.
"""

import numpy as np


def linear(x, w, b=None):
    """Row-wise linear map with explicit loops; x: (..., D) -> (..., D_out)."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    n, d = x2.shape
    d_out = w.shape[1]
    out = np.zeros((n, d_out))
    for i in range(n):
        for j in range(d_out):
            s = 0.0 if b is None else float(b[j])
            for k in range(d):
                s += x2[i, k] * w[k, j]
            out[i, j] = s
    return out.reshape(lead + (d_out,))


def activation(x, name, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    if name == "none":
        return x.copy()
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if name == "softmax":
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    raise ValueError(name)


def view_2d(f, dimension):
    """Row-major 2D view per attention dimension; f is (T,H,W,C)."""
    t, h, w, c = f.shape
    if dimension == "temporal":
        out = np.zeros((t, h * w * c))
        for ti in range(t):
            for hi in range(h):
                for wi in range(w):
                    for ci in range(c):
                        out[ti, hi * (w * c) + wi * c + ci] = f[ti, hi, wi, ci]
        return out
    if dimension == "spatiotemporal":
        out = np.zeros((t * h * w, c))
        for ti in range(t):
            for hi in range(h):
                for wi in range(w):
                    out[ti * (h * w) + hi * w + wi, :] = f[ti, hi, wi, :]
        return out
    if dimension == "spatial":
        out = np.zeros((t, h * w, c))
        for ti in range(t):
            for hi in range(h):
                for wi in range(w):
                    out[ti, hi * w + wi, :] = f[ti, hi, wi, :]
        return out
    raise ValueError(dimension)


def view_2d_inverse(y, dimension, t, h, w):
    if dimension == "temporal":
        c = y.shape[-1] // (h * w)
    else:
        c = y.shape[-1]
    f = np.zeros((t, h, w, c))
    for ti in range(t):
        for hi in range(h):
            for wi in range(w):
                if dimension == "temporal":
                    for ci in range(c):
                        f[ti, hi, wi, ci] = y[ti, hi * (w * c) + wi * c + ci]
                elif dimension == "spatiotemporal":
                    f[ti, hi, wi, :] = y[ti * (h * w) + hi * w + wi, :]
                else:
                    f[ti, hi, wi, :] = y[ti, hi * w + wi, :]
    return f


def map_weights(f2d, p, act):
    """Diagonal attention weights: phi(MLP(avgpool(G1(f2d)))).

    f2d: (P, D) or (T, P, D) for the per-frame spatial case.
    p: dict with g1_w, g1_b, g2_hidden_w, g2_hidden_b, g2_out_w, g2_out_b.
    """
    h1 = linear(f2d, p["g1_w"], p["g1_b"])
    pooled = h1.mean(axis=-1)
    hidden = np.maximum(linear(pooled, p["g2_hidden_w"], p["g2_hidden_b"]), 0.0)
    scores = linear(hidden, p["g2_out_w"], p["g2_out_b"])
    return activation(scores, act, axis=-1)


def dot_weights(fq2d, fkv2d, p, act):
    """Full similarity matrix phi(G1(q) G2(kv)^T) with an explicit loop."""
    q = linear(fq2d, p["g1_w"], p["g1_b"])
    k = linear(fkv2d, p["g2_w"], p["g2_b"])
    lead = q.shape[:-2]
    qf = q.reshape((-1,) + q.shape[-2:])
    kf = k.reshape((-1,) + k.shape[-2:])
    nb, pq, cp = qf.shape
    pk = kf.shape[1]
    sim = np.zeros((nb, pq, pk))
    for b in range(nb):
        for i in range(pq):
            for j in range(pk):
                sim[b, i, j] = float(np.dot(qf[b, i], kf[b, j]))
    return activation(sim.reshape(lead + (pq, pk)), act, axis=-1)


def apply_weights(w, f_src, dimension, g3_w, g3_b):
    """Eq.-3 style application with loops: inv(W @ 2d(G3(f_src)))."""
    t, h, w_, _ = f_src.shape
    v = linear(f_src, g3_w, g3_b)
    v2 = view_2d(v, dimension)
    w = np.asarray(w, dtype=np.float64)
    if dimension == "spatial":
        out = np.zeros_like(v2)
        for ti in range(t):
            if w.ndim == 2:  # per-frame diagonal vectors
                for pi in range(v2.shape[1]):
                    out[ti, pi, :] = w[ti, pi] * v2[ti, pi, :]
            else:
                for pi in range(v2.shape[1]):
                    for pj in range(v2.shape[1]):
                        out[ti, pi, :] += w[ti, pi, pj] * v2[ti, pj, :]
    else:
        out = np.zeros_like(v2)
        if w.ndim == 1:
            for pi in range(v2.shape[0]):
                out[pi, :] = w[pi] * v2[pi, :]
        else:
            for pi in range(w.shape[0]):
                for pj in range(w.shape[1]):
                    out[pi, :] += w[pi, pj] * v2[pj, :]
    return view_2d_inverse(out, dimension, t, h, w_)


def gating(f, p):
    """Channel gate: sigmoid(MLP(global mean pool)) scales each channel."""
    t, h, w, c = f.shape
    pooled = np.zeros(c)
    for ci in range(c):
        pooled[ci] = f[:, :, :, ci].mean()
    hidden = np.maximum(
        linear(pooled[None, :], p["gate_hidden_w"], p["gate_hidden_b"]), 0.0)
    factor = 1.0 / (1.0 + np.exp(-linear(hidden, p["gate_out_w"],
                                         p["gate_out_b"])))
    factor = factor[0]
    out = np.zeros_like(f)
    for ci in range(c):
        out[:, :, :, ci] = f[:, :, :, ci] * factor[ci]
    return out


def attention_op(spec, f_in, f_0, p, kv_source):
    """Complete operation: reshape, weights, apply, optional gating.

    spec: dict with keys dimension, type, activation, gating.
    f_in, f_0: (T,H,W,C) numpy arrays. p: dict of parameter arrays.
    """
    dim = spec["dimension"]
    t, h, w, _ = f_in.shape
    fq2 = view_2d(f_in, dim)
    if spec["type"] == "map":
        wts = map_weights(fq2, p, spec["activation"])
        out = apply_weights(wts, f_in, dim, p["g3_w"], p["g3_b"])
    else:
        f_kv = f_0 if kv_source == "cell_input" else f_in
        fkv2 = view_2d(f_kv, dim)
        wts = dot_weights(fq2, fkv2, p, spec["activation"])
        out = apply_weights(wts, f_kv, dim, p["g3_w"], p["g3_b"])
    if spec["gating"]:
        out = gating(out, p)
    return out


def non_local_block(x, w_theta, w_phi, w_g):
    """Classic non-local attention on (T,H,W,C): softmax(theta phi^T) g.

    Written from the non-local-block formulation directly, not via the
    dimension/view machinery above. No biases, no output projection.
    """
    t, h, w, c = x.shape
    n = t * h * w
    flat = x.reshape(n, c)
    theta = flat @ w_theta
    phi = flat @ w_phi
    g = flat @ w_g
    sim = theta @ phi.T
    e = np.exp(sim - sim.max(axis=1, keepdims=True))
    attn = e / e.sum(axis=1, keepdims=True)
    return (attn @ g).reshape(t, h, w, w_g.shape[1])


def _softmax_vec(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def supergraph_unrolled(config, params, f0):
    """Unrolled m-level supergraph on one preprocessed sample.

    config: dict with m, n, node_table (flat list of (type, dimension)),
    kv_source, include_gating, activations.
    params: dict mapping "node{i}_{j}" to that node's array dict (attention
    arrays plus level_logits / activation_logits / gating_logits / sink_w /
    sink_b), plus "sink_logits". f0: (T,H,W,C) array. Returns the sink output
    (T,H,W,c_reduction); the caller applies projection and residual.
    """
    m, n = config["m"], config["n"]
    acts = config["activations"]
    node_out = {}
    prev = []
    for level in range(1, m + 1):
        current = []
        for index in range(1, n + 1):
            p = params[f"node{level}_{index}"]
            typ, dim = config["node_table"][(level - 1) * n + index - 1]
            if level == 1:
                f_in = f0
            else:
                lw = _softmax_vec(p["level_logits"])
                f_in = sum(lw[j] * prev[j] for j in range(n))
            fq2 = view_2d(f_in, dim)
            if typ == "map":
                scores = map_weights(fq2, p, "none")
                vsrc = f_in
            else:
                f_kv = f0 if config["kv_source"] == "cell_input" else f_in
                scores = dot_weights(fq2, view_2d(f_kv, dim), p, "none")
                vsrc = f_kv
            aw = _softmax_vec(p["activation_logits"])
            out = np.zeros(f_in.shape[:3] + (p["g3_w"].shape[1],))
            for a_i, act in enumerate(acts):
                w_act = activation(scores, act, axis=-1)
                out = out + aw[a_i] * apply_weights(w_act, vsrc, dim,
                                                    p["g3_w"], p["g3_b"])
            if config["include_gating"]:
                gw = _softmax_vec(p["gating_logits"])
                out = gw[0] * out + gw[1] * gating(out, p)
            node_out[(level, index)] = out
            current.append(out)
        prev = current
    sw = _softmax_vec(params["sink_logits"])
    total = None
    flat = 0
    for level in range(1, m + 1):
        for index in range(1, n + 1):
            p = params[f"node{level}_{index}"]
            proj = linear(node_out[(level, index)], p["sink_w"], p["sink_b"])
            term = sw[flat] * proj
            total = term if total is None else total + term
            flat += 1
    return total


def softmax_ce_grad(logits, label):
    """Analytic gradient of mean softmax cross-entropy for one sample."""
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    p[label] -= 1.0
    return p


def sgd_sequence(p0, grads, lr, momentum):
    """Plain-python momentum-SGD recurrence."""
    p, v = float(p0), 0.0
    for g in grads:
        v = momentum * v + g
        p = p - lr * v
    return p


def conv3d(x, w, b, stride=(1, 1, 1), kernel=(3, 3, 3)):
    """Direct "same" 3D convolution with explicit loops.

    x: (B, T, H, W, Cin); w: (prod(kernel), Cin, Cout) ordered as
    (dt, dh, dw) with dt slowest; output dims are ceil(dim / stride).
    """
    x = np.asarray(x, dtype=np.float64)
    bsz, t, h, wd, cin = x.shape
    cout = w.shape[2]
    st, sh, sw = stride
    kt, kh, kw = kernel
    out_t = -(-t // st)
    out_h = -(-h // sh)
    out_w = -(-wd // sw)
    out = np.zeros((bsz, out_t, out_h, out_w, cout))
    for bi in range(bsz):
        for ot in range(out_t):
            for oh in range(out_h):
                for ow in range(out_w):
                    for co in range(cout):
                        s = float(b[co])
                        for dt in range(kt):
                            ti = ot * st + dt - kt // 2
                            if not 0 <= ti < t:
                                continue
                            for dh in range(kh):
                                hi = oh * sh + dh - kh // 2
                                if not 0 <= hi < h:
                                    continue
                                for dw in range(kw):
                                    wi = ow * sw + dw - kw // 2
                                    if not 0 <= wi < wd:
                                        continue
                                    k = (dt * kh + dh) * kw + dw
                                    for ci in range(cin):
                                        s += x[bi, ti, hi, wi, ci] * w[k, ci, co]
                        out[bi, ot, oh, ow, co] = s
    return out
