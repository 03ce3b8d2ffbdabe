"""Gaussian-process bandit search over discrete cell designs.

Cells are encoded as fixed-length one-hot vectors (single-input restriction:
each op picks exactly one earlier feature map). A Matérn-5/2 GP with
hyperparameters fit by maximizing log marginal likelihood models the score
surface; the next cell is the UCB argmax over a pool of random encodings
plus one-block flips of the best observed encoding.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy import optimize as sopt

from . import cell as cell_mod
from . import ops

_PER_OP = (("dimension", len(ops.DIMENSIONS)),
           ("type", len(ops.OP_TYPES)),
           ("activation", len(ops.ACTIVATIONS)),
           ("gating", 2))
_PER_OP_SIZE = sum(size for _, size in _PER_OP)


class CellEncoder:
    """Bijection between single-input CellSpecs with fixed K and one-hot
    vectors.

    Layout: for each op, one-hot blocks for dimension (3), type (2),
    activation (4), gating (2); for ops 2..K an input one-hot over the k
    earlier feature maps (the first op always reads f_0, so its block is
    omitted); finally the cell-level kv source (2).
    """

    def __init__(self, k: int = 4, c_prime: int = cell_mod.DEFAULT_C_PRIME,
                 c_op: int = cell_mod.DEFAULT_C_OP,
                 c_reduction: int = cell_mod.DEFAULT_C_REDUCTION,
                 t_group: int = cell_mod.DEFAULT_T_GROUP,
                 h_resize: int = cell_mod.DEFAULT_RESIZE[0],
                 w_resize: int = cell_mod.DEFAULT_RESIZE[1]):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.c_prime = min(c_prime, c_op)
        self.c_op = c_op
        self.c_reduction = c_reduction
        self.t_group = t_group
        self.h_resize = h_resize
        self.w_resize = w_resize
        blocks = []
        offset = 0
        for pos in range(1, k + 1):
            for label, size in _PER_OP:
                blocks.append((f"op{pos}/{label}", offset, size))
                offset += size
            if pos >= 2:
                blocks.append((f"op{pos}/input", offset, pos))
                offset += pos
        blocks.append(("kv_source", offset, 2))
        offset += 2
        self.blocks = tuple(blocks)
        self.length = offset

    def _block(self, name: str):
        for label, offset, size in self.blocks:
            if label == name:
                return offset, size
        raise KeyError(name)

    def encode(self, spec: cell_mod.CellSpec) -> np.ndarray:
        spec.validate()
        if spec.k != self.k:
            raise ValueError(f"spec has K={spec.k}, encoder expects {self.k}")
        vec = np.zeros(self.length)
        for pos, op in enumerate(spec.ops, start=1):
            if len(op.input_indices) != 1:
                raise ValueError(
                    f"op {pos} has {len(op.input_indices)} inputs; the "
                    f"bandit space restricts each op to a single input")
            for label, choices in (("dimension", ops.DIMENSIONS),
                                   ("type", ops.OP_TYPES),
                                   ("activation", ops.ACTIVATIONS)):
                offset, _ = self._block(f"op{pos}/{label}")
                value = {"dimension": op.dimension, "type": op.op_type,
                         "activation": op.activation}[label]
                vec[offset + choices.index(value)] = 1.0
            offset, _ = self._block(f"op{pos}/gating")
            vec[offset + int(op.use_gating)] = 1.0
            if pos >= 2:
                offset, size = self._block(f"op{pos}/input")
                vec[offset + op.input_indices[0]] = 1.0
        offset, _ = self._block("kv_source")
        vec[offset + ops.KV_SOURCES.index(spec.kv_source)] = 1.0
        return vec

    def decode(self, vec: np.ndarray) -> cell_mod.CellSpec:
        vec = np.asarray(vec)
        if vec.shape != (self.length,):
            raise ValueError(
                f"encoding has shape {vec.shape}, expected ({self.length},)")

        def pick(name: str) -> int:
            offset, size = self._block(name)
            block = vec[offset:offset + size]
            hot = np.flatnonzero(block == 1.0)
            if len(hot) != 1 or block.sum() != 1.0:
                raise ValueError(f"block '{name}' is not one-hot: {block}")
            return int(hot[0])

        op_specs = []
        for pos in range(1, self.k + 1):
            inputs = (0,) if pos == 1 else (pick(f"op{pos}/input"),)
            op_specs.append(ops.AttentionOpSpec(
                dimension=ops.DIMENSIONS[pick(f"op{pos}/dimension")],
                op_type=ops.OP_TYPES[pick(f"op{pos}/type")],
                activation=ops.ACTIVATIONS[pick(f"op{pos}/activation")],
                use_gating=bool(pick(f"op{pos}/gating")),
                input_indices=inputs, c_prime=self.c_prime, c_out=self.c_op))
        spec = cell_mod.CellSpec(
            ops=tuple(op_specs),
            kv_source=ops.KV_SOURCES[pick("kv_source")],
            c_reduction=self.c_reduction, c_op=self.c_op,
            t_group=self.t_group, h_resize=self.h_resize,
            w_resize=self.w_resize)
        spec.validate()
        return spec

    def random_encoding(self, rng) -> np.ndarray:
        vec = np.zeros(self.length)
        for _, offset, size in self.blocks:
            vec[offset + int(rng.integers(0, size))] = 1.0
        return vec

    def neighbors(self, vec: np.ndarray) -> list:
        """All encodings that change exactly one block's choice."""
        out = []
        for _, offset, size in self.blocks:
            hot = offset + int(np.flatnonzero(vec[offset:offset + size])[0])
            for alt in range(offset, offset + size):
                if alt == hot:
                    continue
                nb = vec.copy()
                nb[hot] = 0.0
                nb[alt] = 1.0
                out.append(nb)
        return out

    def enumerate_all(self):
        """Every valid encoding (use only for small K)."""
        sizes = [size for _, _, size in self.blocks]
        total = int(np.prod(sizes))
        for flat in range(total):
            vec = np.zeros(self.length)
            rest = flat
            for (_, offset, size) in self.blocks:
                vec[offset + rest % size] = 1.0
                rest //= size
            yield vec


# ---------------------------------------------------------------------------
# Gaussian process with a Matérn-5/2 kernel


@dataclass
class GpState:
    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)
    prior_mean: float
    ell: float
    sf2: float
    sn2: float
    chol: np.ndarray
    alpha: np.ndarray


def _matern52(a: np.ndarray, b: np.ndarray, ell: float,
              sf2: float) -> np.ndarray:
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * a @ b.T)
    d = np.sqrt(np.maximum(d2, 0.0))
    s = np.sqrt(5.0) * d / ell
    return sf2 * (1.0 + s + s * s / 3.0) * np.exp(-s)


def _chol_with_jitter(k: np.ndarray):
    jitter = 0.0
    for _ in range(8):
        try:
            return sla.cholesky(k + jitter * np.eye(len(k)), lower=True)
        except sla.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-6:
                break
    raise sla.LinAlgError("kernel matrix not positive definite at max jitter")


def _neg_log_marginal(log_params, x, y_centered):
    ell, sf2, sn2 = np.exp(log_params)
    k = _matern52(x, x, ell, sf2) + sn2 * np.eye(len(x))
    try:
        chol = _chol_with_jitter(k)
    except sla.LinAlgError:
        return 1e12
    alpha = sla.cho_solve((chol, True), y_centered)
    return float(0.5 * y_centered @ alpha + np.log(np.diag(chol)).sum()
                 + 0.5 * len(x) * np.log(2.0 * np.pi))


def gp_fit(x, y, fixed_noise: float | None = None) -> GpState:
    """Fit hyperparameters by multi-start L-BFGS on the log marginal
    likelihood; the prior mean is the running mean of the scores."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    prior_mean = float(y.mean())
    yc = y - prior_mean
    y_scale = max(float(yc.std()), 1e-3)

    bounds = [(np.log(0.1), np.log(100.0)),
              (np.log(1e-6), np.log(10.0)),
              (np.log(1e-8), np.log(1.0))]
    starts = []
    for ell0 in (1.0, 3.0, 9.0):
        starts.append([np.log(ell0), np.log(y_scale ** 2 + 1e-6),
                       np.log(1e-4)])
    if fixed_noise is not None:
        lo = np.log(max(fixed_noise, 1e-8))
        bounds[2] = (lo, lo + 1e-12)
        for s in starts:
            s[2] = lo

    best, best_val = None, np.inf
    for s0 in starts:
        res = sopt.minimize(_neg_log_marginal, np.array(s0),
                            args=(x, yc), method="L-BFGS-B", bounds=bounds)
        if res.fun < best_val:
            best, best_val = res.x, res.fun
    ell, sf2, sn2 = np.exp(best)
    k = _matern52(x, x, ell, sf2) + sn2 * np.eye(len(x))
    chol = _chol_with_jitter(k)
    alpha = sla.cho_solve((chol, True), yc)
    return GpState(x=x, y=y, prior_mean=prior_mean, ell=float(ell),
                   sf2=float(sf2), sn2=float(sn2), chol=chol, alpha=alpha)


def gp_posterior(state: GpState, x_new) -> tuple:
    """Posterior (mean, variance) arrays at the query encodings."""
    x_new = np.atleast_2d(np.asarray(x_new, dtype=np.float64))
    k_star = _matern52(state.x, x_new, state.ell, state.sf2)
    mean = state.prior_mean + k_star.T @ state.alpha
    v = sla.solve_triangular(state.chol, k_star, lower=True)
    var = state.sf2 + state.sn2 - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def ucb_beta(t: int, pool_size: int, delta: float = 0.1) -> float:
    """Exploration coefficient sqrt(2 log(|pool| t^2 pi^2 / (6 delta)))."""
    t = max(t, 1)
    return float(np.sqrt(2.0 * np.log(
        pool_size * t * t * np.pi ** 2 / (6.0 * delta))))


def suggest(state: GpState | None, encoder: CellEncoder, rng,
            observed_keys: set, t: int = 1, pool_size: int = 2048,
            beta: float | None = None) -> np.ndarray:
    """UCB argmax over a random pool plus 1-flip neighbors of the best
    observed encoding; never returns an already-observed encoding."""
    pool = [encoder.random_encoding(rng) for _ in range(pool_size)]
    if state is not None and len(state.y):
        best = state.x[int(np.argmax(state.y))]
        pool.extend(encoder.neighbors(best))
    fresh, seen = [], set()
    for enc in pool:
        key = enc.tobytes()
        if key in observed_keys or key in seen:
            continue
        seen.add(key)
        fresh.append(enc)
    if not fresh:
        raise ValueError("candidate pool is empty after removing observed")
    if state is None:
        return fresh[int(rng.integers(0, len(fresh)))]
    mean, var = gp_posterior(state, np.stack(fresh))
    if beta is None:
        beta = ucb_beta(t, len(fresh))
    scores = mean + beta * np.sqrt(var)
    return fresh[int(np.argmax(scores))]


def run_gpb(encoder: CellEncoder, evaluator, budget: int, seed: int = 0,
            out_path=None, pool_size: int = 2048,
            record_time: bool = False) -> list:
    """Bandit loop: seeded random phase, then fit-and-suggest.

    evaluator maps CellSpec -> score in [0, 1]; an exception marks the trial
    failed and keeps it out of the GP. Every trial is recorded (and appended
    to out_path as JSON lines when given). wallclock_s is recorded as 0.0
    unless record_time is set, keeping reruns byte-identical.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    n_seed = max(5, budget // 10)
    trials = []
    xs, ys = [], []
    observed_keys: set = set()
    for t in range(1, budget + 1):
        if t <= n_seed or not xs:
            enc = encoder.random_encoding(rng)
            tries = 0
            while enc.tobytes() in observed_keys and tries < 100:
                enc = encoder.random_encoding(rng)
                tries += 1
        else:
            state = gp_fit(np.stack(xs), np.array(ys))
            enc = suggest(state, encoder, rng, observed_keys, t=t,
                          pool_size=pool_size)
        observed_keys.add(enc.tobytes())
        spec = encoder.decode(enc)
        started = time.monotonic()
        try:
            score = float(evaluator(spec))
            status = "ok"
        except Exception:
            score, status = None, "failed"
        elapsed = time.monotonic() - started
        record = {
            "trial": t,
            "spec": spec.to_dict(),
            "encoding": [int(v) for v in enc],
            "score": score,
            "status": status,
            "wallclock_s": round(elapsed, 3) if record_time else 0.0,
            "seed": seed,
        }
        trials.append(record)
        if status == "ok":
            xs.append(enc)
            ys.append(score)
    if out_path is not None:
        with open(out_path, "w", encoding="utf-8") as f:
            for record in trials:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    return trials


def load_trials(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def best_trial(trials: list) -> dict:
    ok = [t for t in trials if t["status"] == "ok"]
    if not ok:
        raise ValueError("no successful trials")
    return max(ok, key=lambda t: (t["score"], -t["trial"]))
