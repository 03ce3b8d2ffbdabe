"""Desk-scale substrate: toy 3D-conv backbone with declared insertion
points, a synthetic ordered-pattern video task, trainer, and evaluator.

The task is built so the class label depends on the temporal ORDER of two
short pattern events separated by at least half the clip; the backbone's
temporal receptive field (7 frames, three 3x3x3 convs) can detect the
patterns but never sees both events at once, so order information only
becomes available to modules that mix far-apart frames.
"""

from __future__ import annotations

import csv
import itertools
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T

CLIP_SHAPE = (16, 16, 16, 3)  # (T, H, W, C)
N_CLASSES = 4
INSERTION_POINTS = ("after_stage1", "after_stage2")

def conv3d(x, w, b, stride=(1, 1, 1), kernel=(3, 3, 3)):
    """Direct convolution ("same" zero padding): pad, then accumulate one
    channel-linear term per kernel offset. w has shape
    (prod(kernel), C_in, C_out) with offsets ordered (dt, dh, dw),
    dt slowest. Kernel dims must be odd.
    """
    x = T.as_tensor(x)
    w = T.as_tensor(w)
    if x.ndim != 5:
        raise T.ShapeError(f"conv3d expects (B,T,H,W,C) input, got {x.shape}")
    kt, kh, kw = kernel
    if any(k % 2 == 0 for k in kernel):
        raise ValueError(f"kernel dims must be odd, got {kernel}")
    n_taps = kt * kh * kw
    if w.ndim != 3 or w.shape[0] != n_taps or w.shape[1] != x.shape[-1]:
        raise T.ShapeError(
            f"conv3d weight {w.shape} incompatible with input {x.shape} "
            f"and kernel {kernel}")
    _, t, h, wd, cin = x.shape
    cout = w.shape[2]
    st, sh, sw = stride
    out_t, out_h, out_w = -(-t // st), -(-h // sh), -(-wd // sw)
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    xpad = T.pad(x, ((0, 0), (pt, pt), (ph, ph), (pw, pw), (0, 0)))
    acc = None
    offsets = itertools.product(range(kt), range(kh), range(kw))
    for k, (dt, dh, dw) in enumerate(offsets):
        sl = (slice(None),
              slice(dt, dt + (out_t - 1) * st + 1, st),
              slice(dh, dh + (out_h - 1) * sh + 1, sh),
              slice(dw, dw + (out_w - 1) * sw + 1, sw),
              slice(None))
        xs = T.slice_(xpad, sl)
        wk = T.reshape(T.slice_(w, (slice(k, k + 1),)), (cin, cout))
        term = T.channel_linear(xs, wk)
        acc = term if acc is None else T.add(acc, term)
    return T.add(acc, b)


class ToyBackbone:
    """stem 3x3x3 (stride (1,2,2)) -> two 1x3x3 stages (second strided
    (1,2,2) spatially), ReLU after every conv, global average pool, linear
    head. Only the stem mixes time, so the temporal receptive field is 3
    frames; cells plug in at the named insertion points and must preserve
    the feature shape there."""

    STAGE_KERNEL = (1, 3, 3)

    def __init__(self, store: T.ParameterStore, rng,
                 channels=(8, 16, 24), n_classes: int = N_CLASSES,
                 in_channels: int = 3, prefix: str = "net"):
        c_stem, c1, c2 = channels
        self.store = store
        self.prefix = prefix
        self.channels = tuple(channels)
        self.n_classes = n_classes

        def conv_params(name, cin, cout, kernel):
            taps = int(np.prod(kernel))
            w = store.create(f"{prefix}/{name}_w", (taps, cin, cout), rng,
                             fan_in=taps * cin)
            b = store.create(f"{prefix}/{name}_b", (cout,), rng, init="zeros")
            return w, b

        self.stem = conv_params("stem", in_channels, c_stem, (3, 3, 3))
        self.stage1 = conv_params("stage1", c_stem, c1, self.STAGE_KERNEL)
        self.stage2 = conv_params("stage2", c1, c2, self.STAGE_KERNEL)
        self.head_w = store.create(f"{prefix}/head_w", (c2, n_classes), rng,
                                   fan_in=c2)
        self.head_b = store.create(f"{prefix}/head_b", (n_classes,), rng,
                                   init="zeros")

    def insertion_channels(self) -> dict:
        return {"after_stage1": self.channels[1],
                "after_stage2": self.channels[2]}

    def insertion_shapes(self, clip_shape=CLIP_SHAPE) -> dict:
        t, h, w, _ = clip_shape
        return {"after_stage1": (t, -(-h // 2), -(-w // 2), self.channels[1]),
                "after_stage2": (t, -(-h // 4), -(-w // 4), self.channels[2])}

    def forward(self, clips, inserts=None):
        inserts = dict(inserts or {})
        unknown = set(inserts) - set(INSERTION_POINTS)
        if unknown:
            raise ValueError(f"unknown insertion points {sorted(unknown)}")
        x = T.as_tensor(clips)
        x = T.relu(conv3d(x, *self.stem, stride=(1, 2, 2)))
        x = T.relu(conv3d(x, *self.stage1, kernel=self.STAGE_KERNEL))
        if "after_stage1" in inserts:
            x = inserts["after_stage1"](x)
        x = T.relu(conv3d(x, *self.stage2, stride=(1, 2, 2),
                          kernel=self.STAGE_KERNEL))
        if "after_stage2" in inserts:
            x = inserts["after_stage2"](x)
        pooled = T.mean(x, axis=(1, 2, 3))
        return T.channel_linear(pooled, self.head_w, self.head_b)


# ---------------------------------------------------------------------------
# synthetic ordered-pattern task

# each class is an ordered pair of pattern events; the *set* of patterns
# identifies the class pair, the order picks the member
_CLASS_EVENTS = ((0, 1), (1, 0), (2, 3), (3, 2))
_PATTERN_TINTS = ((1.0, 0.3, 0.3), (0.3, 1.0, 0.3),
                  (0.3, 0.3, 1.0), (0.9, 0.9, 0.2))
_EVENT_LEN = 2
_MIN_GAP = 8  # >= T/2; far beyond the backbone's 3-frame receptive field
# events never sit within the temporal receptive field of a zero-padded
# boundary unit, so pooled conv features carry no absolute-position signal
_EDGE_MARGIN = 2


def _pattern_image(pattern: int, h: int, w: int, c: int, rng) -> np.ndarray:
    """A soft blob in the pattern's quadrant with its channel tint."""
    qh, qw = h // 2, w // 2
    corner = ((0, 0), (qh, qw), (0, qw), (qh, 0))[pattern]
    cy = corner[0] + qh / 2.0 + rng.uniform(-1.0, 1.0)
    cx = corner[1] + qw / 2.0 + rng.uniform(-1.0, 1.0)
    yy, xx = np.mgrid[0:h, 0:w]
    bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * 1.8 ** 2))
    tint = np.asarray(_PATTERN_TINTS[pattern][:c])
    return 2.0 * bump[:, :, None] * tint[None, None, :]


def make_clip(rng, label: int, clip_shape=CLIP_SHAPE,
              noise: float = 0.25) -> np.ndarray:
    t, h, w, c = clip_shape
    clip = rng.normal(0.0, noise, size=clip_shape)
    first, second = _CLASS_EVENTS[label]
    last_start = t - _EVENT_LEN - _EDGE_MARGIN  # second event must fit
    t1 = int(rng.integers(_EDGE_MARGIN, last_start - _MIN_GAP + 1))
    t2 = int(rng.integers(t1 + _MIN_GAP, last_start + 1))
    for pattern, start in ((first, t1), (second, t2)):
        img = _pattern_image(pattern, h, w, c, rng)
        for dt in range(_EVENT_LEN):
            clip[start + dt] += img
    return clip.astype(np.float32)


@dataclass
class Dataset:
    clips: np.ndarray  # (N, T, H, W, C) float32
    labels: np.ndarray  # (N,) uint8
    seed: int

    def __len__(self):
        return len(self.labels)


def _build(rng, n: int, seed: int, clip_shape, noise) -> Dataset:
    labels = np.arange(n) % N_CLASSES
    labels = rng.permutation(labels).astype(np.uint8)
    clips = np.stack([make_clip(rng, int(lab), clip_shape, noise)
                      for lab in labels])
    return Dataset(clips=clips, labels=labels, seed=seed)


def generate_dataset(n_train: int, n_val: int, seed: int = 0,
                     clip_shape=CLIP_SHAPE, noise: float = 0.25):
    """Seeded, class-balanced train/val datasets (balanced exactly when the
    sizes divide by the class count)."""
    if n_train <= 0 or n_val <= 0:
        raise ValueError("dataset sizes must be positive")
    train = _build(np.random.default_rng((seed, 0)), n_train, seed,
                   clip_shape, noise)
    val = _build(np.random.default_rng((seed, 1)), n_val, seed,
                 clip_shape, noise)
    return train, val


def search_split(train: Dataset, val_fraction: float = 0.25,
                 seed: int = 0):
    """Disjoint search-train/search-val subsets carved out of the training
    set only; per-class round-robin keeps both halves balanced."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    rng = np.random.default_rng((train.seed, seed, 2))
    val_idx, train_idx = [], []
    for label in range(N_CLASSES):
        members = rng.permutation(np.flatnonzero(train.labels == label))
        n_val = max(1, int(round(len(members) * val_fraction)))
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    train_idx = np.sort(np.asarray(train_idx))
    val_idx = np.sort(np.asarray(val_idx))
    st = Dataset(train.clips[train_idx], train.labels[train_idx], train.seed)
    sv = Dataset(train.clips[val_idx], train.labels[val_idx], train.seed)
    return st, sv


_DATA_MAGIC = b"ATDS"


def save_dataset(path, ds: Dataset) -> None:
    header = json.dumps({"shape": list(ds.clips.shape), "seed": ds.seed},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_DATA_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(ds.clips.astype("<f4").tobytes())
        f.write(ds.labels.astype(np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        if f.read(4) != _DATA_MAGIC:
            raise ValueError(f"{path} is not a dataset cache file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        shape = tuple(header["shape"])
        n = int(np.prod(shape))
        clips = np.frombuffer(f.read(n * 4), dtype="<f4").reshape(shape)
        labels = np.frombuffer(f.read(shape[0]), dtype=np.uint8)
    return Dataset(clips=clips.copy(), labels=labels.copy(),
                   seed=int(header["seed"]))


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.08
    warmup_steps: int = 10
    momentum: float = 0.9
    seed: int = 0
    clip_norm: float | None = None  # global grad-norm cap, None disables

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.warmup_steps < 0:
            raise ValueError("lr and warmup_steps must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warm-up to config.lr, then cosine decay toward zero."""
    if config.lr == 0.0:
        return 0.0
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    span = max(total_steps - config.warmup_steps, 1)
    progress = (step - config.warmup_steps) / span
    return 0.5 * config.lr * (1.0 + np.cos(np.pi * progress))


def _logits_for(forward_fn, clips: np.ndarray):
    return forward_fn(T.constant(np.asarray(clips, dtype=T.default_dtype())))


def _topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    topk = np.argsort(-logits, axis=1)[:, :k]
    return int(np.sum(topk == labels[:, None]))


def evaluate(forward_fn, ds: Dataset, batch_size: int = 64) -> dict:
    """Full-pass loss and top-1/top-2 accuracy."""
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    hits1 = hits2 = 0
    loss_sum = 0.0
    for start in range(0, len(ds), batch_size):
        clips = ds.clips[start:start + batch_size]
        labels = ds.labels[start:start + batch_size].astype(np.int64)
        logits = _logits_for(forward_fn, clips)
        loss = T.cross_entropy(logits, labels)
        loss_sum += loss.item() * len(labels)
        hits1 += _topk_hits(logits.data, labels, 1)
        hits2 += _topk_hits(logits.data, labels, 2)
    n = len(ds)
    return {"loss": loss_sum / n, "top1": hits1 / n, "top2": hits2 / n}


def train(forward_fn, store: T.ParameterStore, train_ds: Dataset,
          val_ds: Dataset, config: TrainConfig, metrics_path=None) -> list:
    """SGD with momentum under warm-up + cosine schedule. Returns per-epoch
    metric rows (epoch, split, loss, top1, top2); non-finite loss aborts.
    Steps whose scheduled lr is zero leave parameters untouched; with
    clip_norm set, gradients are rescaled to that global l2 norm first."""
    config.validate()
    n = len(train_ds)
    steps_per_epoch = -(-n // config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    opt = T.SGD(store, lr=max(config.lr, 1e-30), momentum=config.momentum)
    metrics = []
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng((config.seed, epoch)).permutation(n)
        loss_sum, hits1, hits2 = 0.0, 0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            labels = train_ds.labels[idx].astype(np.int64)
            logits = _logits_for(forward_fn, train_ds.clips[idx])
            loss = T.cross_entropy(logits, labels)
            if not np.isfinite(loss.item()):
                raise T.NumericalError(f"loss diverged at step {step}")
            loss_sum += loss.item() * len(idx)
            hits1 += _topk_hits(logits.data, labels, 1)
            hits2 += _topk_hits(logits.data, labels, 2)
            lr = lr_at(step, total_steps, config)
            if lr > 0.0:
                grads = T.backward(loss, store)
                if config.clip_norm is not None:
                    norm = np.sqrt(sum(float(np.sum(g * g))
                                       for g in grads.values()))
                    if norm > config.clip_norm:
                        scale = config.clip_norm / norm
                        grads = {k: g * scale for k, g in grads.items()}
                opt.step(grads, lr=lr)
            step += 1
        # train row reports the epoch's running minibatch statistics; the
        # val row is a fresh full pass
        metrics.append({"epoch": epoch, "split": "train",
                        "loss": loss_sum / n, "top1": hits1 / n,
                        "top2": hits2 / n})
        metrics.append({"epoch": epoch, "split": "val",
                        **evaluate(forward_fn, val_ds)})
    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    return metrics


def write_metrics(path, metrics: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "split", "loss", "top1", "top2"])
        for row in metrics:
            writer.writerow([row["epoch"], row["split"],
                             f"{row['loss']:.8f}", f"{row['top1']:.6f}",
                             f"{row['top2']:.6f}"])


def read_metrics(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append({"epoch": int(row["epoch"]), "split": row["split"],
                        "loss": float(row["loss"]),
                        "top1": float(row["top1"]),
                        "top2": float(row["top2"])})
    return out


def single_frame_baseline(train_ds: Dataset, val_ds: Dataset,
                          frame: int | None = None, epochs: int = 30,
                          lr: float = 0.05, seed: int = 0) -> float:
    """Logistic regression on one flattened frame per clip; returns val
    top-1. The task hides class evidence from any single time step, so this
    should land near chance."""
    t = train_ds.clips.shape[1]
    frame = t // 2 if frame is None else frame
    feat_dim = int(np.prod(train_ds.clips.shape[2:]))

    def frames_of(ds):
        return ds.clips[:, frame].reshape(len(ds), feat_dim)

    store = T.ParameterStore()
    rng = np.random.default_rng(seed)
    w = store.create("sf/w", (feat_dim, N_CLASSES), rng)
    b = store.create("sf/b", (N_CLASSES,), rng, init="zeros")
    x_train = frames_of(train_ds)
    opt = T.SGD(store, lr=lr, momentum=0.9)
    n = len(train_ds)
    for epoch in range(epochs):
        order = np.random.default_rng((seed, epoch)).permutation(n)
        for start in range(0, n, 64):
            idx = order[start:start + 64]
            logits = T.channel_linear(T.constant(
                x_train[idx].astype(T.default_dtype())), w, b)
            loss = T.cross_entropy(logits,
                                   train_ds.labels[idx].astype(np.int64))
            opt.step(T.backward(loss, store))
    logits = T.channel_linear(T.constant(
        frames_of(val_ds).astype(T.default_dtype())), w, b)
    labels = val_ds.labels.astype(np.int64)
    return _topk_hits(logits.data, labels, 1) / len(val_ds)
