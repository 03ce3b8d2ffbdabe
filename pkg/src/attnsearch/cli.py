"""Command-line entry point: searches, cell derivation, training,
evaluation, gradient checks, and rendering on the synthetic task.

Every command resolves its settings from defaults, an optional JSON config
file, and flags (flags win), writes the result to config.resolved.json in
the output directory, and is rerunnable from that file to identical
outputs under the same seed.

Both search commands pretrain the backbone once on the search-train split
and keep it frozen while candidates are scored on top of it; candidate
branches start live (zero_init_residual=False), since a dead residual
branch gets no usable gradient exactly when its mean output carries no
label information.
"""

from __future__ import annotations

import argparse
import collections
import concurrent.futures
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import cell as cell_mod
from . import gpb
from . import gradcheck
from . import harness as H
from . import supergraph as SG
from . import tensor as T


class ConfigError(ValueError):
    """Unusable configuration or arguments (exit code 2)."""


GRAD_TOLERANCE = 1e-4

_DEFAULTS = {
    "search-gpb": dict(seed=0, workers=1, budget=50, pool_size=2048, k=4,
                       n_train=256, val_fraction=0.25, backbone_epochs=45,
                       backbone_lr=0.2, eval_epochs=25, eval_lr=0.05,
                       eval_reps=1,
                       eval_warmup=10, batch_size=32, t_group=16,
                       noise=0.25, live_residual=True, record_time=False),
    "search-diff": dict(seed=0, workers=1, preset="sg2", sharing="agnostic",
                        alpha=3, beta=2, backbone_epochs=45, backbone_lr=0.2,
                        epochs=60, lr=0.03, warmup_steps=10, batch_size=32,
                        n_train=256, val_fraction=0.25, t_group=16,
                        noise=0.25, live_residual=True),
    "derive": dict(seed=0, workers=1, source=None, alpha=3, beta=2),
    "train": dict(seed=0, workers=1, epochs=30, lr=0.08, pretrain_epochs=0,
                  pretrain_lr=0.2, freeze_backbone=False, warmup_steps=10,
                  batch_size=32, n_train=256, n_val=128, noise=0.25,
                  cells={}, inherit_params=None, live_residual=True),
    "eval": dict(seed=0, workers=1, source=None, split="val"),
    "gradcheck": dict(seed=0, workers=1, instances=3, max_entries=8),
    "render": dict(seed=0, workers=1, cell=None),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnsearch",
        description="spatiotemporal attention cell search toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, *flag_specs, help=None):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory (required)")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        for flag, kwargs in flag_specs:
            p.add_argument(flag, **kwargs)
        return p

    intf = {"type": int}
    floatf = {"type": float}
    boolf = {"action": argparse.BooleanOptionalAction, "default": None}
    add("search-gpb",
        ("--budget", intf), ("--pool-size", intf), ("--k", intf),
        ("--n-train", intf), ("--val-fraction", floatf),
        ("--backbone-epochs", intf), ("--backbone-lr", floatf),
        ("--eval-epochs", intf), ("--eval-lr", floatf),
        ("--eval-reps", intf),
        ("--eval-warmup", intf), ("--batch-size", intf),
        ("--t-group", intf), ("--noise", floatf),
        ("--live-residual", boolf), ("--record-time", boolf),
        help="bandit search over single-input cells")
    add("search-diff",
        ("--preset", {"choices": tuple(SG.PRESETS)}),
        ("--sharing", {"choices": ("agnostic", "specific")}),
        ("--alpha", intf), ("--beta", intf),
        ("--backbone-epochs", intf), ("--backbone-lr", floatf),
        ("--epochs", intf), ("--lr", floatf), ("--warmup-steps", intf),
        ("--batch-size", intf), ("--n-train", intf),
        ("--val-fraction", floatf), ("--t-group", intf),
        ("--noise", floatf), ("--live-residual", boolf),
        help="differentiable supergraph search plus cell derivation")
    add("derive",
        ("--source", {}), ("--alpha", intf), ("--beta", intf),
        help="re-derive cells from a finished search-diff run")
    add("train",
        ("--cell", {"help": "cell spec JSON inserted at every point"}),
        ("--inherit-params", {"help": "search-diff run dir to copy op "
                                      "parameters from"}),
        ("--epochs", intf), ("--lr", floatf),
        ("--pretrain-epochs", intf), ("--pretrain-lr", floatf),
        ("--freeze-backbone", boolf),
        ("--warmup-steps", intf), ("--batch-size", intf),
        ("--n-train", intf), ("--n-val", intf), ("--noise", floatf),
        ("--live-residual", boolf),
        help="train the backbone, optionally with inserted cells")
    add("eval",
        ("--source", {"help": "train run dir"}),
        ("--split", {"choices": ("train", "val")}),
        help="evaluate a finished training run")
    add("gradcheck",
        ("--instances", intf), ("--max-entries", intf),
        help="finite-difference check of primitives and attention ops")
    add("render",
        ("--cell", {"help": "cell spec JSON"}),
        help="print a cell as a text diagram")
    return parser


def _resolve(command: str, args) -> tuple:
    defaults = dict(_DEFAULTS[command])
    cfg = dict(defaults)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(
                f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    for dest, value in vars(args).items():
        if dest in ("command", "config", "out") or value is None:
            continue
        if dest in defaults:
            cfg[dest] = value
    if cfg.get("workers", 1) < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.get("budget", 1) < 1:
        raise ConfigError("budget must be >= 1")
    if args.out is None:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def _write_resolved(out: Path, cfg: dict) -> None:
    _write_json(out / "config.resolved.json", cfg)


def _load_cell_dict(value) -> dict:
    """Accept an inline spec dict or a path to a spec JSON file."""
    if isinstance(value, dict):
        spec = cell_mod.CellSpec.from_dict(value)
        return spec.to_dict()
    path = Path(value)
    if not path.is_file():
        raise ConfigError(f"cell spec file not found: {path}")
    spec = cell_mod.CellSpec.from_json(path.read_text())
    return spec.to_dict()


class _CellRunner:
    def __init__(self, spec, params):
        self.spec = spec
        self.params = params

    def __call__(self, f):
        return cell_mod.run_cell(self.spec, self.params, f)


def _pretrain_backbone(cfg: dict, train_ds, val_ds):
    """Train a fresh backbone alone; returns (backbone, its store, rows)."""
    store = T.ParameterStore()
    bb = H.ToyBackbone(store, np.random.default_rng(cfg["seed"]))
    rows = []
    if cfg["backbone_epochs"] > 0:
        pcfg = H.TrainConfig(epochs=cfg["backbone_epochs"],
                             batch_size=cfg["batch_size"],
                             lr=cfg["backbone_lr"], warmup_steps=10,
                             seed=cfg["seed"])
        rows = H.train(lambda x: bb.forward(x), store, train_ds, val_ds,
                       pcfg)
    return bb, store, rows


# ---------------------------------------------------------------------------
# GPB search

_DATASET_CACHE: dict = {}
_BACKBONE_CACHE: dict = {}


def _cached_dataset(path: str) -> H.Dataset:
    ds = _DATASET_CACHE.get(path)
    if ds is None:
        ds = H.load_dataset(path)
        _DATASET_CACHE[path] = ds
    return ds


def _cached_backbone(path: str) -> H.ToyBackbone:
    bb = _BACKBONE_CACHE.get(path)
    if bb is None:
        store = T.ParameterStore()
        bb = H.ToyBackbone(store, np.random.default_rng(0))
        store.load_state(T.load_checkpoint(path))
        _BACKBONE_CACHE[path] = bb
    return bb


def _spec_seed(spec_dict: dict, base_seed: int) -> int:
    """Deterministic per-spec evaluation seed, independent of trial order."""
    digest = hashlib.sha256(
        json.dumps(spec_dict, sort_keys=True).encode()).digest()
    return (int.from_bytes(digest[:4], "little") ^ (base_seed * 2654435761
                                                    & 0xFFFFFFFF))


def _evaluate_cell_payload(spec_dict: dict, payload: dict) -> float:
    """Desk evaluator: train the candidate's parameters on top of the
    frozen pretrained backbone using the search-train split, score best
    top-1 on the search-val split.

    With reps > 1 the candidate is retrained from `reps` different
    initializations and the scores averaged; escaping the dead-residual
    plateau is initialization-sensitive, so a multi-rep mean ranks
    robust cells above lucky ones."""
    spec = cell_mod.CellSpec.from_dict(spec_dict)
    st = _cached_dataset(payload["search_train"])
    sv = _cached_dataset(payload["search_val"])
    bb = _cached_backbone(payload["backbone"])
    base = _spec_seed(spec_dict, payload["seed"])
    scores = []
    for rep in range(payload.get("reps", 1)):
        seed = (base + rep) & 0xFFFFFFFF
        store = T.ParameterStore()
        rng = np.random.default_rng(seed)
        inserts = {}
        for point, channels in bb.insertion_channels().items():
            params = cell_mod.CellParams.create(
                store, f"cell_{point}", spec, channels, rng,
                zero_init_residual=not payload["live_residual"])
            inserts[point] = _CellRunner(spec, params)
        cfg = H.TrainConfig(epochs=payload["epochs"],
                            batch_size=payload["batch_size"],
                            lr=payload["lr"], warmup_steps=payload["warmup"],
                            seed=seed)
        metrics = H.train(lambda x: bb.forward(x, inserts=inserts), store,
                          st, sv, cfg)
        scores.append(max(r["top1"] for r in metrics if r["split"] == "val"))
    return float(np.mean(scores))


def _run_gpb_search(encoder: gpb.CellEncoder, payload: dict, budget: int,
                    seed: int, pool_size: int, workers: int,
                    record_time: bool, out_path: Path) -> list:
    """Bandit loop with up to `workers` evaluations in flight.

    Suggestions are made under the observations applied so far and results
    are applied in submission (FIFO) order, so a rerun with the same seed
    and worker count reproduces the trial file byte for byte.
    """
    rng = np.random.default_rng(seed)
    n_seed = max(5, budget // 10)
    observed: set = set()
    xs, ys, trials = [], [], []
    pending = collections.deque()
    executor = (concurrent.futures.ProcessPoolExecutor(max_workers=workers)
                if workers > 1 else None)

    def next_encoding(t):
        if t <= n_seed or not xs:
            enc = encoder.random_encoding(rng)
            tries = 0
            while enc.tobytes() in observed and tries < 100:
                enc = encoder.random_encoding(rng)
                tries += 1
            return enc
        state = gpb.gp_fit(np.stack(xs), np.array(ys))
        return gpb.suggest(state, encoder, rng, observed, t=t,
                           pool_size=pool_size)

    def submit(t):
        enc = next_encoding(t)
        observed.add(enc.tobytes())
        spec_dict = encoder.decode(enc).to_dict()
        started = time.monotonic()
        if executor is None:
            job = (spec_dict, payload)
        else:
            job = executor.submit(_evaluate_cell_payload, spec_dict, payload)
        pending.append((t, enc, spec_dict, job, started))

    try:
        with open(out_path, "w", encoding="utf-8") as f:
            next_t = 1
            while next_t <= budget or pending:
                while next_t <= budget and len(pending) < max(workers, 1):
                    submit(next_t)
                    next_t += 1
                t, enc, spec_dict, job, started = pending.popleft()
                try:
                    if executor is None:
                        score = float(_evaluate_cell_payload(*job))
                    else:
                        score = float(job.result())
                    status = "ok"
                except Exception:
                    score, status = None, "failed"
                elapsed = time.monotonic() - started
                record = {
                    "trial": t,
                    "spec": spec_dict,
                    "encoding": [int(v) for v in enc],
                    "score": score,
                    "status": status,
                    "wallclock_s": (round(elapsed, 3) if record_time
                                    else 0.0),
                    "seed": seed,
                }
                trials.append(record)
                f.write(json.dumps(record, sort_keys=True) + "\n")
                f.flush()
                if status == "ok":
                    xs.append(enc)
                    ys.append(score)
    finally:
        if executor is not None:
            executor.shutdown()
    return trials


def cmd_search_gpb(cfg: dict, out: Path) -> int:
    train, _ = H.generate_dataset(cfg["n_train"], 1, cfg["seed"],
                                  noise=cfg["noise"])
    st, sv = H.search_split(train, cfg["val_fraction"], seed=cfg["seed"])
    H.save_dataset(out / "search_train.bin", st)
    H.save_dataset(out / "search_val.bin", sv)
    bb, store_bb, rows = _pretrain_backbone(cfg, st, sv)
    T.save_checkpoint(out / "backbone.ckpt", store_bb.state_arrays())
    if rows:
        H.write_metrics(out / "backbone_metrics.csv", rows)
    encoder = gpb.CellEncoder(k=cfg["k"], t_group=cfg["t_group"])
    payload = {
        "search_train": str(out / "search_train.bin"),
        "search_val": str(out / "search_val.bin"),
        "backbone": str(out / "backbone.ckpt"),
        "epochs": cfg["eval_epochs"],
        "lr": cfg["eval_lr"],
        "warmup": cfg["eval_warmup"],
        "batch_size": cfg["batch_size"],
        "seed": cfg["seed"],
        "live_residual": cfg["live_residual"],
        "reps": cfg["eval_reps"],
    }
    trials = _run_gpb_search(encoder, payload, cfg["budget"], cfg["seed"],
                             cfg["pool_size"], cfg["workers"],
                             cfg["record_time"], out / "trials.jsonl")
    best = gpb.best_trial(trials)
    _write_json(out / "best_cell.json", best["spec"])
    spec = cell_mod.CellSpec.from_dict(best["spec"])
    (out / "best_cell.txt").write_text(cell_mod.render_cell(spec) + "\n",
                                       encoding="utf-8")
    print(f"best trial {best['trial']}: top-1 {best['score']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# differentiable search

def _capture_insertion_features(bb: H.ToyBackbone, ds, n: int = 64) -> dict:
    """Forward a fixed probe batch and record the features each insertion
    point would receive (used for node-scale calibration)."""
    captured = {}

    def probe(point):
        def hook(f):
            captured[point] = T.constant(f.data.copy())
            return f
        return hook

    clips = np.asarray(ds.clips[:n], dtype=T.default_dtype())
    bb.forward(T.constant(clips),
               inserts={p: probe(p) for p in bb.insertion_channels()})
    return captured


def _build_supergraph(cfg: dict, bb: H.ToyBackbone, store: T.ParameterStore,
                      rng, probe_features: dict | None = None):
    """One supergraph per insertion point; under agnostic sharing all
    points reuse one set of architecture logits. probe_features enables
    per-node output-scale calibration (skipped when the caller is about
    to overwrite the parameters from a checkpoint)."""
    sgconfig = SG.preset_config(cfg["preset"], t_group=cfg["t_group"])
    weights, inserts = {}, {}
    shared = None
    for point, channels in bb.insertion_channels().items():
        cw = SG.ConnectionWeights.create(
            store, f"sg_{point}", sgconfig, channels, rng,
            share_logits_from=shared if cfg["sharing"] == "agnostic"
            else None,
            zero_init_residual=not cfg.get("live_residual", False))
        if probe_features is not None:
            SG.calibrate_node_scales(sgconfig, cw, probe_features[point])
        if shared is None:
            shared = cw
        weights[point] = cw
        inserts[point] = _SupergraphRunner(sgconfig, cw)
    return weights, inserts, sgconfig


class _SupergraphRunner:
    def __init__(self, config, weights):
        self.config = config
        self.weights = weights

    def __call__(self, f):
        return SG.supergraph_forward(self.config, self.weights, f)


def _write_derived_cell(out: Path, name: str, spec, nodes,
                        prefixes: dict) -> None:
    _write_json(out / f"{name}.json", spec.to_dict())
    (out / f"{name}.txt").write_text(cell_mod.render_cell(spec) + "\n",
                                     encoding="utf-8")
    _write_json(out / f"{name}.sources.json", {
        "spec": spec.to_dict(),
        "nodes": [list(key) for key in nodes],
        "prefixes": prefixes,
    })


def _derive_and_write(cfg: dict, out: Path, weights: dict,
                      sgconfig) -> list:
    names = []
    if cfg["sharing"] == "agnostic":
        first_point = next(iter(weights))
        spec, nodes = SG.derive_cell_with_sources(
            sgconfig, weights[first_point], cfg["alpha"], cfg["beta"])
        prefixes = {point: f"sg_{point}" for point in weights}
        _write_derived_cell(out, "cell", spec, nodes, prefixes)
        names.append("cell")
    else:
        for point, cw in weights.items():
            spec, nodes = SG.derive_cell_with_sources(
                sgconfig, cw, cfg["alpha"], cfg["beta"])
            name = f"cell_{point}"
            _write_derived_cell(out, name, spec, nodes,
                                {point: f"sg_{point}"})
            names.append(name)
    return names


def cmd_search_diff(cfg: dict, out: Path) -> int:
    train, _ = H.generate_dataset(cfg["n_train"], 1, cfg["seed"],
                                  noise=cfg["noise"])
    st, sv = H.search_split(train, cfg["val_fraction"], seed=cfg["seed"])
    bb, store_bb, rows = _pretrain_backbone(cfg, st, sv)
    T.save_checkpoint(out / "backbone.ckpt", store_bb.state_arrays())
    store_sg = T.ParameterStore()
    weights, inserts, sgconfig = _build_supergraph(
        cfg, bb, store_sg, np.random.default_rng(cfg["seed"] + 1),
        probe_features=_capture_insertion_features(bb, st))
    tcfg = H.TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                         lr=cfg["lr"], warmup_steps=cfg["warmup_steps"],
                         seed=cfg["seed"])
    sg_rows = H.train(lambda x: bb.forward(x, inserts=inserts), store_sg,
                      st, sv, tcfg)
    for r in sg_rows:
        r["epoch"] += cfg["backbone_epochs"]
    H.write_metrics(out / "metrics.csv", rows + sg_rows)
    T.save_checkpoint(out / "supergraph.ckpt", store_sg.state_arrays())
    names = _derive_and_write(cfg, out, weights, sgconfig)
    final_val = [r for r in sg_rows if r["split"] == "val"][-1]
    print(f"search top-1 {final_val['top1']:.4f}; "
          f"derived: {', '.join(names)}")
    return 0


def cmd_derive(cfg: dict, out: Path) -> int:
    if not cfg["source"]:
        raise ConfigError("--source (a search-diff run directory) is "
                          "required")
    source = Path(cfg["source"])
    resolved = source / "config.resolved.json"
    if not resolved.is_file():
        raise ConfigError(f"no config.resolved.json under {source}")
    src_cfg = json.loads(resolved.read_text())
    if "preset" not in src_cfg:
        raise ConfigError(f"{source} is not a search-diff run")
    store_bb = T.ParameterStore()
    bb = H.ToyBackbone(store_bb, np.random.default_rng(src_cfg["seed"]))
    store_sg = T.ParameterStore()
    weights, _, sgconfig = _build_supergraph(
        src_cfg, bb, store_sg, np.random.default_rng(src_cfg["seed"] + 1))
    store_sg.load_state(T.load_checkpoint(source / "supergraph.ckpt"))
    merged = dict(src_cfg)
    merged["alpha"], merged["beta"] = cfg["alpha"], cfg["beta"]
    names = _derive_and_write(merged, out, weights, sgconfig)
    print(f"derived: {', '.join(names)}")
    return 0


# ---------------------------------------------------------------------------
# train / eval

def _normalize_cells(cfg: dict, cell_flag) -> None:
    if cell_flag is not None:
        spec_dict = _load_cell_dict(cell_flag)
        cfg["cells"] = {point: spec_dict for point in H.INSERTION_POINTS}
        return
    cells = cfg.get("cells") or {}
    unknown = set(cells) - set(H.INSERTION_POINTS)
    if unknown:
        raise ConfigError(f"unknown insertion points {sorted(unknown)}")
    cfg["cells"] = {point: _load_cell_dict(value)
                    for point, value in cells.items()}


def _build_train_model(cfg: dict):
    store = T.ParameterStore()
    rng = np.random.default_rng(cfg["seed"])
    bb = H.ToyBackbone(store, rng)
    channels = bb.insertion_channels()
    inserts = {}
    for point, spec_dict in cfg["cells"].items():
        spec = cell_mod.CellSpec.from_dict(spec_dict)
        params = cell_mod.CellParams.create(
            store, f"cell_{point}", spec, channels[point], rng,
            zero_init_residual=not cfg.get("live_residual", False))
        inserts[point] = _CellRunner(spec, params)
    return store, bb, inserts


def _inherit_params(store: T.ParameterStore, cfg: dict) -> int:
    """Copy trained supergraph op parameters into the inserted cells.

    The source search-diff run wrote, per derived cell, a sources file
    mapping op position -> supergraph node; only leaves both sides share
    are copied (projections stay fresh)."""
    source = Path(cfg["inherit_params"])
    ckpt = T.load_checkpoint(source / "supergraph.ckpt")
    copied = 0
    for point, spec_dict in cfg["cells"].items():
        side_path = source / f"cell_{point}.sources.json"
        if not side_path.is_file():
            side_path = source / "cell.sources.json"
        if not side_path.is_file():
            raise ConfigError(f"no derived-cell sources under {source}")
        side = json.loads(side_path.read_text())
        if side["spec"] != spec_dict:
            raise ConfigError(
                f"cell at {point} does not match the derived cell in "
                f"{side_path}; pass the cell JSON from the same run")
        prefix = side["prefixes"].get(point)
        if prefix is None:
            raise ConfigError(
                f"{side_path} has no parameters for point {point}")
        for k, (level, index) in enumerate(side["nodes"], start=1):
            node_tag = f"{prefix}/node{level}_{index}"
            for name, param in store.items():
                lead = f"cell_{point}/op{k}/"
                if not name.startswith(lead):
                    continue
                leaf = name[len(lead):]
                if leaf == "mix_logits":
                    continue
                src_name = f"{node_tag}/{leaf}"
                if src_name in ckpt:
                    param.data = np.array(ckpt[src_name],
                                          dtype=param.data.dtype)
                    copied += 1
        for leaf in ("reduce_w", "reduce_b"):
            src_name = f"{prefix}/{leaf}"
            dst = f"cell_{point}/{leaf}"
            if src_name in ckpt and dst in store:
                store[dst].data = np.array(ckpt[src_name],
                                           dtype=store[dst].data.dtype)
                copied += 1
    return copied


def cmd_train(cfg: dict, out: Path) -> int:
    train_ds, val_ds = H.generate_dataset(cfg["n_train"], cfg["n_val"],
                                          cfg["seed"], noise=cfg["noise"])
    store_bb = T.ParameterStore()
    rng = np.random.default_rng(cfg["seed"])
    bb = H.ToyBackbone(store_bb, rng)
    rows = []
    if cfg["pretrain_epochs"] > 0:
        pcfg = H.TrainConfig(epochs=cfg["pretrain_epochs"],
                             batch_size=cfg["batch_size"],
                             lr=cfg["pretrain_lr"],
                             warmup_steps=cfg["warmup_steps"],
                             seed=cfg["seed"])
        rows = H.train(lambda x: bb.forward(x), store_bb, train_ds, val_ds,
                       pcfg)
    # frozen backbone: cells live in their own store so the optimizer
    # never touches backbone parameters in the main phase
    store_cell = (T.ParameterStore() if cfg["freeze_backbone"]
                  else store_bb)
    channels = bb.insertion_channels()
    inserts = {}
    for point, spec_dict in cfg["cells"].items():
        spec = cell_mod.CellSpec.from_dict(spec_dict)
        params = cell_mod.CellParams.create(
            store_cell, f"cell_{point}", spec, channels[point], rng,
            zero_init_residual=not cfg.get("live_residual", False))
        inserts[point] = _CellRunner(spec, params)
    if cfg["inherit_params"]:
        copied = _inherit_params(store_cell, cfg)
        print(f"inherited {copied} parameter arrays")
    tcfg = H.TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                         lr=cfg["lr"], warmup_steps=cfg["warmup_steps"],
                         seed=cfg["seed"])
    main_rows = H.train(lambda x: bb.forward(x, inserts=inserts), store_cell,
                        train_ds, val_ds, tcfg)
    for r in main_rows:
        r["epoch"] += cfg["pretrain_epochs"]
    rows += main_rows
    H.write_metrics(out / "metrics.csv", rows)
    arrays = dict(store_bb.state_arrays())
    if store_cell is not store_bb:
        arrays.update(store_cell.state_arrays())
    T.save_checkpoint(out / "model.ckpt", arrays)
    val_rows = [r for r in rows if r["split"] == "val"]
    summary = {"final_val": val_rows[-1],
               "best_val_top1": max(r["top1"] for r in val_rows)}
    _write_json(out / "summary.json", summary)
    print(f"final val top-1 {val_rows[-1]['top1']:.4f} "
          f"(best {summary['best_val_top1']:.4f})")
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    if not cfg["source"]:
        raise ConfigError("--source (a train run directory) is required")
    source = Path(cfg["source"])
    resolved = source / "config.resolved.json"
    if not resolved.is_file():
        raise ConfigError(f"no config.resolved.json under {source}")
    src_cfg = json.loads(resolved.read_text())
    if "cells" not in src_cfg:
        raise ConfigError(f"{source} is not a train run")
    train_ds, val_ds = H.generate_dataset(
        src_cfg["n_train"], src_cfg["n_val"], src_cfg["seed"],
        noise=src_cfg["noise"])
    store, bb, inserts = _build_train_model(src_cfg)
    store.load_state(T.load_checkpoint(source / "model.ckpt"))
    ds = train_ds if cfg["split"] == "train" else val_ds
    result = H.evaluate(lambda x: bb.forward(x, inserts=inserts), ds)
    result["split"] = cfg["split"]
    _write_json(out / "eval.json", result)
    print(json.dumps(result, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# gradcheck / render

def cmd_gradcheck(cfg: dict, out: Path) -> int:
    prim = gradcheck.check_primitives(cfg["seed"],
                                      cases_per_op=cfg["instances"])
    ops_err = gradcheck.check_attention_ops(cfg["seed"],
                                            instances=cfg["instances"],
                                            max_entries=cfg["max_entries"])
    worst_p = max(prim.values())
    worst_o = max(ops_err.values())
    passed = worst_p <= GRAD_TOLERANCE and worst_o <= GRAD_TOLERANCE
    _write_json(out / "gradcheck.json", {
        "primitives_max_rel_err": worst_p,
        "attention_ops_max_rel_err": worst_o,
        "tolerance": GRAD_TOLERANCE,
        "passed": passed,
    })
    print(f"primitives {worst_p:.2e}, attention ops {worst_o:.2e} "
          f"(tolerance {GRAD_TOLERANCE:.0e}): "
          f"{'ok' if passed else 'FAILED'}")
    return 0 if passed else 3


def cmd_render(cfg: dict, out: Path) -> int:
    if not cfg["cell"]:
        raise ConfigError("--cell is required")
    spec = cell_mod.CellSpec.from_dict(_load_cell_dict(cfg["cell"]))
    text = cell_mod.render_cell(spec)
    (out / "cell.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


_DISPATCH = {
    "search-gpb": cmd_search_gpb,
    "search-diff": cmd_search_diff,
    "derive": cmd_derive,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "render": cmd_render,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg, out = _resolve(args.command, args)
        if args.command == "train":
            _normalize_cells(cfg, getattr(args, "cell", None))
        if args.command == "render" and getattr(args, "cell", None):
            cfg["cell"] = _load_cell_dict(args.cell)
        _write_resolved(out, cfg)
        return _DISPATCH[args.command](cfg, out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (T.NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
