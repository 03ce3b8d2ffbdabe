"""End-to-end command tests: flag and config resolution, exit codes,
artifact layout, and byte-identical reruns from config.resolved.json."""

import json

import numpy as np
import pytest

from attnsearch import cell as cell_mod
from attnsearch import cli, ops
from attnsearch import tensor as T


def run(*args):
    return cli.main([str(a) for a in args])


def tiny_cell_dict(t_group=4):
    spec = cell_mod.CellSpec(
        ops=(ops.AttentionOpSpec("temporal", "map", "softmax", True,
                                 (0,), 4, 4),),
        kv_source="op_input", c_reduction=8, c_op=4, t_group=t_group,
        h_resize=4, w_resize=4)
    return spec.to_dict()


# --- resolution and error paths ---

def test_out_is_required():
    assert run("gradcheck", "--instances", 1) == 2


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run("gradcheck", "--config", cfg, "--out", tmp_path / "o") == 2


def test_malformed_config_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    assert run("gradcheck", "--config", cfg, "--out", tmp_path / "o") == 2


def test_missing_config_file_rejected(tmp_path):
    assert run("gradcheck", "--config", tmp_path / "nope.json",
               "--out", tmp_path / "o") == 2


def test_bad_choice_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("search-diff", "--preset", "sg9", "--out", tmp_path / "o")
    assert exc.value.code == 2


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"instances": 7, "seed": 3}))
    out = tmp_path / "o"
    assert run("gradcheck", "--config", cfg, "--instances", 2,
               "--max-entries", 4, "--out", out) == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["instances"] == 2  # flag wins
    assert resolved["seed"] == 3  # config survives where no flag given


# --- gradcheck ---

def test_gradcheck_report_and_rerun(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run("gradcheck", "--instances", 2, "--max-entries", 4,
               "--out", out1) == 0
    report = json.loads((out1 / "gradcheck.json").read_text())
    assert report["passed"] is True
    assert report["primitives_max_rel_err"] <= report["tolerance"]
    assert run("gradcheck", "--config", out1 / "config.resolved.json",
               "--out", out2) == 0
    assert ((out1 / "config.resolved.json").read_bytes()
            == (out2 / "config.resolved.json").read_bytes())
    assert ((out1 / "gradcheck.json").read_bytes()
            == (out2 / "gradcheck.json").read_bytes())


# --- render ---

def test_render_requires_cell(tmp_path):
    assert run("render", "--out", tmp_path / "o") == 2


def test_render_prints_and_writes(tmp_path, capsys):
    spec_path = tmp_path / "cell.json"
    spec_path.write_text(json.dumps(tiny_cell_dict()))
    out = tmp_path / "o"
    assert run("render", "--cell", spec_path, "--out", out) == 0
    printed = capsys.readouterr().out
    on_disk = (out / "cell.txt").read_text()
    assert printed.strip() == on_disk.strip()
    assert "temporal" in printed and "op" in printed


# --- train / eval ---

def test_train_eval_and_byte_identical_rerun(tmp_path):
    out1 = tmp_path / "t1"
    code = run("train", "--epochs", 2, "--n-train", 16, "--n-val", 8,
               "--batch-size", 8, "--lr", 0.05, "--out", out1)
    assert code == 0
    for name in ("config.resolved.json", "metrics.csv", "model.ckpt",
                 "summary.json"):
        assert (out1 / name).is_file()
    summary = json.loads((out1 / "summary.json").read_text())

    out_eval = tmp_path / "e1"
    assert run("eval", "--source", out1, "--out", out_eval) == 0
    result = json.loads((out_eval / "eval.json").read_text())
    assert result["split"] == "val"
    assert result["top1"] == pytest.approx(summary["final_val"]["top1"])

    out2 = tmp_path / "t2"
    assert run("train", "--config", out1 / "config.resolved.json",
               "--out", out2) == 0
    assert ((out1 / "metrics.csv").read_bytes()
            == (out2 / "metrics.csv").read_bytes())
    assert ((out1 / "config.resolved.json").read_bytes()
            == (out2 / "config.resolved.json").read_bytes())


def test_train_pretrain_phase_metrics(tmp_path):
    from attnsearch import harness as H
    out = tmp_path / "o"
    assert run("train", "--pretrain-epochs", 2, "--epochs", 1,
               "--n-train", 16, "--n-val", 8, "--batch-size", 8,
               "--out", out) == 0
    rows = H.read_metrics(out / "metrics.csv")
    epochs = sorted({r["epoch"] for r in rows})
    assert epochs == [0, 1, 2]  # two pretrain epochs then the main phase


def test_train_freeze_backbone(tmp_path):
    spec_path = tmp_path / "cell.json"
    spec_path.write_text(json.dumps(tiny_cell_dict()))
    common = ("--cell", spec_path, "--pretrain-epochs", 1, "--epochs", 1,
              "--n-train", 16, "--n-val", 8, "--batch-size", 8)
    out1, out2 = tmp_path / "frozen", tmp_path / "null"
    assert run("train", *common, "--freeze-backbone", "--lr", 0.05,
               "--out", out1) == 0
    assert run("train", *common, "--lr", 0, "--out", out2) == 0
    ck1 = T.load_checkpoint(out1 / "model.ckpt")
    ck2 = T.load_checkpoint(out2 / "model.ckpt")
    bb_names = [k for k in ck1 if not k.startswith("cell_")]
    cell_names = [k for k in ck1 if k.startswith("cell_")]
    assert bb_names and cell_names
    for k in bb_names:  # frozen run leaves the backbone at its phase-1 state
        assert np.array_equal(ck1[k], ck2[k])
    assert any(not np.array_equal(ck1[k], ck2[k]) for k in cell_names)


def test_train_with_cell_flag(tmp_path):
    spec_path = tmp_path / "cell.json"
    spec_path.write_text(json.dumps(tiny_cell_dict()))
    out = tmp_path / "o"
    assert run("train", "--cell", spec_path, "--epochs", 1,
               "--n-train", 16, "--n-val", 8, "--batch-size", 8,
               "--out", out) == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert set(resolved["cells"]) == {"after_stage1", "after_stage2"}
    ckpt = T.load_checkpoint(out / "model.ckpt")
    assert any(k.startswith("cell_after_stage1/op1/") for k in ckpt)
    assert any(k.startswith("cell_after_stage2/op1/") for k in ckpt)


def test_eval_corrupt_checkpoint_exits_3(tmp_path):
    out = tmp_path / "t"
    assert run("train", "--epochs", 1, "--n-train", 16, "--n-val", 8,
               "--batch-size", 8, "--out", out) == 0
    ckpt = T.load_checkpoint(out / "model.ckpt")
    name = sorted(ckpt)[0]
    ckpt[name] = np.full_like(ckpt[name], np.nan)
    T.save_checkpoint(out / "model.ckpt", ckpt)
    assert run("eval", "--source", out, "--out", tmp_path / "e") == 3


def test_eval_requires_train_run(tmp_path):
    assert run("eval", "--source", tmp_path / "missing",
               "--out", tmp_path / "o") == 2


# --- bandit search ---

def gpb_args(out, **over):
    base = dict(budget=6, k=2, pool_size=64, n_train=24, backbone_epochs=1,
                eval_epochs=1, batch_size=8)
    base.update(over)
    args = ["search-gpb", "--out", out]
    for key, value in base.items():
        args += [f"--{key.replace('_', '-')}", value]
    return args


def test_search_gpb_smoke_and_rerun(tmp_path):
    out1, out2 = tmp_path / "g1", tmp_path / "g2"
    assert run(*gpb_args(out1)) == 0
    lines = (out1 / "trials.jsonl").read_text().splitlines()
    assert len(lines) == 6
    records = [json.loads(line) for line in lines]
    assert [r["trial"] for r in records] == list(range(1, 7))
    assert all(r["wallclock_s"] == 0.0 for r in records)
    assert any(r["status"] == "ok" for r in records)
    best = json.loads((out1 / "best_cell.json").read_text())
    cell_mod.CellSpec.from_dict(best)  # parses and validates

    assert run("search-gpb", "--config", out1 / "config.resolved.json",
               "--out", out2) == 0
    assert ((out1 / "trials.jsonl").read_bytes()
            == (out2 / "trials.jsonl").read_bytes())
    assert ((out1 / "best_cell.json").read_bytes()
            == (out2 / "best_cell.json").read_bytes())


def test_search_gpb_record_time(tmp_path):
    out = tmp_path / "g"
    assert run(*gpb_args(out, budget=2), "--record-time") == 0
    records = [json.loads(line)
               for line in (out / "trials.jsonl").read_text().splitlines()]
    assert all(r["wallclock_s"] > 0.0 for r in records
               if r["status"] == "ok")


def test_search_gpb_workers_deterministic(tmp_path):
    out1, out2 = tmp_path / "w1", tmp_path / "w2"
    assert run(*gpb_args(out1, budget=4, workers=2)) == 0
    assert run(*gpb_args(out2, budget=4, workers=2)) == 0
    lines = (out1 / "trials.jsonl").read_text().splitlines()
    assert len(lines) == 4
    assert ((out1 / "trials.jsonl").read_bytes()
            == (out2 / "trials.jsonl").read_bytes())


def test_search_gpb_rejects_bad_budget(tmp_path):
    assert run(*gpb_args(tmp_path / "g", budget=0)) == 2


# --- differentiable search, derive, inherit ---

def diff_args(out, **over):
    base = dict(preset="sg1", backbone_epochs=1, epochs=1, n_train=16,
                batch_size=8, t_group=4, lr=0.05)
    base.update(over)
    args = ["search-diff", "--out", out]
    for key, value in base.items():
        args += [f"--{key.replace('_', '-')}", value]
    return args


def test_search_diff_derive_train_inherit(tmp_path):
    sg_out = tmp_path / "sg"
    assert run(*diff_args(sg_out)) == 0
    for name in ("cell.json", "cell.txt", "cell.sources.json",
                 "supergraph.ckpt", "metrics.csv", "config.resolved.json"):
        assert (sg_out / name).is_file()
    spec = cell_mod.CellSpec.from_json((sg_out / "cell.json").read_text())
    sources = json.loads((sg_out / "cell.sources.json").read_text())
    assert len(sources["nodes"]) == len(spec.ops)
    assert set(sources["prefixes"]) == {"after_stage1", "after_stage2"}

    # re-derivation from the checkpoint reproduces the same cell
    rd_out = tmp_path / "rd"
    assert run("derive", "--source", sg_out, "--out", rd_out) == 0
    assert ((sg_out / "cell.json").read_bytes()
            == (rd_out / "cell.json").read_bytes())

    # warm-started training accepts the derived cell and copies arrays
    tr_out = tmp_path / "tr"
    assert run("train", "--cell", sg_out / "cell.json",
               "--inherit-params", sg_out, "--epochs", 1,
               "--n-train", 16, "--n-val", 8, "--batch-size", 8,
               "--out", tr_out) == 0
    ckpt = T.load_checkpoint(tr_out / "model.ckpt")
    sg_ckpt = T.load_checkpoint(sg_out / "supergraph.ckpt")
    for point in ("after_stage1", "after_stage2"):
        want = sg_ckpt[f"sg_{point}/reduce_w"]
        # reduce kernels came from the search run (then trained 1 epoch,
        # so only shape agreement is guaranteed here)
        assert ckpt[f"cell_{point}/reduce_w"].shape == want.shape


def test_inherit_rejects_foreign_cell(tmp_path):
    sg_out = tmp_path / "sg"
    assert run(*diff_args(sg_out)) == 0
    foreign = tmp_path / "foreign.json"
    foreign.write_text(json.dumps(tiny_cell_dict()))
    derived = cell_mod.CellSpec.from_json((sg_out / "cell.json").read_text())
    if derived.to_dict() == tiny_cell_dict():
        pytest.skip("derived cell happens to equal the probe cell")
    assert run("train", "--cell", foreign, "--inherit-params", sg_out,
               "--epochs", 1, "--n-train", 16, "--n-val", 8,
               "--batch-size", 8, "--out", tmp_path / "t") == 2


def test_search_diff_specific_emits_cell_per_point(tmp_path):
    out = tmp_path / "sg"
    assert run(*diff_args(out, sharing="specific")) == 0
    assert (out / "cell_after_stage1.json").is_file()
    assert (out / "cell_after_stage2.json").is_file()
    assert not (out / "cell.json").exists()


def test_derive_rejects_train_run(tmp_path):
    tr_out = tmp_path / "t"
    assert run("train", "--epochs", 1, "--n-train", 16, "--n-val", 8,
               "--batch-size", 8, "--out", tr_out) == 0
    assert run("derive", "--source", tr_out, "--out", tmp_path / "d") == 2
