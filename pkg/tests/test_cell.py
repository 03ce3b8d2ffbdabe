"""Tests for cell assembly: preprocessing round trips, the identity
guarantee at initialization, equivalence with loop oracles for single-op and
chained cells, shape fuzzing over random specs, and spec JSON round trips."""

import numpy as np
import pytest

import oracles
from attnsearch import cell, ops
from attnsearch import tensor as T


def _identity_conv(t, n):
    t.data = np.eye(n)


def _op_arrays(store, prefix):
    out = {}
    for name, tensor in store.items():
        if name.startswith(prefix + "/"):
            out[name[len(prefix) + 1:]] = tensor.data.copy()
    return out


def _simple_spec(k=2, **kw):
    defaults = dict(c_reduction=4, c_op=4, t_group=2, h_resize=2, w_resize=2)
    defaults.update(kw)
    op_list = []
    for pos in range(1, k + 1):
        op_list.append(ops.AttentionOpSpec(
            "temporal", "dot", "softmax", False,
            (0,) if pos == 1 else (pos - 1,), 2, defaults["c_op"]))
    return cell.CellSpec(ops=tuple(op_list), **defaults)


def test_preprocess_grouping_arithmetic():
    # 250 frames in groups of 64 -> 4 groups with 6 zero-pad frames
    spec = _simple_spec(k=1, c_reduction=2, c_op=2, t_group=64)
    store = T.ParameterStore()
    rng = np.random.default_rng(0)
    params = cell.CellParams.create(store, "cell", spec, input_channels=3,
                                    rng=rng)
    f = T.as_tensor(rng.normal(size=(1, 250, 2, 2, 3)))
    f0, restore = cell.preprocess(f, spec, params)
    assert restore.n_groups == 4 and restore.pad == 6
    assert f0.shape == (4, 64, 2, 2, 2)
    np.testing.assert_array_equal(f0.data[3, -6:], 0.0)
    assert not np.all(f0.data[3, :-6] == 0.0)


def test_preprocess_noop_configuration():
    spec = _simple_spec(k=1, c_reduction=3, c_op=3, t_group=2)
    store = T.ParameterStore()
    rng = np.random.default_rng(1)
    params = cell.CellParams.create(store, "cell", spec, input_channels=3,
                                    rng=rng)
    _identity_conv(params.reduce_w, 3)
    f = T.as_tensor(rng.normal(size=(2, 2, 2, 2, 3)))
    f0, restore = cell.preprocess(f, spec, params)
    np.testing.assert_allclose(f0.data, f.data, atol=1e-12)
    assert (restore.n_groups, restore.pad) == (1, 0)


def test_resize_constant_map():
    x = T.as_tensor(np.full((1, 2, 2, 3), 1.25))
    out = T.bilinear_resize(x, 4, 4)
    np.testing.assert_allclose(out.data, 1.25, atol=1e-12)


def test_postprocess_round_trip_axes():
    spec = _simple_spec(k=1, t_group=4, h_resize=3, w_resize=3)
    store = T.ParameterStore()
    rng = np.random.default_rng(2)
    params = cell.CellParams.create(store, "cell", spec, input_channels=5,
                                    rng=rng)
    f = T.as_tensor(rng.normal(size=(2, 7, 6, 5, 5)))
    f0, restore = cell.preprocess(f, spec, params)
    assert f0.shape == (4, 4, 3, 3, 4)
    back = cell.postprocess(f0, restore)
    assert back.shape == (2, 7, 6, 5, 4)


def test_postprocess_inconsistent_restore_errors():
    spec = _simple_spec(k=1)
    store = T.ParameterStore()
    rng = np.random.default_rng(3)
    params = cell.CellParams.create(store, "cell", spec, input_channels=3,
                                    rng=rng)
    f = T.as_tensor(rng.normal(size=(1, 4, 2, 2, 3)))
    f0, restore = cell.preprocess(f, spec, params)
    bad = cell.RestoreInfo(batch=2, t=4, h=2, w=2,
                           n_groups=restore.n_groups, pad=restore.pad,
                           channels=restore.channels)
    with pytest.raises(T.ShapeError):
        cell.postprocess(f0, bad)


def test_untrained_cell_is_exact_identity():
    rng = np.random.default_rng(4)
    for seed in range(3):
        spec = cell.random_cell_spec(np.random.default_rng(seed), k=3,
                                     c_reduction=4, c_op=4, t_group=2,
                                     h_resize=2, w_resize=2)
        store = T.ParameterStore()
        params = cell.CellParams.create(store, "cell", spec,
                                        input_channels=5,
                                        rng=np.random.default_rng(seed))
        f = rng.normal(size=(2, 5, 3, 3, 5))
        out = cell.run_cell(spec, params, T.as_tensor(f))
        np.testing.assert_array_equal(out.data, f)


def test_k1_cell_equals_non_local_block():
    # single spatiotemporal dot-product softmax op, values from the op input,
    # no-op preprocessing, identity convs -> x + non-local(x)
    op = ops.AttentionOpSpec("spatiotemporal", "dot", "softmax", False,
                             (0,), 3, 4)
    spec = cell.CellSpec(ops=(op,), kv_source="op_input", c_reduction=4,
                         c_op=4, t_group=2, h_resize=2, w_resize=2)
    store = T.ParameterStore()
    rng = np.random.default_rng(5)
    params = cell.CellParams.create(store, "cell", spec, input_channels=4,
                                    rng=rng)
    _identity_conv(params.reduce_w, 4)
    _identity_conv(params.combine_w, 4)
    _identity_conv(params.project_w, 4)
    opp = params.op_params[0]
    opp.g1_b.data = np.zeros(3)
    opp.g2_b.data = np.zeros(3)
    opp.g3_b.data = np.zeros(4)
    x = rng.normal(size=(2, 2, 2, 4))
    out = cell.run_cell(spec, params, T.as_tensor(x[None]))
    want = x + oracles.non_local_block(x, opp.g1_w.data, opp.g2_w.data,
                                       opp.g3_w.data)
    np.testing.assert_allclose(out.data[0], want, atol=1e-10)


def test_k4_chain_matches_composition_oracle():
    rng = np.random.default_rng(6)
    op_specs = []
    kinds = [("temporal", "map", "sigmoid", True),
             ("spatial", "dot", "softmax", False),
             ("spatiotemporal", "dot", "relu", True),
             ("temporal", "dot", "none", False)]
    for pos, (dim, typ, act, gate) in enumerate(kinds, start=1):
        op_specs.append(ops.AttentionOpSpec(
            dim, typ, act, gate, (0,) if pos == 1 else (pos - 1,), 2, 4))
    spec = cell.CellSpec(ops=tuple(op_specs), kv_source="cell_input",
                         c_reduction=4, c_op=4, t_group=2, h_resize=2,
                         w_resize=2)
    store = T.ParameterStore()
    params = cell.CellParams.create(store, "cell", spec, input_channels=4,
                                    rng=rng)
    _identity_conv(params.reduce_w, 4)
    params.project_w.data = rng.normal(size=(4, 4)) * 0.3
    params.project_b.data = rng.normal(size=4) * 0.1
    x = rng.normal(size=(2, 2, 2, 4))

    out = cell.run_cell(spec, params, T.as_tensor(x[None]))

    feats = [x]
    for pos, (dim, typ, act, gate) in enumerate(kinds, start=1):
        arrs = _op_arrays(store, f"cell/op{pos}")
        feats.append(oracles.attention_op(
            {"dimension": dim, "type": typ, "activation": act,
             "gating": gate},
            feats[pos - 1], feats[0], arrs, "cell_input"))
    chosen = np.concatenate(feats[1:], axis=-1)
    comb = oracles.linear(chosen, params.combine_w.data,
                          params.combine_b.data)
    proj = oracles.linear(comb, params.project_w.data, params.project_b.data)
    np.testing.assert_allclose(out.data[0], x + proj, atol=1e-10)


def test_mix_weights_are_distribution_and_seedable():
    op1 = ops.AttentionOpSpec("temporal", "dot", "none", False, (0,), 2, 4)
    op2 = ops.AttentionOpSpec("spatial", "dot", "none", False, (0,), 2, 4)
    op3 = ops.AttentionOpSpec("spatial", "map", "relu", False, (1, 2), 2, 4,
                              input_weights=(0.75, 0.25))
    spec = cell.CellSpec(ops=(op1, op2, op3), c_reduction=4, c_op=4,
                         t_group=2, h_resize=2, w_resize=2)
    store = T.ParameterStore()
    params = cell.CellParams.create(store, "cell", spec, input_channels=3,
                                    rng=np.random.default_rng(7))
    dists = cell.mixing_distributions(spec, params)
    assert set(dists) == {3}
    np.testing.assert_allclose(dists[3].sum(), 1.0, atol=1e-10)
    np.testing.assert_allclose(dists[3], [0.75, 0.25], atol=1e-10)


def test_pad_frames_never_leak_across_groups():
    spec = _simple_spec(k=2, t_group=4)
    store = T.ParameterStore()
    rng = np.random.default_rng(8)
    params = cell.CellParams.create(store, "cell", spec, input_channels=3,
                                    rng=rng)
    params.project_w.data = rng.normal(size=params.project_w.shape)
    base = rng.normal(size=(1, 5, 2, 2, 3))
    bumped = base.copy()
    bumped[0, 4] += rng.normal(size=(2, 2, 3))
    out_a = cell.run_cell(spec, params, T.as_tensor(base))
    out_b = cell.run_cell(spec, params, T.as_tensor(bumped))
    # frames 0..3 live in group 0; frame 4 (plus pads) in group 1
    np.testing.assert_allclose(out_a.data[0, :4], out_b.data[0, :4],
                               atol=1e-12)
    assert np.abs(out_a.data[0, 4] - out_b.data[0, 4]).max() > 1e-6


def test_gradients_reach_combined_ops():
    rng = np.random.default_rng(9)
    spec = cell.random_cell_spec(rng, k=3, c_reduction=4, c_op=4, t_group=2,
                                 h_resize=2, w_resize=2)
    store = T.ParameterStore()
    params = cell.CellParams.create(store, "cell", spec, input_channels=4,
                                    rng=rng)
    params.project_w.data = rng.normal(size=params.project_w.shape)
    f = T.as_tensor(rng.normal(size=(1, 4, 3, 3, 4)))
    out = cell.run_cell(spec, params, f)
    loss = T.sum_(T.mul(out, out))
    grads = T.backward(loss, store)
    for k in spec.combine_indices:
        norm = np.linalg.norm(grads[f"cell/op{k}/g1_w"])
        assert norm > 0, f"op {k} got no gradient"


def test_shape_contract_fuzz_200_specs():
    rng = np.random.default_rng(10)
    for trial in range(200):
        c_red = int(rng.integers(2, 6))
        c_op = int(rng.integers(1, c_red + 1))
        spec = cell.random_cell_spec(
            rng, k=int(rng.integers(1, 5)), c_reduction=c_red, c_op=c_op,
            t_group=int(rng.integers(1, 4)),
            h_resize=int(rng.integers(1, 4)),
            w_resize=int(rng.integers(1, 4)))
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 6)),
                 int(rng.integers(1, 5)), int(rng.integers(1, 5)),
                 int(rng.integers(1, 6)))
        store = T.ParameterStore()
        params = cell.CellParams.create(store, "cell", spec,
                                        input_channels=shape[-1], rng=rng)
        out = cell.run_cell(spec, params, T.as_tensor(rng.normal(size=shape)))
        assert out.shape == shape, f"trial {trial}: {out.shape} != {shape}"


def test_cell_deterministic():
    rng = np.random.default_rng(11)
    spec = cell.random_cell_spec(rng, k=3, c_reduction=4, c_op=4, t_group=2,
                                 h_resize=2, w_resize=2)
    f = np.random.default_rng(12).normal(size=(1, 4, 3, 3, 4))

    def run():
        store = T.ParameterStore()
        params = cell.CellParams.create(store, "cell", spec, input_channels=4,
                                        rng=np.random.default_rng(13))
        params.project_w.data = np.random.default_rng(14).normal(
            size=params.project_w.shape)
        return cell.run_cell(spec, params, T.as_tensor(f)).data

    np.testing.assert_array_equal(run(), run())


def test_cell_spec_json_roundtrip():
    rng = np.random.default_rng(15)
    spec = cell.random_cell_spec(rng, k=4)
    text = spec.to_json()
    again = cell.CellSpec.from_json(text)
    assert again == spec
    d = spec.to_dict()
    assert d["K"] == 4 and len(d["ops"]) == 4
    d["K"] = 7
    with pytest.raises(ValueError):
        cell.CellSpec.from_dict(d)


def test_cell_spec_validation_errors():
    good = ops.AttentionOpSpec("temporal", "dot", "none", False, (0,), 2, 4)
    with pytest.raises(ValueError):  # first op must take f_0
        cell.CellSpec(ops=(ops.AttentionOpSpec(
            "temporal", "dot", "none", False, (1,), 2, 4),)).validate()
    with pytest.raises(ValueError):  # forward reference
        cell.CellSpec(ops=(good, ops.AttentionOpSpec(
            "temporal", "dot", "none", False, (2,), 2, 4))).validate()
    with pytest.raises(ValueError):  # c_op wider than c_reduction
        cell.CellSpec(ops=(good,), c_reduction=2, c_op=4).validate()
    with pytest.raises(ValueError):  # mixing f_0 with op outputs, c mismatch
        cell.CellSpec(ops=(good, ops.AttentionOpSpec(
            "temporal", "dot", "none", False, (0, 1), 2, 4)),
            c_reduction=8, c_op=4).validate()
    with pytest.raises(ValueError):  # combine out of range
        cell.CellSpec(ops=(good,), combine_indices=(2,)).validate()


def test_render_cell_mentions_every_op():
    rng = np.random.default_rng(16)
    spec = cell.random_cell_spec(rng, k=3)
    text = cell.render_cell(spec)
    for k in range(1, 4):
        assert f"f{k} = " in text
    assert "residual" in text


def test_cell_gradcheck_small():
    rng = np.random.default_rng(17)
    spec = cell.random_cell_spec(rng, k=2, c_reduction=3, c_op=3, t_group=2,
                                 h_resize=2, w_resize=2)
    store = T.ParameterStore()
    params = cell.CellParams.create(store, "cell", spec, input_channels=3,
                                    rng=rng)
    # move off zero-init kinks and dead zero-projection
    for name, p in store.items():
        p.data = p.data + 0.15 * rng.standard_normal(p.shape)
    x = store.add_array("x", rng.normal(size=(1, 3, 2, 2, 3)))
    r = rng.normal(size=(1, 3, 2, 2, 3))

    def loss_fn():
        return T.sum_(T.mul(cell.run_cell(spec, params, x), T.as_tensor(r)))

    from attnsearch import gradcheck
    err = gradcheck.check_loss_fn(loss_fn, store, max_entries=4,
                                  rng=np.random.default_rng(18))
    assert err <= 1e-4, f"max rel err {err}"
