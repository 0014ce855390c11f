import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dslstm import tensor as tn
from dslstm.gradcheck import run_gradcheck
from dslstm.model import (
    VARIANTS,
    CnnBlock,
    DsLstmLayer,
    DsLstmState,
    LstmLayer,
    ModelConfig,
    ModelError,
    RecurrentBatchNorm,
    align_time,
    build_variant,
    cnn_output_size,
    count_parameters,
    ds_layer_closed_form,
    ds_lstm_cell,
    lstm_cell,
)
from dslstm.tensor import Tensor
from dslstm.train import make_batch, save_checkpoint, load_checkpoint


def f64(module):
    for p in module.named_parameters().values():
        p.data = p.data.astype(np.float64)
    return module


def ds_as_lstm(lstm: LstmLayer, dy: int) -> DsLstmLayer:
    """DS layer whose T-path copies ``lstm`` and whose F-path is switched off."""
    dx, H = lstm.input_dim, lstm.hidden
    ds = f64(DsLstmLayer(dx, dy, H, 5, "ds", ModelConfig(use_rbn=False)))
    zeros_y = np.zeros((H, dy))
    for ds_name, l_name in (("f", "f"), ("iT", "i"), ("o", "o")):
        W = getattr(lstm, f"W_{l_name}").data
        getattr(ds, f"W_{ds_name}").data = np.hstack([W[:, :dx], zeros_y, W[:, dx:]])
        getattr(ds, f"b_{ds_name}").data = getattr(lstm, f"b_{l_name}").data.copy()
    ds.W_T.data = lstm.W_g.data.copy()
    ds.b_T.data = lstm.b_g.data.copy()
    ds.W_iF.data[:] = 0.0
    ds.b_iF.data[:] = -1000.0  # sigmoid underflows to exactly 0
    return ds


def test_ds_cell_reduces_to_lstm(rng):
    lstm = f64(LstmLayer(5, 6, 3, "l"))
    for g in lstm.GATES:
        getattr(lstm, f"b_{g}").data = rng.standard_normal(6)
    ds = ds_as_lstm(lstm, 4)
    for _ in range(20):
        x, y = rng.standard_normal((3, 5)), rng.standard_normal((3, 4)) * 3
        h, c = rng.standard_normal((3, 6)), rng.standard_normal((3, 6))
        h_ref, c_ref = lstm_cell(Tensor(x), Tensor(h), Tensor(c), lstm)
        s = ds_lstm_cell(Tensor(x), Tensor(y), DsLstmState(Tensor(h), Tensor(c)), ds)
        np.testing.assert_allclose(s.h.data, h_ref.data, atol=1e-12)
        np.testing.assert_allclose(s.C.data, c_ref.data, atol=1e-12)


def test_candidate_cells_see_only_their_stream(rng):
    ds = f64(DsLstmLayer(3, 2, 4, 1, "ds", ModelConfig(use_rbn=False)))
    assert ds.W_T.shape == (4, 3 + 4) and ds.W_F.shape == (4, 2 + 4)
    assert ds.W_f.shape == ds.W_iT.shape == ds.W_iF.shape == ds.W_o.shape == (4, 3 + 2 + 4)


def test_ds_layer_closed_form_matches_enumeration():
    assert ds_layer_closed_form(200, 208, 464) == 913_200
    layer = DsLstmLayer(208, 464, 200, 0, "ds", ModelConfig())
    weights = {k: p for k, p in layer.named_parameters().items() if "/" not in k}
    assert sum(p.size for p in weights.values()) == 913_200


def test_cnn_feature_dims():
    assert CnnBlock((64, 16), 4, 0, "c").feature_dim(64) == 208
    assert CnnBlock((64, 16), 4, 0, "c").feature_dim(128) == 464


@settings(max_examples=20, deadline=None)
@given(st.integers(13, 40))
def test_cnn_output_size_matches_ops(n):
    block = CnnBlock((2, 3), 4, 0, "c")
    out = block.forward(np.zeros((1, n, 16), dtype=np.float32))
    assert out.shape[2] == 3 * cnn_output_size(n)


def test_align_time_averages_pairs_and_keeps_odd_tail():
    xs = Tensor(np.arange(5, dtype=float)[:, None, None])
    ys = Tensor(np.zeros((10, 1, 1)))
    a, b = align_time(xs, ys)
    np.testing.assert_allclose(a.data[:, 0, 0], [0.5, 2.5, 4.0])
    assert b.shape[0] == 3


@pytest.mark.parametrize("T1,T2", [(2, 1), (7, 2), (8, 10), (40, 20)])
def test_align_time_length_law(T1, T2):
    a, b = align_time(Tensor(np.zeros((T1, 2, 3))), Tensor(np.zeros((T2, 2, 4))))
    assert a.shape[0] == b.shape[0] == min(-(-T1 // 2), T2)


def test_rbn_slots_grow_in_training_and_are_checked_in_eval():
    rbn = RecurrentBatchNorm(3)
    x = Tensor(np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32))
    for t in range(5):
        rbn(x, t)
    assert len(rbn.slots) == 5
    rbn.train(False)
    rbn(x, 4)
    with pytest.raises(ModelError, match="time step 5"):
        rbn(x, 5)
    rbn.extrapolate = "clamp"
    np.testing.assert_array_equal(rbn(x, 9).data, rbn(x, 4).data)


def test_rbn_init_values():
    rbn = RecurrentBatchNorm(7)
    np.testing.assert_allclose(rbn.gamma.data, 0.1)
    np.testing.assert_allclose(rbn.beta.data, 0.0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_all_variants(variant, tiny_records):
    cfg = ModelConfig(variant=variant, hidden=8)
    model = build_variant(cfg)
    res = model.forward(make_batch(tiny_records[:4]))
    assert res.probs.shape == (4, 4)
    np.testing.assert_allclose(res.probs.sum(axis=1), 1.0, rtol=1e-5)
    # combined loss is the weighted mean of the branch losses
    labels = make_batch(tiny_records[:4]).labels
    ref = sum(model.weights[n] * tn.cross_entropy(z, labels).item() for n, z in res.logits.items())
    assert res.loss.item() == pytest.approx(ref, rel=1e-5)


def test_dual_averages_branch_softmax(tiny_records):
    model = build_variant(ModelConfig(variant="dual", hidden=8))
    res = model.forward(make_batch(tiny_records[:4]))
    manual = 0.5 * (tn._softmax(res.logits["lstm_mfcc"].data) + tn._softmax(res.logits["dslstm"].data))
    np.testing.assert_allclose(res.probs, manual, rtol=1e-6)


def test_mfcc_padding_does_not_leak(tiny_records):
    # batched masked pooling must equal running each utterance alone
    model = build_variant(ModelConfig(variant="base1", hidden=8)).eval()
    recs = sorted(tiny_records[:4], key=lambda r: r.mfcc.shape[0])
    assert recs[0].mfcc.shape[0] < recs[-1].mfcc.shape[0]
    batched = model.forward(make_batch(recs)).probs
    alone = np.concatenate([model.forward(make_batch([r])).probs for r in recs])
    np.testing.assert_allclose(batched, alone, atol=1e-6)


def test_shape_mismatch_names_tensor(tiny_records):
    model = build_variant(ModelConfig(variant="ds_only", hidden=8))
    b = make_batch(tiny_records[:2])
    b.s2 = b.s2[:, :100]
    with pytest.raises(ModelError, match="s2"):
        model.forward(b)


def test_same_seed_same_weights():
    a = build_variant(ModelConfig(variant="dual", hidden=8, seed=4)).parameters()
    b = build_variant(ModelConfig(variant="dual", hidden=8, seed=4)).parameters()
    c = build_variant(ModelConfig(variant="dual", hidden=8, seed=5)).parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not all(np.array_equal(a[k].data, c[k].data) for k in a)


def test_checkpoint_round_trip(tmp_path, tiny_records):
    model = build_variant(ModelConfig(variant="dual", hidden=8))
    batch = make_batch(tiny_records[:4])
    model.forward(batch)  # populate recurrent batch-norm slots
    model.eval()
    before = model.forward(batch).probs
    save_checkpoint(tmp_path / "m.dslp", model)
    loaded, _ = load_checkpoint(tmp_path / "m.dslp")
    np.testing.assert_array_equal(loaded.forward(batch).probs, before)
    assert count_parameters(loaded) == count_parameters(model)


def test_base2_base3_differ_by_input_width():
    counts = {v: count_parameters(build_variant(ModelConfig(variant=v))) for v in ("base2", "base3", "ds_only")}
    # base2 and base3 differ only through the CNN output width feeding the first LSTM layer
    assert counts["base3"] - counts["base2"] == 4 * 200 * (464 - 208)


def test_bad_config_rejected():
    with pytest.raises(ModelError):
        ModelConfig(variant="base7")
    with pytest.raises(ModelError):
        ModelConfig(rbn_position="middle")


def test_recurrent_gradcheck_suites():
    for r in run_gradcheck("lstm", instances=2) + run_gradcheck("dslstm", instances=2):
        assert r.passed, (r.name, r.max_rel_err)
