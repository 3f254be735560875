import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import scenarios
from mieval import segnet
from mieval.nn.layers import se_hidden_width
from mieval.nn.tensor import Tensor
from mieval.segnet import (
    ANATOMICAL,
    PATHOLOGICAL,
    P_INFARCT,
    P_NOREFLOW,
    P_NORMAL,
    SpecError,
    TrainConfig,
    TrainConfigError,
    UNetSpec,
    build_unet,
    default_spec,
    refine_and_merge,
)
from mieval.volcore import BACKGROUND, INFARCTION, LV_CAVITY, MYOCARDIUM, NO_REFLOW, LabelMap, Volume


def closed_form_param_count(depth, base, classes, in_ch=1, units=2, ratio=16):
    """Count trainable parameters layer by layer from the architecture description."""

    def unit(cin, cout):
        conv = 9 * cin * cout + cout
        bn = 2 * cout
        h = max(cout // ratio, 2)
        se = cout * h + h + h * cout + cout
        return conv + bn + se

    def block(cin, cout):
        return unit(cin, cout) + (units - 1) * unit(cout, cout)

    f = [base * 2**i for i in range(depth + 1)]
    total = 0
    cin = in_ch
    for i in range(depth):
        total += block(cin, f[i])
        cin = f[i]
    total += block(f[depth - 1], f[depth])
    for i in range(depth):
        total += 4 * f[i + 1] * f[i] + f[i]  # 2x2 up-convolution
        total += block(2 * f[i], f[i])
    total += f[0] * classes + classes  # 1x1 head
    return total


# frozen regression values (closed form evaluated once)
FROZEN_COUNTS = {(4, 32, 3): 7_877_659, (4, 32, 4): 7_877_692, (2, 32, 3): 474_635}


@pytest.mark.parametrize("depth, base, classes", sorted(FROZEN_COUNTS))
def test_parameter_count_closed_form(depth, base, classes):
    role = ANATOMICAL if classes == 3 else PATHOLOGICAL
    spec = default_spec(role, depth=depth, base_features=base, input_size=2**depth * 4)
    count = build_unet(spec, 0, role).num_parameters()
    assert count == closed_form_param_count(depth, base, classes)
    assert count == FROZEN_COUNTS[(depth, base, classes)]


def test_spec_validation():
    with pytest.raises(SpecError):
        UNetSpec(depth=4, input_size=40)
    with pytest.raises(SpecError):
        UNetSpec(num_classes=1)
    assert UNetSpec().features() == [32, 64, 128, 256, 512]
    with pytest.raises(SpecError):
        build_unet(UNetSpec(num_classes=4), 0, ANATOMICAL)


def test_train_config_validation():
    with pytest.raises(TrainConfigError):
        TrainConfig(max_epochs=10, early_stop_patience=11)
    with pytest.raises(TrainConfigError):
        TrainConfig(batch_size=0)
    d = TrainConfig()
    assert (d.max_epochs, d.lr, d.early_stop_patience, d.batch_size) == (500, 1e-3, 200, 8)


def test_full_size_forward_shape():
    model = build_unet(default_spec(ANATOMICAL), 0)
    model.net.eval()
    out = model.net(Tensor(np.random.default_rng(0).normal(size=(1, 1, 256, 256)).astype(np.float32))).data
    assert out.shape == (1, 3, 256, 256)
    assert np.allclose(out.sum(axis=1), 1, atol=1e-5) and np.all(out >= 0)


def test_desk_scale_forward_four_classes():
    model = build_unet(default_spec(PATHOLOGICAL, depth=2, input_size=32), 0, PATHOLOGICAL)
    out = model.net(Tensor(np.zeros((2, 1, 32, 32), np.float32))).data
    assert out.shape == (2, 4, 32, 32)


def test_same_seed_same_parameters():
    a = build_unet(default_spec(ANATOMICAL, depth=2, input_size=32, base_features=8), 7)
    b = build_unet(default_spec(ANATOMICAL, depth=2, input_size=32, base_features=8), 7)
    c = build_unet(default_spec(ANATOMICAL, depth=2, input_size=32, base_features=8), 8)
    sa, sb, sc = a.net.state_dict(), b.net.state_dict(), c.net.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert not all(np.array_equal(sa[k], sc[k]) for k in sa)


def test_targets():
    lab = np.array([[[0, 1, 2, 3, 4]]], np.uint8)
    assert segnet.anatomical_targets(lab).tolist() == [[[0, 1, 2, 2, 2]]]
    assert segnet.pathological_targets(lab).tolist() == [[[0, 0, P_NORMAL, P_INFARCT, P_NOREFLOW]]]


def test_constant_logits_predict_background():
    model = build_unet(default_spec(ANATOMICAL, depth=1, input_size=8, base_features=2), 0)
    head = model.net.head
    head.weight.data[...] = 0
    head.bias.data[...] = 0
    pred = segnet.predict_case(model, Volume(np.random.default_rng(0).normal(size=(3, 8, 8))))
    assert pred.shape == (3, 8, 8) and not pred.labels.any()


def test_predict_case_stacks_slices():
    model = build_unet(default_spec(PATHOLOGICAL, depth=1, input_size=8, base_features=4), 3, PATHOLOGICAL)
    v = Volume(np.random.default_rng(1).normal(size=(3, 8, 8)))
    full = segnet.predict_case(model, v, batch_size=2).labels
    per = np.concatenate([segnet.predict_slices(model, v.data[i : i + 1]) for i in range(3)])
    assert np.array_equal(full, per)
    assert full.max() < 4


# -- merge ---------------------------------------------------------------------


def test_merge_fixture_2x2():
    anat = LabelMap(np.array([[[MYOCARDIUM, MYOCARDIUM], [LV_CAVITY, BACKGROUND]]], np.uint8))
    path = LabelMap(np.array([[[P_INFARCT, 0], [P_NOREFLOW, P_INFARCT]]], np.uint8))
    assert refine_and_merge(anat, path).labels.tolist() == [[[3, 2], [1, 0]]]


def test_merge_infarct_everywhere_equals_ring():
    yy, xx = np.mgrid[:16, :16]
    r = np.hypot(yy - 8, xx - 8)
    a = np.zeros((1, 16, 16), np.uint8)
    a[0][r < 6] = MYOCARDIUM
    a[0][r < 3] = LV_CAVITY
    out = refine_and_merge(LabelMap(a), LabelMap(np.full((1, 16, 16), P_INFARCT, np.uint8))).labels
    assert np.array_equal(out == INFARCTION, a == MYOCARDIUM)
    out = refine_and_merge(LabelMap(a), LabelMap(np.zeros((1, 16, 16), np.uint8))).labels
    assert np.array_equal(out, a)


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        refine_and_merge(LabelMap(np.zeros((1, 2, 2), np.uint8)), LabelMap(np.zeros((1, 2, 3), np.uint8)))


pairs = st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: st.tuples(
        arrays(np.uint8, s, elements=st.integers(0, 2)),
        arrays(np.uint8, s, elements=st.integers(0, 3)),
    )
)


@settings(max_examples=100, deadline=None)
@given(pairs)
def test_merge_invariants(pair):
    a, p = pair
    out = refine_and_merge(LabelMap(a), LabelMap(p)).labels
    myo = a == MYOCARDIUM
    assert not np.isin(out, (INFARCTION, NO_REFLOW))[~myo].any()
    assert np.array_equal(np.isin(out, (MYOCARDIUM, INFARCTION, NO_REFLOW)), myo)
    assert np.array_equal(out[~myo], a[~myo])


# -- training ------------------------------------------------------------------


def _tiny(role=ANATOMICAL, seed=0):
    return build_unet(default_spec(role, depth=1, input_size=8, base_features=4), seed, role)


def _tiny_cases(n=2, seed=0):
    from mieval.preproc import PreprocConfig, preprocess, resize_labels
    from mieval.synthetic import make_case
    rng = np.random.default_rng(seed)
    cfg = PreprocConfig(8, 8)
    out = []
    for i in range(n):
        v, lm = make_case(rng, 16, 2, pathological=bool(i % 2))
        out.append((preprocess(v, cfg), resize_labels(lm, cfg)))
    return out


def test_train_rejects_empty_sets():
    with pytest.raises(TrainConfigError):
        segnet.train(_tiny(), [], _tiny_cases(1), TrainConfig(max_epochs=1, early_stop_patience=1))
    with pytest.raises(TrainConfigError):
        segnet.train(_tiny(), _tiny_cases(1), [], TrainConfig(max_epochs=1, early_stop_patience=1))


def test_train_rejects_wrong_size():
    with pytest.raises(SpecError):
        segnet.train(_tiny(), [(Volume(np.zeros((1, 16, 16))), LabelMap(np.zeros((1, 16, 16), np.uint8)))],
                     _tiny_cases(1), TrainConfig(max_epochs=1, early_stop_patience=1))


def test_patience_zero_stops_at_first_non_improving_epoch():
    res = segnet.train(_tiny(), _tiny_cases(2), _tiny_cases(2, seed=5), TrainConfig(max_epochs=40, early_stop_patience=0, lr=0.05))
    vals = [h["val_loss"] for h in res.history]
    # every epoch before the last improved on the running best; the last did not
    assert res.stopped_early
    assert all(vals[i] < min(vals[:i], default=np.inf) for i in range(len(vals) - 1))
    assert vals[-1] >= min(vals[:-1])


def test_best_parameters_restored():
    model = _tiny()
    train, val = _tiny_cases(2), _tiny_cases(2, seed=9)
    res = segnet.train(model, train, val, TrainConfig(max_epochs=12, early_stop_patience=12, lr=0.05))
    x, y = segnet._stack_slices(model.role, val, np.float32)
    restored = segnet.evaluate_loss(model, x, y, 8)
    assert abs(restored - res.best_val_loss) < 1e-6
    assert res.best_val_loss == min(h["val_loss"] for h in res.history)


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        res = segnet.train(_tiny(PATHOLOGICAL, 3), _tiny_cases(2), _tiny_cases(1), TrainConfig(max_epochs=4, early_stop_patience=4, seed=3))
        runs.append(res.history_csv())
    assert runs[0] == runs[1]


def test_loss_halves_in_50_epochs():
    _, res, _ = scenarios.overfit_run(ANATOMICAL, epochs=50)
    h = res.history
    assert h[-1]["train_loss"] <= 0.5 * h[0]["train_loss"]


def test_checkpoint_round_trip(tmp_path):
    model = _tiny()
    res = segnet.train(model, _tiny_cases(2), _tiny_cases(1), TrainConfig(max_epochs=2, early_stop_patience=2))
    p = tmp_path / "m.ckpt"
    segnet.save_model(model, p, res.optimizer, {"note": "x"})
    back, opt, meta = segnet.load_model(p)
    assert meta["note"] == "x" and back.role == ANATOMICAL and back.spec == model.spec
    a, b = model.net.state_dict(), back.net.state_dict()
    assert list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)
    assert opt.t == res.optimizer.t
    assert all(np.array_equal(m1, m2) for m1, m2 in zip(opt.m, res.optimizer.m))
    v = _tiny_cases(1)[0][0]
    assert np.array_equal(segnet.predict_case(model, v).labels, segnet.predict_case(back, v).labels)
