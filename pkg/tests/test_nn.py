import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate
from scipy.special import expit, log_softmax

from gestboot import nn
from gestboot.errors import FormatError, InvalidInputError, ScheduleExhaustedError

TINY = (2, 3, 3, 4, 4, 3)


def single_conv(cin, cout, k, stride, pad=None):
    return nn.NetSpec((nn.Conv("c", cout, k, stride, pad),), cin, cout)


# ---------------------------------------------------------------- specs

def test_toy_spec_layout():
    spec = nn.toy_spec()
    names = [c.name for c in spec.convs()]
    assert names == ["conv1", "conv2", "conv3", "conv4", "conv5", "fc6", "fc7"]
    assert [c.stride for c in spec.convs()] == [1, 2, 1, 2, 1, 1, 1]
    drops = [l.name for l in spec.layers if isinstance(l, nn.Dropout)]
    assert drops == ["conv3", "conv4", "conv5"]


def test_fc7_is_an_alias_for_the_fc_slot():
    a = nn.toy_spec(dropout=("fc7",))
    b = nn.toy_spec(dropout=("fc6",))
    assert a == b


def test_unknown_dropout_slot_rejected():
    with pytest.raises(InvalidInputError):
        nn.toy_spec(dropout=("conv9",))


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        nn.NetSpec((nn.Conv("a", 2), nn.Conv("a", 2)), 1, 2)
    with pytest.raises(InvalidInputError):
        nn.NetSpec((nn.Conv("a", 2),), 1, 3)
    with pytest.raises(InvalidInputError):
        nn.NetSpec((nn.Conv("a", 2), nn.Dropout("a", 1.0)), 1, 2)


def test_spec_dict_roundtrip():
    spec = nn.toy_spec(1, 1, dropout=("fc6", "conv2"), ratio=0.5)
    assert nn.NetSpec.from_dict(spec.to_dict()) == spec


def test_glorot_bounds(rng):
    spec = nn.toy_spec()
    params = nn.init_params(spec, rng)
    w = params["conv1.weight"]
    bound = np.sqrt(6.0 / (3 * 9 + 16 * 9))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound
    assert all(np.all(params[k] == 0) for k in params if k.endswith(".bias"))
    assert all(v.dtype == np.float32 for v in params.values())


# ---------------------------------------------------------------- forward oracles

@pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (1, 1), (5, 2)])
def test_conv_matches_scipy_correlate(rng, k, stride):
    spec = single_conv(2, 3, k, stride)
    params = nn.init_params(spec, rng, np.float64)
    params["c.bias"] = rng.normal(size=3)
    x = rng.normal(size=(2, 9, 11))
    out, _ = nn.forward(spec, params, x)
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    for o in range(3):
        full = sum(correlate(xp[c], params["c.weight"][o, c], mode="valid") for c in range(2))
        np.testing.assert_allclose(out[o], full[::stride, ::stride] + params["c.bias"][o],
                                   atol=1e-12)


def test_output_keeps_input_resolution(rng):
    spec = nn.toy_spec()
    params = nn.init_params(spec, rng)
    out, _ = nn.forward(spec, params, rng.random((3, 24, 32)))
    assert out.shape == (2, 24, 32)
    assert out.dtype == np.float32


def test_forward_rejects_bad_input(rng):
    spec = nn.toy_spec()
    params = nn.init_params(spec, rng)
    with pytest.raises(InvalidInputError):
        nn.forward(spec, params, rng.random((2, 16, 16)))
    with pytest.raises(InvalidInputError):
        nn.forward(spec, params, rng.random((3, 16, 16)), dropout_on=True)


def test_dropout_is_inverted_and_seeded(rng):
    spec = nn.NetSpec((nn.Conv("c", 1, 1, 1), nn.Dropout("c", 0.4)), 1, 1)
    params = {"c.weight": np.ones((1, 1, 1, 1)), "c.bias": np.zeros(1)}
    x = np.ones((1, 200, 200))
    out, _ = nn.forward(spec, params, x, True, np.random.default_rng(5))
    kept = out[out > 0]
    np.testing.assert_allclose(kept, 1 / 0.6)
    assert abs(out.mean() - 1.0) < 0.02
    again, _ = nn.forward(spec, params, x, True, np.random.default_rng(5))
    np.testing.assert_array_equal(out, again)
    det, _ = nn.forward(spec, params, x)
    np.testing.assert_array_equal(det, x)


def test_backward_rejects_foreign_cache(rng):
    spec = nn.toy_spec()
    params = nn.init_params(spec, rng)
    out, cache = nn.forward(spec, params, rng.random((3, 16, 16)))
    other = dict(params)
    with pytest.raises(InvalidInputError):
        nn.backward(spec, other, cache, out)


# ---------------------------------------------------------------- losses

def test_weighted_softmax_matches_scipy_log_softmax(rng):
    logits = rng.normal(size=(2, 5, 6))
    target = (rng.random((5, 6)) < 0.3).astype(float)
    loss, _ = nn.weighted_softmax_loss(logits, target)
    lp = log_softmax(logits, axis=0)
    w = np.where(target == 1, 5.0, 0.6)
    expect = -(w * np.where(target == 1, lp[1], lp[0])).mean()
    assert loss == pytest.approx(expect, rel=1e-12)


def test_weighted_softmax_hand_value():
    # equal logits: p = 1/2 for both classes
    loss, grad = nn.weighted_softmax_loss(np.zeros((2, 1, 2)), np.array([[1.0, 0.0]]))
    assert loss == pytest.approx((5.0 + 0.6) * np.log(2) / 2)
    np.testing.assert_allclose(grad[:, 0, 0], [0.5 * 5 / 2, -0.5 * 5 / 2])
    np.testing.assert_allclose(grad[:, 0, 1], [-0.5 * 0.6 / 2, 0.5 * 0.6 / 2])


def test_weighted_softmax_is_stable_for_huge_logits():
    logits = np.array([[[1e4]], [[-1e4]]])
    loss, grad = nn.weighted_softmax_loss(logits, np.array([[1.0]]))
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss == pytest.approx(5.0 * 2e4)


def central_diff(fn, x, step=1e-6):
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        lp = fn(x)
        flat[i] = old - step
        lm = fn(x)
        flat[i] = old
        gflat[i] = (lp - lm) / (2 * step)
    return g


def test_weighted_softmax_gradient_by_finite_differences(rng):
    logits = rng.normal(size=(2, 4, 5))
    target = (rng.random((4, 5)) < 0.4).astype(float)
    _, grad = nn.weighted_softmax_loss(logits, target)
    num = central_diff(lambda z: nn.weighted_softmax_loss(z, target)[0], logits)
    assert np.abs(grad - num).max() / np.abs(num).max() < 1e-6


def test_precision_loss_gradient_by_finite_differences(rng):
    x = rng.normal(size=(1, 4, 5)) * 3
    t = (rng.random((1, 4, 5)) < 0.5).astype(float)
    p = rng.uniform(0.1, 3, size=(1, 4, 5))
    loss, grad = nn.precision_weighted_loss(x, t, p)
    s = expit(0.5 * x)
    assert loss == pytest.approx((p * (s - t) ** 2).sum(), rel=1e-12)
    num = central_diff(lambda z: nn.precision_weighted_loss(z, t, p)[0], x)
    rel = np.abs(grad - num) / np.maximum(np.abs(grad) + np.abs(num), 1e-7)
    assert rel.max() < 1e-6


@given(arrays(np.float64, 20, elements=st.floats(-500, 500)), st.floats(0.05, 0.95))
def test_soft_sigmoid_matches_expit(x, alpha):
    np.testing.assert_allclose(nn.soft_sigmoid(x, alpha), expit(alpha * x), rtol=1e-12)


@pytest.mark.parametrize("alpha", [0.0, 1.0, 2.0])
def test_soft_sigmoid_rejects_alpha(alpha):
    with pytest.raises(InvalidInputError):
        nn.soft_sigmoid(np.zeros(2), alpha)


def test_losses_reject_bad_targets():
    with pytest.raises(InvalidInputError):
        nn.weighted_softmax_loss(np.zeros((2, 2, 2)), np.full((2, 2), 0.5))
    with pytest.raises(InvalidInputError):
        nn.weighted_softmax_loss(np.zeros((2, 2, 2)), np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        nn.precision_weighted_loss(np.zeros(3), np.zeros(3), -np.ones(3))
    with pytest.raises(InvalidInputError):
        nn.precision_weighted_loss(np.zeros(3), np.zeros(4), np.ones(3))


def test_uniform_precision_is_a_scaled_identity_loss(rng):
    x = rng.normal(size=(1, 3, 3))
    t = (rng.random((1, 3, 3)) < 0.5).astype(float)
    l1, g1 = nn.precision_weighted_loss(x, t, np.ones_like(x))
    l3, g3 = nn.precision_weighted_loss(x, t, np.full_like(x, 3.0))
    assert l3 == pytest.approx(3 * l1)
    np.testing.assert_allclose(g3, 3 * g1)


# ---------------------------------------------------------------- gradient checks

@pytest.mark.parametrize("kind,out", [("squared", 2), ("weighted_softmax", 2),
                                      ("precision_weighted", 1)])
def test_network_gradients_match_finite_differences(kind, out):
    spec = nn.toy_spec(2, out, dropout=("conv2", "fc6"), widths=TINY)
    report = nn.grad_check(spec, kind, 1e-4, np.random.default_rng(7))
    assert report.passed, report
    assert report.n_checked > 10 * report.n_skipped


def test_grad_check_rejects_mismatched_loss():
    with pytest.raises(InvalidInputError):
        nn.grad_check(nn.toy_spec(2, 2, widths=TINY), "precision_weighted", 1e-4,
                      np.random.default_rng(0))


def test_input_gradient_of_single_conv(rng):
    spec = single_conv(2, 2, 3, 2)
    params = nn.init_params(spec, rng, np.float64)
    x = rng.normal(size=(2, 7, 7))
    target = rng.normal(size=(2, 4, 4))

    def loss(inp):
        out, _ = nn.forward(spec, params, inp)
        return nn.squared_loss(out, target)[0]

    out, cache = nn.forward(spec, params, x)
    _, gx = nn.backward(spec, params, cache, nn.squared_loss(out, target)[1], input_grad=True)
    np.testing.assert_allclose(gx, central_diff(loss, x), rtol=1e-6, atol=1e-7)


# ---------------------------------------------------------------- optimisation

def test_poly_schedule_values():
    sched = nn.PolyLrSchedule(0.1, 0.9, 10)
    assert sched.lr(0) == pytest.approx(0.1)
    assert sched.lr(5) == pytest.approx(0.1 * 0.5 ** 0.9)
    with pytest.raises(ScheduleExhaustedError):
        sched.lr(10)
    with pytest.raises(ScheduleExhaustedError):
        sched.lr(-1)


@given(st.integers(2, 200))
def test_poly_schedule_is_decreasing(n):
    sched = nn.PolyLrSchedule(1.0, 0.9, n)
    lrs = [sched.lr(i) for i in range(n)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] > 0


def test_sgd_step_moves_against_gradient():
    params = {"w": np.array([1.0, 2.0], dtype=np.float32)}
    grads = {"w": np.array([1.0, -1.0], dtype=np.float32)}
    new = nn.sgd_step(params, grads, nn.PolyLrSchedule(0.5, 1.0, 2), 0)
    np.testing.assert_allclose(new["w"], [0.5, 2.5])
    assert new["w"].dtype == np.float32


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    same, norm = nn.clip_grad_norm(grads, 10.0)
    assert norm == pytest.approx(5.0) and same is grads
    clipped, _ = nn.clip_grad_norm(grads, 1.0)
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    untouched, _ = nn.clip_grad_norm(grads, None)
    assert untouched is grads


def test_training_reduces_the_loss(rng):
    spec = nn.toy_spec(3, 2, dropout=(), widths=(8, 8, 8, 8, 8, 8))
    params = nn.init_params(spec, rng)
    target = np.zeros((16, 16))
    target[4:12, 4:12] = 1
    # the hand region is brighter, so the mapping is learnable
    x = (0.3 * rng.random((3, 16, 16)) + 0.5 * target).astype(np.float32)
    sched = nn.PolyLrSchedule(0.2, 0.9, 100)
    losses = []
    for it in range(100):
        out, cache = nn.forward(spec, params, x)
        loss, g = nn.weighted_softmax_loss(out, target)
        losses.append(loss)
        params = nn.sgd_step(params, nn.backward(spec, params, cache, g), sched, it)
    assert losses[-1] < 0.25 * losses[0]


# ---------------------------------------------------------------- persistence

def test_params_roundtrip(tmp_path, rng):
    spec = nn.toy_spec(3, 1, dropout=("fc6",))
    params = nn.init_params(spec, rng)
    nn.save_params(params, spec, tmp_path / "p.params")
    loaded, lspec = nn.load_params(tmp_path / "p.params")
    assert lspec == spec
    assert list(loaded) == list(params)
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])


def test_params_manifest_mismatch(tmp_path, rng):
    spec = nn.toy_spec()
    params = nn.init_params(spec, rng)
    nn.save_params(params, spec, tmp_path / "p.params")
    nn.save_params({"x": np.zeros(2, np.float32)}, spec, tmp_path / "q.params")
    (tmp_path / "q.params.json").write_text((tmp_path / "p.params.json").read_text())
    with pytest.raises(FormatError):
        nn.load_params(tmp_path / "q.params")


# ---------------------------------------------------------------- small closed-form cases

def test_zero_weights_give_zero_logits(rng):
    spec = nn.toy_spec(3, 2, widths=TINY)
    logits, _ = nn.forward(spec, nn.zero_params(spec, np.float64), rng.random((3, 8, 8)))
    np.testing.assert_array_equal(logits, 0.0)


def test_one_by_one_conv_is_a_matrix_product(rng):
    spec = nn.NetSpec((nn.Conv("c", 2, 1, 1),), 3, 2)
    w = rng.normal(size=(2, 3, 1, 1))
    b = rng.normal(size=2)
    x = rng.normal(size=(3, 2, 2))
    out, _ = nn.forward(spec, {"c.weight": w, "c.bias": b}, x)
    expect = np.einsum("oc,chw->ohw", w[:, :, 0, 0], x) + b[:, None, None]
    np.testing.assert_allclose(out, expect, rtol=1e-14)


def test_zero_upstream_gradient_gives_zero_gradients(rng):
    spec = nn.toy_spec(3, 2, widths=TINY)
    params = nn.init_params(spec, rng, np.float64)
    logits, cache = nn.forward(spec, params, rng.random((3, 8, 8)))
    grads = nn.backward(spec, params, cache, np.zeros_like(logits))
    assert all(not g.any() for g in grads.values())


def test_zero_ratio_dropout_is_inert(rng):
    spec = nn.toy_spec(3, 2, dropout=("conv3", "fc6"), ratio=0.0, widths=TINY)
    params = nn.init_params(spec, rng, np.float64)
    x = rng.random((3, 8, 8))
    on, _ = nn.forward(spec, params, x, True, rng)
    off, _ = nn.forward(spec, params, x)
    np.testing.assert_array_equal(on, off)


def test_confident_correct_logits_cost_almost_nothing():
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    logits = np.stack([(1 - target) * 20 - 10, target * 20 - 10])
    loss, _ = nn.weighted_softmax_loss(logits, target)
    assert loss < 1e-3


def test_uniform_logits_on_one_hand_pixel():
    loss, _ = nn.weighted_softmax_loss(np.zeros((2, 1, 1)), np.ones((1, 1)))
    assert loss == pytest.approx(5 * np.log(2))


def test_soft_sigmoid_closed_forms(rng):
    x = rng.normal(size=50) * 5
    for alpha in (0.1, 0.5, 0.9):
        assert nn.soft_sigmoid(np.zeros(1), alpha)[0] == 0.5
        np.testing.assert_allclose(nn.soft_sigmoid(x, alpha) + nn.soft_sigmoid(-x, alpha), 1.0)
    assert nn.soft_sigmoid(np.array([2.0]), 0.5)[0] == pytest.approx(1 / (1 + np.exp(-1)))
    assert nn.soft_sigmoid(np.array([2.0]), 0.5)[0] == pytest.approx(0.73106, abs=1e-5)


def test_precision_loss_vanishes_at_its_target(rng):
    x = rng.normal(size=(4, 4))
    t = nn.soft_sigmoid(x)
    loss, grad = nn.precision_weighted_loss(x, t, rng.uniform(0.5, 2, size=(4, 4)))
    assert loss == 0.0
    assert not grad.any()


def test_unit_precision_is_plain_squared_error(rng):
    x, t = rng.normal(size=(5, 5)), (rng.random((5, 5)) > 0.5).astype(float)
    loss, _ = nn.precision_weighted_loss(x, t, np.ones((5, 5)))
    assert loss == pytest.approx(((nn.soft_sigmoid(x) - t) ** 2).sum())


def test_last_iteration_of_linear_decay():
    sched = nn.PolyLrSchedule(0.3, 1.0, 20)
    assert sched.lr(19) == pytest.approx(0.3 / 20)
    assert nn.PolyLrSchedule().base_lr == nn.DEFAULT_BASE_LR
    assert nn.FULL_SCALE_BASE_LR == 1e-8


def test_linear_net_gradients_are_exact_to_rounding():
    spec = nn.NetSpec((nn.Conv("c", 2, 1, 1),), 3, 2)
    report = nn.grad_check(spec, "squared", 1e-9, np.random.default_rng(3), input_shape=(3, 3))
    assert report.n_skipped == 0
    assert report.max_rel_error < 1e-9
