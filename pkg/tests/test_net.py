import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metatsr.config import NetConfig
from metatsr.errors import DataError
from metatsr.net import (
    FilmParams,
    TaskNetwork,
    backward,
    features,
    film,
    forward,
    gradient_check,
    head_gradient,
    lstm_backward,
    lstm_forward,
    predict,
)
from metatsr.series import MetaWindow
from metatsr.verify import all_gradient_checks


def small_net(seed=0, hidden=(3, 2), F=4, C=2, delta=3, projection="tanh"):
    rng = np.random.default_rng(seed)
    cfg = NetConfig(input_dim=C, window_size=delta, hidden_sizes=hidden, feature_dim=F, projection=projection)
    net = TaskNetwork.init(cfg, rng)
    return net.with_head(rng.normal(size=F), 0.3)


def test_init_head_is_zero_and_extractor_bounded():
    cfg = NetConfig(input_dim=3, window_size=4, hidden_sizes=(5,), feature_dim=6)
    net = TaskNetwork.init(cfg, np.random.default_rng(0))
    w, b = net.head
    assert not w.any() and b == 0.0
    W = net.params["proj.W"] if "proj.W" in net.params else None
    if W is not None:
        assert np.abs(W).max() <= 1 / np.sqrt(W.shape[0]) + 1e-12


def test_parameters_are_read_only():
    net = small_net()
    with pytest.raises(ValueError):
        net.params["head.w"][0] = 1.0


def test_shape_mismatch_raises():
    net = small_net()
    with pytest.raises(DataError):
        forward(net, np.zeros((4, 2)))
    with pytest.raises(DataError):
        predict(net, np.zeros((2, 3, 5)))


# -- forward and FiLM ------------------------------------------------------


def test_identity_film_bit_equal():
    net = small_net()
    x = np.random.default_rng(1).normal(size=(3, 2))
    assert forward(net, x, FilmParams.identity(4)) == forward(net, x)
    w = np.random.default_rng(2).normal(size=4)
    assert np.array_equal(film(w, FilmParams.identity(4)), w)


def test_zero_film_gives_bias_only():
    net = small_net()
    x = np.random.default_rng(1).normal(size=(3, 2))
    assert forward(net, x, FilmParams(np.zeros(4), np.zeros(4))) == pytest.approx(0.3, abs=1e-15)


def test_gamma_two_doubles_prediction():
    net = small_net()
    net = net.with_head(net.head[0], 0.0)
    x = np.random.default_rng(1).normal(size=(3, 2))
    assert forward(net, x, FilmParams(np.full(4, 2.0), np.zeros(4))) == pytest.approx(2 * forward(net, x), abs=1e-14)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_head_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed % 7)
    t1, t2 = rng.normal(size=4), rng.normal(size=4)
    x = rng.normal(size=(3, 2))
    f = lambda t: forward(net.with_head(t, 0.0), x)
    assert f(a * t1 + b * t2) == pytest.approx(a * f(t1) + b * f(t2), abs=1e-9)


def test_forward_deterministic():
    net = small_net()
    X = np.random.default_rng(5).normal(size=(6, 3, 2))
    y = np.random.default_rng(6).normal(size=6)
    assert np.array_equal(predict(net, X), predict(net, X))
    g1 = backward(net, X, y)[1]
    g2 = backward(net, X, y)[1]
    assert all(np.array_equal(g1[k], g2[k]) for k in g1.keys())


def test_features_are_finite_for_finite_input():
    net = small_net()
    X = np.random.default_rng(0).normal(scale=100.0, size=(5, 3, 2))
    assert np.isfinite(features(net, X)).all()


# -- backward --------------------------------------------------------------


def test_zero_head_mae_gradient():
    net = small_net().with_head(np.zeros(4), 0.0)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(5, 3, 2))
    y = rng.normal(size=5)
    _, g = backward(net, X, y, "mae")
    expected = -(np.sign(y)[:, None] * features(net, X)).mean(axis=0)
    np.testing.assert_allclose(g["head.w"], expected, atol=1e-15)


def test_exact_fit_sample_contributes_nothing():
    net = small_net()
    rng = np.random.default_rng(4)
    X = rng.normal(size=(3, 3, 2))
    y = rng.normal(size=3)
    y_exact = y.copy()
    y_exact[0] = predict(net, X[:1])[0]
    _, g_all = backward(net, X, y_exact, "mae")
    _, g_rest = backward(net, X[1:], y_exact[1:], "mae")
    # the matched sample only changes the normalisation (1/3 vs 1/2)
    np.testing.assert_allclose(g_all["head.w"] * 3, g_rest["head.w"] * 2, atol=1e-14)


def test_backward_rejects_empty_batch():
    with pytest.raises(DataError):
        backward(small_net(), np.zeros((0, 3, 2)), np.zeros(0))


def test_gradient_shapes_mirror_parameters():
    net = small_net()
    _, g = backward(net, np.zeros((2, 3, 2)), np.ones(2), film_params=FilmParams.identity(4))
    for k, v in net.params.items():
        assert g[k].shape == v.shape
    assert g["film.gamma"].shape == (4,) and g["film.beta"].shape == (4,)


@pytest.mark.parametrize("loss", ["mae", "mse"])
@pytest.mark.parametrize("with_film", [False, True])
def test_gradient_check_toy_net(loss, with_film):
    rng = np.random.default_rng(11)
    net = small_net(11, hidden=(3,), F=2, C=2)
    fp = FilmParams(1 + 0.3 * rng.normal(size=2), 0.3 * rng.normal(size=2)) if with_film else None
    report = gradient_check(net, 1e-4, loss=loss, film_params=fp)
    assert report.passed, (report.worst, report.max_error)


def test_gradient_check_untrained_init_net():
    cfg = NetConfig(input_dim=2, window_size=4, hidden_sizes=(4, 3), feature_dim=5)
    net = TaskNetwork.init(cfg, np.random.default_rng(0))
    assert gradient_check(net, 1e-4).passed


def test_gradient_check_sequence_length_8():
    net = small_net(2, hidden=(4,), F=3, C=2, delta=8)
    assert gradient_check(net, 1e-4, loss="mse").passed


def test_gradient_check_identity_projection():
    net = small_net(3, projection="identity")
    assert gradient_check(net, 1e-4).passed


def test_gradient_check_detects_corruption():
    net = small_net()

    def corrupt(g):
        g["head.w"][0] *= 2.0
        return g

    assert not gradient_check(net, 1e-4, loss="mse", corrupt=corrupt).passed


def test_gradient_check_refuses_large_nets():
    cfg = NetConfig(input_dim=3, window_size=2, hidden_sizes=(40, 40), feature_dim=16)
    net = TaskNetwork.init(cfg, np.random.default_rng(0))
    assert net.n_params() > 5000
    with pytest.raises(ValueError):
        gradient_check(net)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_gradient_check_randomized(seed):
    rng = np.random.default_rng(seed)
    hidden = tuple(int(h) for h in rng.integers(1, 4, size=int(rng.integers(1, 3))))
    net = small_net(seed, hidden=hidden, F=int(rng.integers(1, 4)), C=int(rng.integers(1, 3)), delta=int(rng.integers(1, 5)))
    fp = None
    if rng.random() < 0.5:
        F = net.feature_dim
        fp = FilmParams(1 + 0.3 * rng.normal(size=F), 0.3 * rng.normal(size=F))
    report = gradient_check(net, 1e-4, loss="mse" if rng.random() < 0.5 else "mae", film_params=fp, seed=seed)
    assert report.passed, (report.worst, report.max_error)


def test_lstm_backward_against_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 3))
    from metatsr.net import lstm_init

    W, b = lstm_init(rng, 3, 4)
    dhs = rng.normal(size=(2, 5, 4))

    def loss(W_, b_):
        return float((lstm_forward(x, W_, b_)[0] * dhs).sum())

    _, cache = lstm_forward(x, W, b)
    grads = lstm_backward(dhs, cache, W)
    dW = grads[1] if isinstance(grads, tuple) else grads["W"]
    h = 1e-6
    i, j = 2, 5
    Wp, Wm = W.copy(), W.copy()
    Wp[i, j] += h
    Wm[i, j] -= h
    assert dW[i, j] == pytest.approx((loss(Wp, b) - loss(Wm, b)) / (2 * h), rel=1e-6)


def test_all_component_checks_pass():
    for name, report in all_gradient_checks(seed=0, tolerance=1e-4).items():
        assert report.passed, (name, report.worst, report.max_error)


# -- head_gradient ---------------------------------------------------------


def _mw(net, n, seed=0):
    rng = np.random.default_rng(seed)
    return MetaWindow(rng.normal(size=(n, 3, 2)), rng.normal(size=n), np.arange(n), "s", 0)


def test_head_gradient_perfect_fit_is_zero():
    net = small_net()
    mw = _mw(net, 4)
    mw = MetaWindow(mw.inputs, predict(net, mw.inputs), mw.origin_indices, "s", 0)
    assert not head_gradient(net, mw).any()


def test_head_gradient_single_sample():
    net = small_net()
    mw = _mw(net, 1)
    pred = predict(net, mw.inputs)[0]
    mw = MetaWindow(mw.inputs, np.array([pred + 1.0]), mw.origin_indices, "s", 0)
    fp = FilmParams(np.array([2.0, 1.0, 0.5, -1.0]), np.zeros(4))
    mw_f = MetaWindow(mw.inputs, np.array([predict(net, mw.inputs, fp)[0] + 1.0]), mw.origin_indices, "s", 0)
    phi = features(net, mw.inputs)[0]
    np.testing.assert_array_equal(head_gradient(net, mw), -phi)
    np.testing.assert_array_equal(head_gradient(net, mw_f, film_params=fp), -fp.gamma * phi)


@pytest.mark.parametrize("loss", ["mae", "mse"])
def test_head_gradient_matches_backward(loss):
    net = small_net()
    mw = _mw(net, 7, seed=3)
    fp = FilmParams(np.array([1.5, 0.5, 1.0, 2.0]), np.array([0.1, -0.2, 0.0, 0.3]))
    _, g = backward(net, mw.inputs, mw.labels, loss, fp)
    np.testing.assert_allclose(head_gradient(net, mw, loss, fp), g["head.w"] * mw.size, atol=1e-10)
