import numpy as np
import pytest
from hypothesis import given, strategies as st

from metatsr.errors import ConfigError, DataError
from metatsr.series import (
    LabeledWindow,
    LongSeries,
    MetaWindow,
    PreprocessParams,
    VirtualTask,
    WindowSpec,
    autocorrelation,
    denormalize_target,
    fit_preprocess,
    generate_meta_windows,
    impute,
    normalize_target,
    preprocess,
    rolling_window,
    rolling_window_arrays,
    series_meta_windows,
    split_series,
    summarize,
    virtual_tasks,
)


def make_series(L, C=1, sid="s", seed=0):
    rng = np.random.default_rng(seed)
    return LongSeries(rng.normal(size=(L, C)), rng.normal(size=L), sid)


def brute_windows(L, delta, k):
    """Every start j*k whose label index j*k + delta is still inside the series."""
    out, j = [], 0
    while j * k + delta <= L - 1:
        out.append(j * k)
        j += 1
    return out


# -- LongSeries ------------------------------------------------------------


def test_long_series_shape_mismatch():
    with pytest.raises(DataError):
        LongSeries(np.zeros((5, 2)), np.zeros(4), "x")


def test_long_series_rejects_unknown_split():
    with pytest.raises(DataError):
        LongSeries(np.zeros((5, 2)), np.zeros(5), "x", split="holdout")


def test_long_series_is_immutable():
    s = make_series(5)
    with pytest.raises(ValueError):
        s.channels[0, 0] = 1.0


def test_window_spec_rejects_nonpositive():
    with pytest.raises(ConfigError):
        WindowSpec(0, 1)
    with pytest.raises(ConfigError):
        WindowSpec(3, 0)


# -- rolling window --------------------------------------------------------


def test_rolling_window_l10_d3_k1():
    s = make_series(10)
    ws = rolling_window(s, WindowSpec(3, 1))
    assert len(ws) == 7
    np.testing.assert_array_equal(ws[0].inputs, s.channels[0:3])
    assert ws[0].label == s.target[3]


def test_rolling_window_boundary_single_window():
    s = make_series(6)
    assert len(rolling_window(s, WindowSpec(5, 1))) == 1


def test_rolling_window_l11_d3_k4():
    s = make_series(11)
    ws = rolling_window(s, WindowSpec(3, 4))
    assert len(ws) == 2
    assert ws[0].label == s.target[3]
    assert ws[1].label == s.target[7]


def test_rolling_window_too_short():
    with pytest.raises(DataError, match="series shorter than window plus label"):
        rolling_window(make_series(3), WindowSpec(3, 1))


def test_rolling_window_rejects_nan():
    s = LongSeries(np.array([[1.0], [np.nan], [2.0], [3.0]]), np.arange(4.0), "x")
    with pytest.raises(DataError):
        rolling_window(s, WindowSpec(2, 1))


def test_window_count_exhaustive():
    for L in range(1, 65):
        for delta in range(1, 17):
            for k in range(1, 9):
                assert WindowSpec(delta, k).count(L) == len(brute_windows(L, delta, k))


@given(st.integers(2, 64), st.integers(1, 16), st.integers(1, 8), st.integers(1, 3))
def test_labels_round_trip_to_source(L, delta, k, C):
    if L <= delta:
        return
    s = make_series(L, C)
    X, y, origins = rolling_window_arrays(s, WindowSpec(delta, k))
    assert list(origins) == brute_windows(L, delta, k)
    np.testing.assert_array_equal(y, s.target[origins + delta])
    for i, o in enumerate(origins):
        np.testing.assert_array_equal(X[i], s.channels[o : o + delta])


# -- meta-windows ----------------------------------------------------------


def _windows(n):
    return [LabeledWindow(np.full((2, 1), i), float(i), i) for i in range(n)]


@pytest.mark.parametrize("n,l,expected", [(103, 50, 2), (50, 50, 1), (49, 50, 0), (0, 5, 0)])
def test_meta_window_counts(n, l, expected):
    mws = generate_meta_windows(_windows(n), l, "s")
    assert len(mws) == expected
    assert n - expected * l == n % l


def test_meta_windows_partition_and_order():
    mws = generate_meta_windows(_windows(23), 5, "s")
    origins = np.concatenate([m.origin_indices for m in mws])
    np.testing.assert_array_equal(origins, np.arange(20))
    assert [m.t_index for m in mws] == [0, 1, 2, 3]


def test_meta_window_rejects_unordered_windows():
    with pytest.raises(DataError):
        MetaWindow(np.zeros((2, 2, 1)), np.zeros(2), np.array([3, 1]), "s", 0)


def test_meta_window_round_trips_through_windows():
    mw = generate_meta_windows(_windows(4), 4, "s")[0]
    again = MetaWindow.from_windows(mw.windows, "s", 0)
    np.testing.assert_array_equal(again.inputs, mw.inputs)
    np.testing.assert_array_equal(again.labels, mw.labels)


def test_meta_window_combinatorics_exhaustive():
    for L in range(2, 65):
        for delta in range(1, 17):
            if L <= delta:
                continue
            for k in range(1, 9):
                n = len(brute_windows(L, delta, k))
                s = make_series(L)
                for l in range(1, 9):
                    mws = series_meta_windows(s, WindowSpec(delta, k), l)
                    assert len(mws) == n // l
                    used = sum(m.size for m in mws)
                    assert n - used == n % l < l
                    # virtual tasks: one per adjacent pair
                    assert len(virtual_tasks(mws)) == max(0, n // l - 1)


# -- virtual tasks ---------------------------------------------------------


def _mws(sid, n):
    return [MetaWindow(np.zeros((1, 1, 1)), np.zeros(1), np.array([t]), sid, t) for t in range(n)]


def test_virtual_tasks_step1():
    assert len(virtual_tasks(_mws("a", 5), 1)) == 4


def test_virtual_tasks_step2():
    tasks = virtual_tasks(_mws("a", 5), 2)
    assert [t.support.t_index for t in tasks] == [0, 2]


def test_virtual_tasks_two_series():
    tasks = virtual_tasks(_mws("a", 3) + _mws("b", 3), 1)
    assert len(tasks) == 4
    assert all(t.support.series_id == t.query.series_id for t in tasks)


@given(st.lists(st.integers(0, 6), min_size=1, max_size=5), st.integers(1, 3))
def test_virtual_tasks_never_span_series(lengths, step):
    mws = [m for i, n in enumerate(lengths) for m in _mws(f"s{i}", n)]
    # shuffle order: grouping must not depend on input order
    mws = mws[::-1]
    tasks = virtual_tasks(mws, step)
    assert len(tasks) == sum(len(range(0, max(n - 1, 0), step)) for n in lengths)
    for t in tasks:
        assert t.support.series_id == t.query.series_id
        assert t.query.t_index == t.support.t_index + 1


def test_virtual_task_rejects_non_adjacent():
    a, _, c = _mws("a", 3)
    with pytest.raises(DataError):
        VirtualTask(a, c)


# -- summaries -------------------------------------------------------------


def test_summarize_direct_construction():
    inputs = np.array([[[0.5], [9.0]], [[0.7], [9.0]]])
    mw = MetaWindow(inputs, np.array([1.0, 2.0]), np.array([0, 1]), "s", 0)
    np.testing.assert_array_equal(summarize(mw).values, [[0.5, 1.0], [0.7, 2.0]])


def test_summarize_shape_hr_like():
    mw = MetaWindow(np.zeros((50, 32, 13)), np.zeros(50), np.arange(50), "s", 0)
    assert summarize(mw).values.shape == (50, 14)


def test_summarize_constant_series_rows_identical():
    s = LongSeries(np.full((30, 2), 3.0), np.full(30, 1.5), "c")
    mw = series_meta_windows(s, WindowSpec(4, 1), 10)[0]
    v = summarize(mw).values
    assert (v == v[0]).all()


@given(st.integers(1, 6), st.integers(1, 5), st.integers(1, 4))
def test_summary_columns_reproduce_first_step(l, delta, C):
    s = make_series(l * 2 + delta + 1, C, seed=l + delta)
    mw = series_meta_windows(s, WindowSpec(delta, 1), l)[0]
    v = summarize(mw).values
    np.testing.assert_array_equal(v[:, :C], mw.inputs[:, 0, :])
    np.testing.assert_array_equal(v[:, C], mw.labels)


# -- imputation and preprocessing -----------------------------------------


def test_impute_interpolates_and_holds_edges():
    out = impute(np.array([np.nan, 1.0, np.nan, 3.0, np.nan]), "interpolate")
    np.testing.assert_array_equal(out, [1.0, 1.0, 2.0, 3.0, 3.0])


def test_impute_constant_and_zero():
    np.testing.assert_array_equal(impute(np.array([np.nan, 1.0]), "zero"), [0.0, 1.0])
    np.testing.assert_array_equal(impute(np.array([np.nan, 1.0]), "constant:-1"), [-1.0, 1.0])


def test_impute_unknown_policy():
    with pytest.raises(ConfigError):
        impute(np.zeros(2), "median")


def test_preprocess_standardizes_train():
    train = LongSeries(np.array([[2.0], [4.0], [6.0]]), np.array([0.0, 1.0, 2.0]), "t")
    params = fit_preprocess([train])
    out = preprocess(train, params)
    assert abs(out.channels.mean()) < 1e-12
    assert out.target[0] == 0.0 and out.target[-1] == 1.0


def test_preprocess_clamps_out_of_range_test_targets():
    train = LongSeries(np.zeros((3, 1)) + [[1.0], [2.0], [3.0]], np.array([0.0, 1.0, 2.0]), "t")
    params = fit_preprocess([train])
    test = LongSeries(np.ones((2, 1)), np.array([5.0, -1.0]), "x", "test")
    np.testing.assert_array_equal(preprocess(test, params).target, [1.0, 0.0])


def test_preprocess_degenerate_target():
    with pytest.raises(DataError, match="degenerate target range"):
        fit_preprocess([LongSeries(np.arange(3.0)[:, None], np.ones(3), "t")])


def test_preprocess_std_floor():
    params = fit_preprocess([LongSeries(np.ones((4, 1)), np.arange(4.0), "t")])
    assert params.std[0] == pytest.approx(1e-8)


def test_preprocess_imputes_before_scaling():
    raw = LongSeries(np.array([[1.0], [np.nan], [3.0], [5.0]]), np.array([0.0, np.nan, 1.0, 2.0]), "t")
    params = fit_preprocess([raw])
    out = preprocess(raw, params)
    assert out.is_finite()
    assert out.target[1] == 0.0  # target NaN -> 0 before scaling, which is the train min


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20))
def test_target_normalization_round_trip(values):
    y = np.array(values)
    if y.max() - y.min() < 1e-6:
        return
    params = PreprocessParams((0.0,), (1.0,), float(y.min()), float(y.max()), ("interpolate",))
    back = denormalize_target(normalize_target(y, params, clamp=False), params)
    np.testing.assert_allclose(back, y, atol=1e-9, rtol=0)


def test_preprocess_params_dict_round_trip():
    p = PreprocessParams((1.0, 2.0), (0.5, 3.0), -1.0, 4.0, ("interpolate", "constant:-1"), "zero", ("a", "b"))
    assert PreprocessParams.from_dict(p.to_dict()) == p


# -- splits ----------------------------------------------------------------


@pytest.mark.parametrize("m,expected", [(5, (3, 1, 1)), (15, (9, 3, 3)), (3, (1, 1, 1)), (6, (4, 1, 1))])
def test_split_counts(m, expected):
    series = [make_series(5, sid=f"s{i}") for i in range(m)]
    parts = split_series(series)
    assert tuple(len(p) for p in parts) == expected
    ids = [s.id for p in parts for s in p]
    assert ids == [s.id for s in series]
    assert [s.split for s in parts[1]] == ["validation"] * expected[1]


def test_split_too_few_series():
    with pytest.raises(DataError):
        split_series([make_series(5, sid="a"), make_series(5, sid="b")])


def test_split_manifest_overrides():
    series = [make_series(5, sid=s) for s in ("a", "b")]
    train, val, test = split_series(series, manifest={"a": "test", "b": "train"})
    assert [s.id for s in train] == ["b"] and [s.id for s in test] == ["a"] and not val


def test_split_manifest_missing_series():
    with pytest.raises(DataError):
        split_series([make_series(5, sid="a")], manifest={})


# -- autocorrelation -------------------------------------------------------


def test_acf_lag0_is_one():
    assert autocorrelation(np.random.default_rng(1).normal(size=50), 5)[0] == 1.0


def test_acf_white_noise_small():
    acf = autocorrelation(np.random.default_rng(2).normal(size=10000), 20)
    assert np.abs(acf[1:]).max() < 0.05


def test_acf_linear_trend():
    assert autocorrelation(np.arange(1000.0), 1)[1] > 0.99


def test_acf_matches_direct_formula():
    y = np.random.default_rng(3).normal(size=40)
    d = y - y.mean()
    expected = [np.sum(d[: 40 - k] * d[k:]) / np.sum(d * d) for k in range(6)]
    np.testing.assert_allclose(autocorrelation(y, 5), expected, atol=1e-12)


def test_acf_constant_series():
    with pytest.raises(DataError, match="constant series"):
        autocorrelation(np.ones(10), 3)
