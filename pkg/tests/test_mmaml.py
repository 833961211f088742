import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from metatsr.config import MamlConfig, MetaTestConfig, MmamlConfig, NetConfig
from metatsr.errors import DataError
from metatsr.evaluation import MmamlAdapter, meta_test
from metatsr.maml import TaskArrays, maml_meta_loss, meta_train
from metatsr.mmaml import (
    ModulationNetwork,
    embed,
    encode,
    encode_stats,
    kl_divergence,
    mmaml_adapt_and_predict,
    mmaml_meta_train,
    mmaml_objective,
    mmaml_query_loss,
    modulate,
    split_similarity,
    vae_loss,
)
from metatsr.net import FilmParams, TaskNetwork, predict
from metatsr.rng import derive_rng
from metatsr.series import MetaWindow, summarize
from metatsr.synthetic import synth_task_family
from metatsr.verify import mmaml_gradient_check

finite = st.floats(-5, 5, allow_nan=False)


def small_pair(seed=0, C=2, F=4, Z=3, H=5):
    rng = np.random.default_rng(seed)
    net = TaskNetwork.init(NetConfig(input_dim=C, window_size=3, hidden_sizes=(4,), feature_dim=F), rng)
    net = net.with_head(rng.normal(size=F), 0.1)
    mod = ModulationNetwork.init(C + 1, F, H, Z, rng)
    return net, mod


def random_mw(rng, l=6, delta=3, C=2, t=0):
    return MetaWindow(rng.normal(size=(l, delta, C)), rng.normal(size=l), np.arange(l * t, l * t + l), "s", t)


# -- VAE identities --------------------------------------------------------


def test_kl_standard_normal_is_zero():
    assert kl_divergence(np.zeros(7), np.zeros(7)) == 0.0


def test_kl_hand_value():
    assert kl_divergence(np.array([1.0, 0.0]), np.zeros(2)) == pytest.approx(0.5, abs=1e-12)


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_kl_non_negative(mu, logvar):
    assert kl_divergence(mu, logvar) >= 0.0


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mu, logvar = np.array([0.3, -0.5]), np.array([-0.2, 0.4])
    sd = np.exp(0.5 * logvar)
    z = mu + sd * rng.standard_normal((400_000, 2))
    log_q = -0.5 * (((z - mu) / sd) ** 2 + logvar).sum(axis=1)
    log_p = -0.5 * (z**2).sum(axis=1)
    assert kl_divergence(mu, logvar) == pytest.approx((log_q - log_p).mean(), abs=5e-3)


def test_vae_loss_perfect_reconstruction():
    S = np.random.default_rng(0).normal(size=(5, 3))
    assert vae_loss(S, S, np.zeros(4), np.zeros(4)) == 0.0


def test_vae_loss_is_mean_squared_plus_kl():
    rng = np.random.default_rng(1)
    S, R = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    mu, lv = rng.normal(size=2), rng.normal(size=2)
    assert vae_loss(S, R, mu, lv) == pytest.approx(np.mean((S - R) ** 2) + kl_divergence(mu, lv), abs=1e-14)


# -- encode / modulate -----------------------------------------------------


def test_deterministic_encode_is_bit_equal():
    _, mod = small_pair()
    s = summarize(random_mw(np.random.default_rng(0)))
    assert np.array_equal(encode(mod, s), encode(mod, s))


def test_stochastic_encode_collapses_with_tiny_variance():
    _, mod = small_pair()
    mod = mod.with_params({"enc.logvar.W": np.zeros_like(mod.params["enc.logvar.W"]), "enc.logvar.b": np.full(3, -40.0)})
    s = summarize(random_mw(np.random.default_rng(0)))
    z = encode(mod, s, stochastic=True, rng=np.random.default_rng(1))
    np.testing.assert_allclose(z, encode(mod, s), atol=1e-8)


def test_stochastic_encode_mean_matches_mu():
    _, mod = small_pair()
    s = summarize(random_mw(np.random.default_rng(0)))
    mu, logvar = encode_stats(mod, s)
    draws = encode(mod, s, stochastic=True, rng=np.random.default_rng(2), samples=100_000)
    se = np.exp(0.5 * logvar) / np.sqrt(draws.shape[0])
    assert (np.abs(draws.mean(axis=0) - mu) < 3 * se).all()


def test_stochastic_encode_needs_rng():
    _, mod = small_pair()
    with pytest.raises(ValueError):
        encode(mod, summarize(random_mw(np.random.default_rng(0))), stochastic=True)


def test_encode_rejects_wrong_summary_shape():
    _, mod = small_pair()
    with pytest.raises(DataError):
        encode(mod, np.zeros((4, 7)))


def test_zero_generator_is_identity_modulation():
    _, mod = small_pair()
    fp = modulate(mod, np.random.default_rng(0).normal(size=3))
    assert np.array_equal(fp.gamma, np.ones(4)) and np.array_equal(fp.beta, np.zeros(4))


def test_generator_output_size_for_default_head():
    mod = ModulationNetwork.init(4, 128, 8, 4, np.random.default_rng(0))
    assert mod.params["gen.W"].shape[1] == 256
    fp = modulate(mod, np.zeros(4))
    assert fp.gamma.shape == (128,) and fp.beta.shape == (128,)


def test_modulate_deterministic():
    _, mod = small_pair()
    mod = mod.with_params({"gen.W": np.random.default_rng(0).normal(size=(3, 8))})
    z = np.array([0.1, -0.2, 0.3])
    a, b = modulate(mod, z), modulate(mod, z)
    assert np.array_equal(a.gamma, b.gamma) and np.array_equal(a.beta, b.beta)


# -- joint objective -------------------------------------------------------


def _batch(rng, net, T=3, l=5, m=4):
    c = net.config
    return TaskArrays(
        rng.normal(size=(T, l, c.window_size, c.input_dim)),
        rng.normal(size=(T, l)),
        rng.normal(size=(T, m, c.window_size, c.input_dim)),
        rng.normal(size=(T, m)),
    )


def test_joint_gradients_match_finite_differences():
    for seed in range(3):
        report = mmaml_gradient_check(seed=seed, tolerance=1e-4)
        assert report.passed, (report.worst, report.max_error)


def test_identity_modulation_matches_maml_loss():
    net, mod = small_pair()
    batch = _batch(np.random.default_rng(3), net)
    mcfg = MmamlConfig(inner_lr=0.05, vrae_weight=0.0)
    step = mmaml_objective(net, mod, batch, mcfg)
    assert step.query_loss == pytest.approx(maml_meta_loss(net, batch, mcfg), abs=1e-12)
    assert mmaml_query_loss(net, mod, batch, mcfg) == pytest.approx(maml_meta_loss(net, batch, mcfg), abs=1e-12)


def test_decoder_gradient_comes_only_from_the_vae_term():
    net, mod = small_pair()
    mod = mod.with_params({"gen.W": 0.2 * np.random.default_rng(0).normal(size=(3, 8))})
    batch = _batch(np.random.default_rng(4), net)
    eta = np.random.default_rng(5).normal(size=(3, 3))
    without = mmaml_objective(net, mod, batch, MmamlConfig(inner_lr=0.05, vrae_weight=0.0), eta)
    with_vae = mmaml_objective(net, mod, batch, MmamlConfig(inner_lr=0.05, vrae_weight=0.5), eta)
    for k in without.mod_grads:
        if k.startswith("dec."):
            assert not without.mod_grads[k].any()
            assert np.abs(with_vae.mod_grads[k]).max() > 0


def test_frozen_identity_modulation_follows_maml_trajectory(small_data):
    cfg = NetConfig(input_dim=small_data.n_channels, window_size=5, hidden_sizes=(6,), feature_dim=6)
    net = TaskNetwork.init(cfg, derive_rng(0, "init.task"))
    mod = ModulationNetwork.init(small_data.n_channels + 1, 6, 4, 2, derive_rng(0, "init.mod"))
    common = dict(inner_lr=0.01, meta_lr=0.003, optimizer="adam", meta_epochs=20, patience=20, meta_batch_size=5)
    tr, va = small_data.tasks("train"), small_data.tasks("validation")
    _, log_a = meta_train(tr, net, MamlConfig(**common), va, seed=3)
    _, _, log_b = mmaml_meta_train(tr, net, mod, MmamlConfig(**common, vrae_weight=0.0, freeze_modulation=True), va, seed=3)
    a = np.array([r["train_loss"] for r in log_a.rows[1:]])
    b = np.array([r["train_loss"] for r in log_b.rows[1:]])
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


# -- inference -------------------------------------------------------------


def test_inference_identity_and_zero_lr_is_unadapted():
    net, mod = small_pair()
    rng = np.random.default_rng(0)
    support, q = random_mw(rng), random_mw(rng, t=1)
    out = mmaml_adapt_and_predict(net, mod, support, [q], MmamlConfig(inner_lr=0.0))
    np.testing.assert_array_equal(out.predictions[0], predict(net, q.inputs))


def test_inference_is_deterministic():
    net, mod = small_pair()
    mod = mod.with_params({"gen.W": 0.2 * np.random.default_rng(1).normal(size=(3, 8))})
    rng = np.random.default_rng(0)
    support, q = random_mw(rng), random_mw(rng, t=1)
    a = mmaml_adapt_and_predict(net, mod, support, [q], MmamlConfig(inner_lr=0.1))
    b = mmaml_adapt_and_predict(net, mod, support, [q], MmamlConfig(inner_lr=0.1))
    assert np.array_equal(a.predictions[0], b.predictions[0]) and a.mae == b.mae


def test_inference_rejects_mismatched_modulation():
    net, _ = small_pair()
    other = ModulationNetwork.init(3, 5, 4, 3, np.random.default_rng(0))
    rng = np.random.default_rng(0)
    with pytest.raises(DataError):
        mmaml_adapt_and_predict(net, other, random_mw(rng), [random_mw(rng, t=1)], MmamlConfig())


# -- split similarity ------------------------------------------------------


def test_split_similarity_identical():
    e = np.random.default_rng(0).normal(size=(5, 3))
    assert all(v == 0.0 for v in split_similarity({"train": e, "validation": e, "test": e}).values())


def test_split_similarity_translation():
    e = np.random.default_rng(0).normal(size=(5, 3))
    v = np.array([1.0, -2.0, 0.5])
    d = split_similarity({"train": e, "validation": e, "test": e + v})
    assert d[("train", "test")] == pytest.approx(np.linalg.norm(v), abs=1e-12)


def test_split_similarity_brute_force():
    rng = np.random.default_rng(1)
    clouds = {k: rng.normal(loc=i, size=(4 + i, 3)) for i, k in enumerate(("train", "validation", "test"))}
    d = split_similarity(clouds)
    for (a, b), value in d.items():
        ma = [sum(r[j] for r in clouds[a]) / len(clouds[a]) for j in range(3)]
        mb = [sum(r[j] for r in clouds[b]) / len(clouds[b]) for j in range(3)]
        assert value == pytest.approx(sum((x - y) ** 2 for x, y in zip(ma, mb)) ** 0.5, abs=1e-12)


def test_split_similarity_empty_split():
    with pytest.raises(DataError):
        split_similarity({"train": np.zeros((0, 3)), "test": np.ones((2, 3))})


# -- training on the synthetic family -------------------------------------


@pytest.fixture(scope="module")
def trained_mmaml(small_data):
    cfg = NetConfig(input_dim=small_data.n_channels, window_size=5, hidden_sizes=(8,), feature_dim=8)
    net = TaskNetwork.init(cfg, derive_rng(0, "init.task"))
    mod = ModulationNetwork.init(small_data.n_channels + 1, 8, 16, 4, derive_rng(0, "init.mod"))
    mcfg = MmamlConfig(
        inner_lr=0.01, meta_lr=0.003, optimizer="adam", meta_epochs=200, patience=200, eval_every=20, vrae_weight=0.1
    )
    n, m, log = mmaml_meta_train(small_data.tasks("train"), net, mod, mcfg, small_data.tasks("validation"), seed=0)
    return n, m, mcfg, log


def test_reconstruction_decreases_over_training(trained_mmaml):
    *_, log = trained_mmaml
    recon = np.array([r["recon_loss"] for r in log.rows[1:201]])
    blocks = recon.reshape(4, 50).mean(axis=1)
    assert (np.diff(blocks) < 0).all(), blocks
    slope = np.polyfit(np.arange(recon.size), recon, 1)[0]
    assert slope < 0


def test_embeddings_separate_regimes(small_data, trained_mmaml):
    _, mod, _, _ = trained_mmaml
    family = synth_task_family(regimes=2, series_count=6, length=1200, seed=0)
    mws = small_data.meta_windows["train"]
    z = embed(mod, mws)
    regime = np.array([family.regime_of(m.series_id) for m in mws])
    c0, c1 = z[regime == 0].mean(axis=0), z[regime == 1].mean(axis=0)
    within = np.mean(
        [np.linalg.norm(z[regime == r] - z[regime == r].mean(axis=0), axis=1).mean() for r in (0, 1)]
    )
    assert np.linalg.norm(c0 - c1) > within


def test_horizon_one_beats_horizon_ten(small_data, trained_mmaml):
    net, mod, mcfg, _ = trained_mmaml
    res = meta_test(MmamlAdapter(net, mod, mcfg.inner_lr), small_data.meta_windows["test"], MetaTestConfig(runs=1))
    assert res.per_horizon_mae[0] <= res.per_horizon_mae[9]
