"""Self-checks: kernel-oracle equivalence and finite-difference gradient
checks for every trainable component. Used by ``metatsr gradcheck`` and the
test suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import MamlConfig, MmamlConfig, NetConfig
from .maml import TaskArrays, inner_adapt, kernel_oracle_predict, maml_meta_grads, maml_meta_loss
from .mmaml import ModulationNetwork, joint_params, mmaml_objective, split_params
from .net import (
    FilmParams,
    GradCheckReport,
    TaskNetwork,
    features,
    finite_difference,
    gradient_check,
    relative_errors,
)
from .series import MetaWindow


@dataclass(frozen=True)
class OracleReport:
    instances: int
    max_abs_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_error <= self.tolerance


def random_net(rng: np.random.Generator, *, small: bool = True) -> TaskNetwork:
    """Random small task network with a non-zero head."""
    depth = int(rng.integers(1, 3))
    cfg = NetConfig(
        input_dim=int(rng.integers(1, 4)),
        window_size=int(rng.integers(2, 6)),
        hidden_sizes=tuple(int(h) for h in rng.integers(2, 5 if small else 9, size=depth)),
        feature_dim=int(rng.integers(2, 6 if small else 17)),
        projection="tanh" if rng.random() < 0.5 else "identity",
    )
    net = TaskNetwork.init(cfg, rng)
    return net.with_head(rng.normal(size=cfg.feature_dim), float(rng.normal()))


def random_meta_window(rng: np.random.Generator, net: TaskNetwork, l: int) -> MetaWindow:
    c = net.config
    return MetaWindow(
        rng.normal(size=(l, c.window_size, c.input_dim)), rng.normal(size=l), np.arange(l), "rand", 0
    )


def kernel_oracle_suite(instances: int = 100, seed: int = 0, tolerance: float = 1e-10) -> OracleReport:
    """One-step MAE adaptation versus the kernel form on random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        net = random_net(rng, small=False)
        support = random_meta_window(rng, net, int(rng.integers(1, 12)))
        query = rng.normal(size=(int(rng.integers(1, 6)), net.config.window_size, net.config.input_dim))
        alpha = float(10.0 ** rng.uniform(-4, 0))
        head = inner_adapt(net, support, MamlConfig(inner_lr=alpha, inner_steps=1))
        adapted = features(net, query) @ head.theta_prime + head.bias_prime
        oracle = kernel_oracle_predict(net, support, query, alpha)
        worst = max(worst, float(np.abs(adapted - oracle).max()))
    return OracleReport(instances, worst, tolerance)


def _random_tasks(rng, net: TaskNetwork, T: int, l: int, m: int) -> TaskArrays:
    c = net.config
    return TaskArrays(
        rng.normal(size=(T, l, c.window_size, c.input_dim)),
        rng.normal(size=(T, l)),
        rng.normal(size=(T, m, c.window_size, c.input_dim)),
        rng.normal(size=(T, m)),
    )


def _small_config() -> NetConfig:
    return NetConfig(input_dim=2, window_size=3, hidden_sizes=(3, 2), feature_dim=4)


def maml_gradient_check(seed: int = 0, tolerance: float = 1e-4, second_order: bool = True) -> GradCheckReport:
    """Exact one-step meta-gradient versus finite differences of the meta-loss."""
    rng = np.random.default_rng(seed)
    net = TaskNetwork.init(_small_config(), rng)
    net = net.with_head(rng.normal(size=4), 0.1)
    batch = _random_tasks(rng, net, T=3, l=4, m=3)
    cfg = MamlConfig(inner_lr=0.1, second_order=second_order)
    _, grads = maml_meta_grads(net, batch, cfg)
    numeric = finite_difference(lambda p: maml_meta_loss(TaskNetwork(net.config, p), batch, cfg), net.params)
    return GradCheckReport(relative_errors(grads, numeric), tolerance)


def mmaml_gradient_check(seed: int = 0, tolerance: float = 1e-4, vrae_weight: float = 0.5) -> GradCheckReport:
    """Joint task + modulation gradients (with a fixed reparameterisation draw)
    versus finite differences of the MMAML objective."""
    rng = np.random.default_rng(seed)
    net = TaskNetwork.init(_small_config(), rng)
    net = net.with_head(rng.normal(size=4), 0.1)
    mod = ModulationNetwork.init(3, 4, 3, 2, rng)
    # a non-zero generator so every path carries gradient
    mod = mod.with_params({"gen.W": 0.3 * rng.normal(size=(2, 8)), "gen.b": 0.1 * rng.normal(size=8)})
    batch = _random_tasks(rng, net, T=2, l=4, m=3)
    eta = rng.normal(size=(2, 2))
    cfg = MmamlConfig(inner_lr=0.1, vrae_weight=vrae_weight)
    step = mmaml_objective(net, mod, batch, cfg, eta)
    analytic = joint_params(TaskNetwork(net.config, step.net_grads), mod.with_params(step.mod_grads))

    def loss(p):
        n, m = split_params(p)
        return mmaml_objective(TaskNetwork(net.config, n), mod.with_params(m), batch, cfg, eta).loss

    numeric = finite_difference(loss, joint_params(net, mod))
    return GradCheckReport(relative_errors(analytic, numeric), tolerance)


def all_gradient_checks(seed: int = 0, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    net = TaskNetwork.init(_small_config(), rng)
    net = net.with_head(rng.normal(size=4), 0.2)
    film = FilmParams(1.0 + 0.3 * rng.normal(size=4), 0.3 * rng.normal(size=4))
    return {
        "task network (mse)": gradient_check(net, tolerance, loss="mse", seed=seed),
        "task network (mae)": gradient_check(net, tolerance, loss="mae", seed=seed),
        "task network + FiLM": gradient_check(net, tolerance, loss="mse", film_params=film, seed=seed),
        "maml meta-gradient": maml_gradient_check(seed, tolerance),
        "mmaml joint objective": mmaml_gradient_check(seed, tolerance),
    }
