"""Synthetic task families for desk-scale experiments.

Each series draws ``C`` AR(1) input channels and a scalar target

    y_t = c(t) + g(t) * f_r(w_r . x_{t-1}) + noise

where ``r`` is the series' regime, ``f_r`` is the identity or ``tanh`` and
the intercept ``c`` and gain ``g`` drift sinusoidally with a long period.
Temporally close meta-windows therefore share nearly the same regression
task while distant ones do not. Regimes also differ in their input
dynamics, which is what lets a summary encoder tell them apart.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import derive_rng
from .series import LongSeries

NONLINEARITIES = ("linear", "tanh")


@dataclass(frozen=True)
class RegimeParams:
    input_ar: float
    input_mean: tuple[float, ...]
    weights: tuple[float, ...]
    nonlinearity: str

    def link(self, a: np.ndarray) -> np.ndarray:
        return np.tanh(a) if self.nonlinearity == "tanh" else a


@dataclass(frozen=True)
class SeriesParams:
    series_id: str
    regime: int
    offset: float
    intercept_phase: float
    gain_phase: float


@dataclass(frozen=True)
class SynthConfig:
    regimes: int = 2
    series_count: int = 6
    length: int = 3000
    seed: int = 0
    n_channels: int = 3
    drift: bool = True
    intercept_amplitude: float = 0.5
    gain_amplitude: float = 0.6
    drift_period: int = 600
    input_ar: tuple[float, float] = (0.98, 0.9)
    input_noise: float = 0.2
    noise_std: float = 0.05
    linear_only: bool = False


@dataclass(frozen=True)
class SynthFamily:
    series: list[LongSeries]
    regimes: list[RegimeParams]
    series_params: list[SeriesParams]
    config: SynthConfig
    drift_terms: dict[str, tuple[np.ndarray, np.ndarray]] = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        """Generator parameters, for logging next to emitted data."""
        return {
            "config": asdict(self.config),
            "regimes": [asdict(r) for r in self.regimes],
            "series": [asdict(s) for s in self.series_params],
        }

    def regime_of(self, series_id: str) -> int:
        return next(s.regime for s in self.series_params if s.series_id == series_id)


def _regimes(cfg: SynthConfig, rng: np.random.Generator) -> list[RegimeParams]:
    out = []
    for r in range(cfg.regimes):
        # alternate sign patterns keep the regimes' weight vectors well apart
        sign = np.where((np.arange(cfg.n_channels) + r) % 2 == 0, 1.0, -1.0)
        weights = sign * rng.uniform(0.6, 1.2, cfg.n_channels)
        mean = (1.0 if r % 2 == 0 else -1.0) * (1.0 + 0.5 * (r // 2)) * np.ones(cfg.n_channels)
        out.append(
            RegimeParams(
                input_ar=cfg.input_ar[r % 2],
                input_mean=tuple(float(m) for m in mean),
                weights=tuple(float(w) for w in weights),
                nonlinearity="linear" if cfg.linear_only or r % 2 == 0 else "tanh",
            )
        )
    return out


def _inputs(regime: RegimeParams, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    C, L = cfg.n_channels, cfg.length
    rho = regime.input_ar
    mean = np.asarray(regime.input_mean)
    # stationary start, then x_t = mean + rho (x_{t-1} - mean) + e_t
    e = rng.normal(0.0, cfg.input_noise, (L, C))
    x = np.empty((L, C))
    x[0] = mean + e[0] / np.sqrt(1 - rho**2)
    for t in range(1, L):
        x[t] = mean + rho * (x[t - 1] - mean) + e[t]
    return x


def drift_terms(cfg: SynthConfig, sp: SeriesParams) -> tuple[np.ndarray, np.ndarray]:
    """Intercept ``c(t)`` and gain ``g(t)`` of one series."""
    t = np.arange(cfg.length)
    if not cfg.drift:
        return np.full(cfg.length, sp.offset), np.ones(cfg.length)
    w = 2 * np.pi / cfg.drift_period
    c = sp.offset + cfg.intercept_amplitude * np.sin(w * t + sp.intercept_phase)
    g = 1.0 + cfg.gain_amplitude * np.sin(w * t + sp.gain_phase)
    return c, g


def synth_task_family(
    regimes: int = 2, series_count: int = 6, length: int = 3000, seed: int = 0, **overrides
) -> SynthFamily:
    """Generate ``series_count`` series; series ``i`` belongs to regime ``i % regimes``."""
    if regimes < 1:
        raise ValueError("regimes must be at least 1")
    cfg = SynthConfig(regimes=regimes, series_count=series_count, length=length, seed=seed, **overrides)
    rng = derive_rng(seed, "synth")
    regime_params = _regimes(cfg, rng)
    series, params, terms = [], [], {}
    for i in range(series_count):
        r = i % regimes
        sp = SeriesParams(
            series_id=f"S{i + 1:02d}",
            regime=r,
            offset=float(rng.normal(0.0, 0.2)),
            intercept_phase=float(rng.uniform(0, 2 * np.pi)),
            gain_phase=float(rng.uniform(0, 2 * np.pi)),
        )
        rp = regime_params[r]
        x = _inputs(rp, cfg, rng)
        c, g = drift_terms(cfg, sp)
        a = x @ np.asarray(rp.weights) - float(np.dot(rp.weights, rp.input_mean))
        y = np.empty(cfg.length)
        y[0] = c[0]
        y[1:] = c[1:] + g[1:] * rp.link(a[:-1])
        y += rng.normal(0.0, cfg.noise_std, cfg.length)
        series.append(LongSeries(x, y, sp.series_id))
        params.append(sp)
        terms[sp.series_id] = (c, g)
    return SynthFamily(series, regime_params, params, cfg, terms)
