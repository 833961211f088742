"""Multimodal MAML: a variational recurrent autoencoder embeds the support
summary, and a linear generator turns the embedding into FiLM parameters for
the task head.

Modulation network
    encoder    LSTM over the summary ``(l, C+1)``; last hidden state -> ``mu``, ``logvar``
    decoder    LSTM fed ``z`` at each of ``l`` steps -> dense -> reconstruction ``(l, C+1)``
    generator  ``raw = z @ W + b``; ``gamma = 1 + raw[:F]``, ``beta = raw[F:]``

The generator starts at zero, so an untrained modulation network is the
identity FiLM. The decoder only feeds the VAE term and is unused at inference.

Per-task objective: post-adaptation query MAE (same FiLM for the inner loop and
the query) + ``vrae_weight * (mean squared reconstruction error + KL)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .config import MmamlConfig
from .errors import DataError
from .maml import (
    TaskArrays,
    TrainingLog,
    _batch_features,
    adapt_head,
    as_task_arrays,
    augment_labels,
    chunked_mean,
    meta_head_grads,
    sample_batch,
    _log,
)
from .net import (
    FilmParams,
    Params,
    TaskNetwork,
    _readonly,
    dense_init,
    extract_backward,
    features,
    lstm_backward,
    lstm_forward,
    lstm_init,
    params_hash,
)
from .optim import make_optimizer
from .rng import derive_rng
from .series import MetaWindow, MetaWindowSummary, summarize_arrays
from .training import TrainState, train_loop

MOD_PREFIX = "mod:"


@dataclass(frozen=True, eq=False)
class ModulationNetwork:
    summary_dim: int  # C + 1
    feature_dim: int  # F
    hidden_size: int
    latent_dim: int
    params: Params = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "params", _readonly(self.params))
        expected = self.param_shapes(self.summary_dim, self.feature_dim, self.hidden_size, self.latent_dim)
        if {k: v.shape for k, v in self.params.items()} != expected:
            raise DataError("modulation parameters do not match their configuration")

    @staticmethod
    def param_shapes(D: int, F: int, H: int, Z: int) -> dict[str, tuple[int, ...]]:
        return {
            "enc.lstm.W": (D + H, 4 * H),
            "enc.lstm.b": (4 * H,),
            "enc.mu.W": (H, Z),
            "enc.mu.b": (Z,),
            "enc.logvar.W": (H, Z),
            "enc.logvar.b": (Z,),
            "dec.lstm.W": (Z + H, 4 * H),
            "dec.lstm.b": (4 * H,),
            "dec.out.W": (H, D),
            "dec.out.b": (D,),
            "gen.W": (Z, 2 * F),
            "gen.b": (2 * F,),
        }

    @classmethod
    def init(cls, summary_dim: int, feature_dim: int, hidden_size: int, latent_dim: int, rng: np.random.Generator):
        p: Params = {}
        p["enc.lstm.W"], p["enc.lstm.b"] = lstm_init(rng, summary_dim, hidden_size)
        p["enc.mu.W"], p["enc.mu.b"] = dense_init(rng, hidden_size, latent_dim)
        p["enc.logvar.W"], p["enc.logvar.b"] = dense_init(rng, hidden_size, latent_dim)
        p["dec.lstm.W"], p["dec.lstm.b"] = lstm_init(rng, latent_dim, hidden_size)
        p["dec.out.W"], p["dec.out.b"] = dense_init(rng, hidden_size, summary_dim)
        p["gen.W"] = np.zeros((latent_dim, 2 * feature_dim))
        p["gen.b"] = np.zeros(2 * feature_dim)
        return cls(summary_dim, feature_dim, hidden_size, latent_dim, p)

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "ModulationNetwork":
        return ModulationNetwork(self.summary_dim, self.feature_dim, self.hidden_size, self.latent_dim, {**self.params, **updates})

    def hash(self) -> str:
        return params_hash(self.params)

    def dims(self) -> dict:
        return {
            "summary_dim": self.summary_dim,
            "feature_dim": self.feature_dim,
            "hidden_size": self.hidden_size,
            "latent_dim": self.latent_dim,
        }


# --------------------------------------------------------------------------
# encoder / decoder / generator


def encoder_forward(mod: ModulationNetwork, S: np.ndarray):
    """Summaries ``(T, l, C+1)`` -> ``mu, logvar`` of shape ``(T, Z)``."""
    p = mod.params
    hs, cache = lstm_forward(S, p["enc.lstm.W"], p["enc.lstm.b"])
    h = hs[:, -1]
    mu = h @ p["enc.mu.W"] + p["enc.mu.b"]
    logvar = h @ p["enc.logvar.W"] + p["enc.logvar.b"]
    return mu, logvar, (cache, h, hs.shape)


def encoder_backward(mod: ModulationNetwork, cache, dmu: np.ndarray, dlogvar: np.ndarray) -> Params:
    p = mod.params
    lcache, h, shape = cache
    g: Params = {
        "enc.mu.W": h.T @ dmu,
        "enc.mu.b": dmu.sum(axis=0),
        "enc.logvar.W": h.T @ dlogvar,
        "enc.logvar.b": dlogvar.sum(axis=0),
    }
    dhs = np.zeros(shape)
    dhs[:, -1] = dmu @ p["enc.mu.W"].T + dlogvar @ p["enc.logvar.W"].T
    _, g["enc.lstm.W"], g["enc.lstm.b"] = lstm_backward(dhs, lcache, p["enc.lstm.W"])
    return g


def decoder_forward(mod: ModulationNetwork, z: np.ndarray, length: int):
    """``z (T, Z)`` -> reconstruction ``(T, length, C+1)``; ``z`` is the input at every step."""
    p = mod.params
    zin = np.repeat(z[:, None, :], length, axis=1)
    hs, cache = lstm_forward(zin, p["dec.lstm.W"], p["dec.lstm.b"])
    return hs @ p["dec.out.W"] + p["dec.out.b"], (cache, hs)


def decoder_backward(mod: ModulationNetwork, cache, drecon: np.ndarray) -> tuple[Params, np.ndarray]:
    p = mod.params
    lcache, hs = cache
    g: Params = {
        "dec.out.W": np.einsum("tlh,tld->hd", hs, drecon),
        "dec.out.b": drecon.sum(axis=(0, 1)),
    }
    dhs = drecon @ p["dec.out.W"].T
    dzin, g["dec.lstm.W"], g["dec.lstm.b"] = lstm_backward(dhs, lcache, p["dec.lstm.W"])
    return g, dzin.sum(axis=1)


def generate(mod: ModulationNetwork, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = z @ mod.params["gen.W"] + mod.params["gen.b"]
    F = mod.feature_dim
    return 1.0 + raw[..., :F], raw[..., F:]


def _summary_values(summary) -> np.ndarray:
    values = summary.values if isinstance(summary, MetaWindowSummary) else np.asarray(summary, dtype=np.float64)
    return values


def encode_stats(mod: ModulationNetwork, summary) -> tuple[np.ndarray, np.ndarray]:
    S = _summary_values(summary)
    if S.ndim != 2 or S.shape[1] != mod.summary_dim:
        raise DataError(f"summary must be (l, {mod.summary_dim}), got {S.shape}")
    mu, logvar, _ = encoder_forward(mod, S[None])
    return mu[0], logvar[0]


def reparameterize(mu, logvar, eta):
    return mu + np.exp(0.5 * logvar) * eta


def encode(
    mod: ModulationNetwork,
    summary,
    stochastic: bool = False,
    rng: Optional[np.random.Generator] = None,
    samples: Optional[int] = None,
) -> np.ndarray:
    """Latent code for one summary: ``mu`` when deterministic, else ``mu + sigma * eta``.

    ``samples`` draws that many codes at once (shape ``(samples, Z)``).
    """
    mu, logvar = encode_stats(mod, summary)
    if not stochastic:
        return mu if samples is None else np.tile(mu, (samples, 1))
    if rng is None:
        raise ValueError("stochastic encoding needs an rng")
    shape = mu.shape if samples is None else (samples,) + mu.shape
    return reparameterize(mu, logvar, rng.standard_normal(shape))


def modulate(mod: ModulationNetwork, z: np.ndarray) -> FilmParams:
    gamma, beta = generate(mod, np.asarray(z, dtype=np.float64))
    return FilmParams(gamma, beta)


def kl_divergence(mu, logvar) -> np.ndarray:
    """KL[N(mu, diag exp(logvar)) || N(0, I)], summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=-1)


def vae_loss(summary, reconstruction, mu, logvar) -> float:
    """Mean squared reconstruction error over all entries plus the KL term."""
    S = _summary_values(summary)
    rec = np.mean((S - np.asarray(reconstruction, dtype=np.float64)) ** 2)
    return float(rec + kl_divergence(mu, logvar))


# --------------------------------------------------------------------------
# joint objective


@dataclass
class MmamlStep:
    loss: float
    query_loss: float
    vae_loss: float
    recon_loss: float
    net_grads: Params
    mod_grads: Params


def mmaml_objective(
    net: TaskNetwork,
    mod: ModulationNetwork,
    batch: TaskArrays,
    cfg: MmamlConfig,
    eta: Optional[np.ndarray] = None,
    support_y: Optional[np.ndarray] = None,
) -> MmamlStep:
    """Mean over tasks of ``query MAE + vrae_weight * VAE loss`` and its gradients.

    ``eta`` holds the standard-normal draws for the reparameterisation
    (``None`` encodes with ``z = mu``).
    """
    y_s = batch.support_y if support_y is None else support_y
    T, l = y_s.shape
    lam = cfg.vrae_weight
    S = summarize_arrays(batch.support_x, y_s)
    mu, logvar, enc_cache = encoder_forward(mod, S)
    z = mu if eta is None else reparameterize(mu, logvar, eta)
    gamma, beta = generate(mod, z)

    phi_s, phi_q, cache = _batch_features(net, batch)
    w, b = net.head
    mg = meta_head_grads(
        phi_s, y_s, phi_q, batch.query_y, w, b, cfg.inner_lr, cfg.inner_steps, gamma, beta, exact=cfg.second_order
    )
    F = phi_s.shape[-1]
    net_grads = extract_backward(net, cache, np.concatenate([mg.phi_s.reshape(-1, F), mg.phi_q.reshape(-1, F)]))
    net_grads["head.w"] = mg.head_w
    net_grads["head.b"] = np.asarray(mg.head_b)

    recon, dec_cache = decoder_forward(mod, z, l)
    diff = S - recon
    rec_t = np.mean(diff * diff, axis=(1, 2))
    kl_t = kl_divergence(mu, logvar)
    vae = float((rec_t + kl_t).mean())

    draw = np.concatenate([mg.gamma, mg.beta], axis=1)
    mod_grads: Params = {"gen.W": z.T @ draw, "gen.b": draw.sum(axis=0)}
    dz = draw @ mod.params["gen.W"].T
    drecon = -2.0 * diff * (lam / (T * diff[0].size))
    dec_grads, dz_dec = decoder_backward(mod, dec_cache, drecon)
    mod_grads.update(dec_grads)
    dz = dz + dz_dec
    dmu = dz + (lam / T) * mu
    dlogvar = (lam / T) * 0.5 * (np.exp(logvar) - 1.0)
    if eta is not None:
        dlogvar = dlogvar + dz * eta * 0.5 * np.exp(0.5 * logvar)
    mod_grads.update(encoder_backward(mod, enc_cache, dmu, dlogvar))
    return MmamlStep(
        loss=mg.loss + lam * vae,
        query_loss=mg.loss,
        vae_loss=vae,
        recon_loss=float(rec_t.mean()),
        net_grads=net_grads,
        mod_grads=mod_grads,
    )


def mmaml_query_loss(net: TaskNetwork, mod: ModulationNetwork, batch: TaskArrays, cfg: MmamlConfig, steps: Optional[int] = None) -> float:
    """Deterministic (``z = mu``) post-adaptation query MAE averaged over tasks."""
    S = summarize_arrays(batch.support_x, batch.support_y)
    mu, _, _ = encoder_forward(mod, S)
    gamma, beta = generate(mod, mu)
    phi_s, phi_q, _ = _batch_features(net, batch)
    w, b = net.head
    W, B, _ = adapt_head(phi_s, batch.support_y, w, b, cfg.inner_lr, cfg.inner_steps if steps is None else steps, gamma, beta)
    pred = np.einsum("tmf,tf->tm", phi_q, gamma * W + beta) + B[:, None]
    return float(np.abs(batch.query_y - pred).mean())


def split_params(params: Mapping[str, np.ndarray]) -> tuple[Params, Params]:
    net_p = {k: v for k, v in params.items() if not k.startswith(MOD_PREFIX)}
    mod_p = {k[len(MOD_PREFIX) :]: v for k, v in params.items() if k.startswith(MOD_PREFIX)}
    return net_p, mod_p


def joint_params(net: TaskNetwork, mod: ModulationNetwork) -> Params:
    return {**net.params, **{MOD_PREFIX + k: v for k, v in mod.params.items()}}


def mmaml_meta_train(
    train_tasks,
    net: TaskNetwork,
    mod: ModulationNetwork,
    cfg: MmamlConfig,
    validation_tasks,
    *,
    seed: int = 0,
    state: Optional[TrainState] = None,
    on_checkpoint=None,
    stop_at: Optional[int] = None,
) -> tuple[TaskNetwork, ModulationNetwork, TrainingLog]:
    """Jointly meta-train the task and modulation networks; early stopping on
    deterministic validation query MAE."""
    train = as_task_arrays(train_tasks)
    val = as_task_arrays(validation_tasks)
    if mod.feature_dim != net.feature_dim:
        raise DataError("generator output does not match the task head size")

    def rebuild(params):
        net_p, mod_p = split_params(params)
        return TaskNetwork(net.config, net_p), mod.with_params(mod_p)

    def step(params, rngs, optimizer):
        n, m = rebuild(params)
        batch = train.take(sample_batch(len(train), cfg.meta_batch_size, rngs["tasks"]))
        y_s = augment_labels(batch.support_y, cfg.noise_level, rngs["augment"])
        eta = None
        if cfg.stochastic_encode:
            eta = rngs["latent"].standard_normal((len(batch), mod.latent_dim))
        out = mmaml_objective(n, m, batch, cfg, eta, y_s)
        grads = dict(out.net_grads)
        if not cfg.freeze_modulation:
            grads.update({MOD_PREFIX + k: v for k, v in out.mod_grads.items()})
        extra = {"query_loss": out.query_loss, "vae_loss": out.vae_loss, "recon_loss": out.recon_loss}
        return out.loss, optimizer.step(params, grads), extra

    def validate(params):
        n, m = rebuild(params)
        return chunked_mean(lambda b: mmaml_query_loss(n, m, b, cfg), val)

    result = train_loop(
        joint_params(net, mod),
        step,
        validate,
        optimizer=make_optimizer(cfg.optimizer, cfg.meta_lr),
        epochs=cfg.meta_epochs,
        patience=cfg.patience,
        eval_every=cfg.eval_every,
        rngs={
            "tasks": derive_rng(seed, "tasks"),
            "augment": derive_rng(seed, "augment"),
            "latent": derive_rng(seed, "latent"),
        },
        state=state,
        on_checkpoint=on_checkpoint,
        checkpoint_every=cfg.checkpoint_every,
        stop_at=stop_at,
    )
    n, m = rebuild(result.params)
    return n, m, _log(result)


# --------------------------------------------------------------------------
# inference and analysis


@dataclass(frozen=True)
class MmamlPrediction:
    predictions: list[np.ndarray]
    mae: list[float]
    film: FilmParams
    z: np.ndarray


def mmaml_adapt_and_predict(
    net: TaskNetwork,
    mod: ModulationNetwork,
    support: MetaWindow,
    queries: Sequence[MetaWindow],
    cfg: MmamlConfig,
    steps: Optional[int] = None,
) -> MmamlPrediction:
    """Summarise, encode with ``z = mu``, modulate, adapt the head, predict every query window."""
    if mod.feature_dim != net.feature_dim or mod.summary_dim != support.inputs.shape[-1] + 1:
        raise DataError("modulation network does not match the task network or data")
    z, _ = encode_stats(mod, summarize_arrays(support.inputs, support.labels))
    fp = modulate(mod, z)
    phi = features(net, support.inputs)
    w, b = net.head
    W, B, _ = adapt_head(phi, support.labels, w, b, cfg.inner_lr, cfg.inner_steps if steps is None else steps, fp.gamma, fp.beta)
    theta = fp.gamma * W + fp.beta
    preds, maes = [], []
    for q in queries:
        p = features(net, q.inputs) @ theta + float(B)
        preds.append(p)
        maes.append(float(np.abs(q.labels - p).mean()))
    return MmamlPrediction(preds, maes, fp, z)


def embed(mod: ModulationNetwork, meta_windows: Sequence[MetaWindow]) -> np.ndarray:
    """Mean latent codes ``(n, Z)`` of the given meta-windows."""
    if not meta_windows:
        return np.zeros((0, mod.latent_dim))
    S = np.stack([summarize_arrays(m.inputs, m.labels) for m in meta_windows])
    return encoder_forward(mod, S)[0]


SPLIT_PAIRS = (("train", "test"), ("train", "validation"), ("test", "validation"))


def split_similarity(embeddings_by_split: Mapping[str, np.ndarray]) -> dict[tuple[str, str], float]:
    """Euclidean distance between per-split mean embeddings."""
    means = {}
    for split, emb in embeddings_by_split.items():
        emb = np.asarray(emb, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise DataError(f"split {split!r} has no embeddings")
        means[split] = emb.mean(axis=0)
    return {
        (a, b): float(np.linalg.norm(means[a] - means[b]))
        for a, b in SPLIT_PAIRS
        if a in means and b in means
    }
