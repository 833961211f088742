"""Seed splitting.

One global integer seed feeds :class:`numpy.random.SeedSequence`; every
consumer asks for a named stream, and the name is hashed (CRC32) into the
sequence's ``spawn_key``. Streams therefore never depend on the order in
which they are requested, nor on how many workers exist.

Stream names in use: ``"init.task"``, ``"init.mod"``, ``"tasks"``
(meta-batch sampling), ``"augment"`` (support label noise), ``"latent"``
(reparameterisation draws), ``"pretrain"`` (mini-batch shuffling),
``"synth"`` (synthetic data).
"""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_rng(seed: int, *names: str) -> np.random.Generator:
    """Independent generator for the stream ``names`` under ``seed``."""
    key = tuple(stream_key(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
