"""Structural block diffusion: train, sample, evaluate and ablate."""

import json

from . import _sbd
from ._sbd import (
    ConfigError,
    DataError,
    IoError,
    LayoutError,
    Model as _Model,
    SbdError,
    TrainingError,
    markov_entropy_rate,
    markov_gen_ppl,
    markov_sample,
    remask_count,
)

__all__ = [
    "ConfigError",
    "DataError",
    "IoError",
    "LayoutError",
    "Model",
    "SbdError",
    "TrainingError",
    "ablate",
    "closed_form_nfes",
    "evaluate",
    "markov_entropy_rate",
    "markov_gen_ppl",
    "markov_sample",
    "oracle_check",
    "remask_count",
    "resolve_config",
    "sample",
    "train",
]


def _dump(config):
    return config if isinstance(config, str) else json.dumps(config)


def resolve_config(config):
    """Validated config with every default filled in."""
    return json.loads(_sbd.resolve_config(_dump(config)))


def train(config):
    return _sbd.train(_dump(config))


def sample(config):
    return _sbd.sample(_dump(config))


def evaluate(config):
    return _sbd.evaluate(_dump(config))


def ablate(config):
    header, rows = _sbd.ablate(_dump(config))
    return [dict(zip(header, row)) for row in rows]


def oracle_check(mutate=False):
    return [
        {"name": n, "passed": p, "measured": m, "tolerance": t}
        for n, p, m, t in _sbd.oracle_check(mutate)
    ]


def closed_form_nfes(length, stages):
    return _sbd.closed_form_nfes(length, _dump(stages))


class Model:
    """A trained denoiser loaded from a checkpoint."""

    def __init__(self, checkpoint):
        self._m = _Model(str(checkpoint))

    @property
    def vocab_size(self):
        return self._m.vocab_size

    @property
    def max_len(self):
        return self._m.max_len

    @property
    def step(self):
        return self._m.step

    def generate(self, length, stages, seed=0, use_cache=True):
        return self._m.generate(length, _dump(stages), seed, use_cache)

    def nelbo(self, heldout, block_size, n_mc=1, seed=0):
        return self._m.nelbo(heldout, block_size, n_mc, seed)

    def encode(self, text):
        return self._m.encode(text)

    def decode(self, ids):
        return self._m.decode(ids)
