"""Sampling text from a trained model, and Moses-marker detokenisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import Vocabulary
from .errors import ConfigError
from .layers import LanguageModel

# Moses escapes for an intra-word hyphen and a decimal point.
JOIN_MARKERS = {"@-@": "-", "@.@": "."}


@dataclass
class SamplerConfig:
    num_words: int = 100
    temperature: float = 1.0
    excluded: frozenset[int] | None = None   # None means {eos, unk}
    seed: int = 1111

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.num_words < 0:
            raise ConfigError("num_words must be nonnegative")
        if self.excluded is not None:
            self.excluded = frozenset(int(i) for i in self.excluded)

    def excluded_ids(self, vocab: Vocabulary) -> frozenset[int]:
        if self.excluded is None:
            return frozenset({vocab.eos_id, vocab.unk_id})
        return self.excluded


def next_token_distribution(logits, temperature: float, excluded: Iterable[int]) -> np.ndarray:
    """Softmax of ``logits / temperature`` with excluded ids zeroed and the rest renormalised."""
    z = np.asarray(logits.data if isinstance(logits, ad.Tensor) else logits, dtype=np.float64)
    z = z.reshape(-1) / temperature
    allowed = np.ones(z.size, dtype=bool)
    allowed[list(excluded)] = False
    if not allowed.any():
        raise ValueError("every token is excluded; nothing to sample")
    z = np.where(allowed, z, -np.inf)
    p = np.exp(z - z[allowed].max())
    return p / p.sum()


def sample_next(logits, config: SamplerConfig, rng: np.random.Generator,
                excluded: Iterable[int] | None = None) -> int:
    if excluded is None:
        excluded = config.excluded if config.excluded is not None else ()
    p = next_token_distribution(logits, config.temperature, excluded)
    return int(rng.choice(p.size, p=p))


def generate(model: LanguageModel, vocab: Vocabulary, config: SamplerConfig,
             rng: np.random.Generator | None = None) -> list[str]:
    """Sample ``config.num_words`` tokens, feeding each one back in.

    The hidden state starts at zero and the first input is drawn uniformly
    from the non-excluded vocabulary; it is not part of the output.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    excluded = config.excluded_ids(vocab)
    allowed = np.array([i for i in range(len(vocab)) if i not in excluded])
    if allowed.size == 0:
        raise ValueError("every token is excluded; nothing to sample")
    out: list[str] = []
    if config.num_words == 0:
        return out
    token = int(rng.choice(allowed))
    hidden = model.init_state(1)
    with ad.no_grad():
        for _ in range(config.num_words):
            logits, res = model.forward(np.array([[token]]), hidden, training=False)
            hidden = res.state
            token = sample_next(logits.data[0], config, rng, excluded)
            out.append(vocab.id_to_token[token])
    return out


def moses_detokenize(tokens: Sequence[str]) -> str:
    """Join ``x @-@ y`` as ``x-y`` and ``a @.@ b`` as ``a.b``; space-join the rest.

    A marker with nothing on one side is kept as-is.
    """
    pieces: list[str] = []
    i, n = 0, len(tokens)
    while i < n:
        tok = tokens[i]
        if tok in JOIN_MARKERS and pieces and i + 1 < n:
            pieces[-1] = pieces[-1] + JOIN_MARKERS[tok] + tokens[i + 1]
            i += 2
            continue
        pieces.append(tok)
        i += 1
    return " ".join(pieces)
