"""SGD training loop with global-norm clipping, weight decay and LR annealing."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointManifest, check_shapes, load_checkpoint, save_checkpoint
from .corpus import BatchedCorpus, Corpus, Vocabulary, batchify, bptt_slice
from .errors import CheckpointError, ConfigError, NumericalError
from .layers import LanguageModel, ModelConfig, param_shapes
from .regularizers import Reduction, RegularizationConfig, regularized_loss

logger = logging.getLogger(__name__)

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    lr0: float = 20.0
    lr_decay_divisor: float = 4.0
    max_epochs: int = 80
    clip_norm: float = 10.0
    weight_decay: float = 1e-7
    batch_size: int = 20
    eval_batch_size: int = 10
    bptt: int = 35
    dp: float = 0.5
    dp_h: float = 0.4
    alpha: float = 5.0
    beta: float = 2.0
    reduction: str = Reduction.MEAN_NORM.value
    seed: int = 1111
    cell_kind: str = "lstm"
    hidden_size: int = 650
    num_layers: int = 2
    tied: bool = True
    min_lr: float = 1e-4
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.lr0 < 0 or self.lr_decay_divisor <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr0 must be >= 0, lr_decay_divisor and clip_norm > 0")
        if min(self.batch_size, self.eval_batch_size, self.bptt, self.max_epochs + 1) < 1:
            raise ConfigError("batch sizes and bptt must be positive")
        Reduction(self.reduction)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, hidden_size=self.hidden_size,
                           cell_kind=self.cell_kind, num_layers=self.num_layers,
                           dp=self.dp, dp_h=self.dp_h, tied=self.tied)

    def regularization(self) -> RegularizationConfig:
        return RegularizationConfig(self.alpha, self.beta, Reduction(self.reduction))

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_ppl: float
    valid_ppl: float
    lr: float


@dataclass
class TrainState:
    epoch: int = 0
    lr: float = 20.0
    best_valid_ppl: float = math.inf
    history: list[EpochRecord] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "best_valid_ppl": self.best_valid_ppl,
            "history": [dataclasses.asdict(r) for r in self.history],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainState":
        return cls(d["epoch"], d["lr"], d["best_valid_ppl"],
                   [EpochRecord(**r) for r in d["history"]])


# ---------------------------------------------------------------------------
# optimisation primitives

def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(float(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads.values()])))


def clip_gradients(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Rescale every gradient in place so the global norm is at most ``max_norm``.

    Returns the applied scale (1.0 when no clipping happened).
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for g in grads.values():
        g *= scale
    return scale


def sgd_step(params: Mapping[str, ad.Tensor], grads: Mapping[str, np.ndarray],
             lr: float, weight_decay: float) -> None:
    """``p <- p - lr * (grad + weight_decay * p)`` in place, for every parameter."""
    for name, p in params.items():
        g = grads.get(name)
        step = weight_decay * p.data if g is None else g + weight_decay * p.data
        p.data -= lr * step


def collect_grads(params: Mapping[str, ad.Tensor]) -> dict[str, np.ndarray]:
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


def anneal_on_plateau(state: TrainState, new_valid_ppl: float, divisor: float) -> TrainState:
    """Record a new best validation perplexity, or divide the learning rate."""
    if new_valid_ppl < state.best_valid_ppl:
        state.best_valid_ppl = new_valid_ppl
    else:
        state.lr = state.lr / divisor
    return state


# ---------------------------------------------------------------------------
# epochs

def perplexity(mean_ce: float) -> float:
    try:
        return math.exp(mean_ce)
    except OverflowError:
        return math.inf

def run_epoch(model: LanguageModel, data: BatchedCorpus, config: TrainConfig,
              state: TrainState, rng: np.random.Generator) -> float:
    """One pass over ``data``; returns exp of the token-weighted mean cross entropy."""
    reg = config.regularization()
    hidden = model.init_state(data.batch_size)
    total, tokens = 0.0, 0
    for i, offset in enumerate(data.offsets(config.bptt)):
        inputs, targets = bptt_slice(data, offset, config.bptt)
        hidden = hidden.detach()
        model.zero_grad()
        with ad.Tape():
            logits, out = model.forward(inputs, hidden, training=True, rng=rng)
            ce = ad.cross_entropy(logits, targets.reshape(-1))
            loss, _, _ = regularized_loss(ce, out.dropped, out.raw, reg)
            if not math.isfinite(loss.item()):
                raise NumericalError(
                    f"non-finite loss at slice {i} (offset {offset}) in epoch {state.epoch + 1}")
            ad.backward(loss)
        grads = collect_grads(model.params)
        clip_gradients(grads, config.clip_norm)
        sgd_step(model.params, grads, state.lr, config.weight_decay)
        n = targets.size
        total += ce.item() * n
        tokens += n
        hidden = out.state
    ppl = perplexity(total / tokens)
    if not math.isfinite(ppl):
        raise NumericalError(f"training perplexity overflowed in epoch {state.epoch + 1} (diverged)")
    return ppl


def evaluate_perplexity(model: LanguageModel, data: BatchedCorpus, bptt: int = 35) -> float:
    """Dropout off, hidden state carried across slices, no regularizer terms."""
    hidden = model.init_state(data.batch_size)
    total, tokens = 0.0, 0
    with ad.no_grad():
        for offset in data.offsets(bptt):
            inputs, targets = bptt_slice(data, offset, bptt)
            logits, out = model.forward(inputs, hidden, training=False)
            n = targets.size
            total += ad.cross_entropy(logits, targets.reshape(-1)).item() * n
            tokens += n
            hidden = out.state
    return perplexity(total / tokens)


# ---------------------------------------------------------------------------
# checkpoints

def make_manifest(model: LanguageModel, vocab: Vocabulary, config: TrainConfig,
                  state: TrainState) -> CheckpointManifest:
    return CheckpointManifest(
        config=config.to_dict(),
        vocabulary=list(vocab.id_to_token),
        tensors={name: p.data.copy() for name, p in model.params.items()},
        train_state=state.to_dict(),
    )


def model_from_manifest(manifest: CheckpointManifest,
                        expect: ModelConfig | None = None) -> tuple[LanguageModel, Vocabulary, TrainConfig]:
    """Rebuild model, vocabulary and config; ``expect`` pins the model shape."""
    try:
        config = TrainConfig.from_dict(manifest.config)
        vocab = Vocabulary.from_tokens(manifest.vocabulary)
    except (ConfigError, TypeError, ValueError) as err:
        raise CheckpointError(f"bad config/vocabulary block: {err}") from None
    mcfg = config.model_config(len(vocab))
    if expect is not None:
        for f in dataclasses.fields(ModelConfig):
            if f.name in ("dp", "dp_h"):
                continue
            got, want = getattr(mcfg, f.name), getattr(expect, f.name)
            if got != want:
                raise CheckpointError(f"config field {f.name!r}: checkpoint has {got!r}, requested {want!r}")
        mcfg = expect
    check_shapes(manifest, param_shapes(mcfg))
    params = {name: ad.Tensor(manifest.tensors[name].copy(), requires_grad=True)
              for name in param_shapes(mcfg)}
    return LanguageModel(mcfg, params), vocab, config


def load_model(path: str | os.PathLike,
               expect: ModelConfig | None = None) -> tuple[LanguageModel, Vocabulary, TrainConfig]:
    return model_from_manifest(load_checkpoint(path), expect)


# ---------------------------------------------------------------------------
# full run

@dataclass
class TrainResult:
    model: LanguageModel
    state: TrainState
    vocab: Vocabulary
    best_valid_ppl: float
    test_ppl: float | None = None


def train(config: TrainConfig, corpus: Corpus, checkpoint_path: str | os.PathLike | None = None,
          metrics_path: str | os.PathLike | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train until ``max_epochs`` or until the learning rate falls below ``min_lr``.

    Validation after every epoch drives annealing; the best-validation
    parameters are kept (and checkpointed when a path is given) and used for
    the final test evaluation.
    """
    init_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = LanguageModel.create(config.model_config(len(corpus.vocab)),
                                 np.random.default_rng(init_seq), config.np_dtype)
    rng = np.random.default_rng(drop_seq)
    train_data = batchify(corpus.train, config.batch_size)
    valid_ids = corpus.valid if corpus.valid is not None else corpus.train
    valid_data = batchify(valid_ids, config.eval_batch_size)
    state = TrainState(lr=config.lr0)
    best_params = {k: p.data.copy() for k, p in model.params.items()}

    metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        while state.epoch < config.max_epochs and state.lr >= config.min_lr:
            start = time.perf_counter()
            lr_used = state.lr
            train_ppl = run_epoch(model, train_data, config, state, rng)
            valid_ppl = evaluate_perplexity(model, valid_data, config.bptt)
            state.epoch += 1
            record = EpochRecord(state.epoch, train_ppl, valid_ppl, lr_used)
            state.history.append(record)
            improved = valid_ppl < state.best_valid_ppl
            anneal_on_plateau(state, valid_ppl, config.lr_decay_divisor)
            if improved:
                best_params = {k: p.data.copy() for k, p in model.params.items()}
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, make_manifest(model, corpus.vocab, config, state))
            seconds = time.perf_counter() - start
            logger.info("epoch %d lr %.6g train ppl %.3f valid ppl %.3f (%.1fs)",
                        record.epoch, lr_used, train_ppl, valid_ppl, seconds)
            if metrics is not None:
                metrics.write(json.dumps({**dataclasses.asdict(record), "seconds": seconds}) + "\n")
                metrics.flush()
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if metrics is not None:
            metrics.close()

    for k, p in model.params.items():
        p.data[...] = best_params[k]
    test_ppl = None
    if corpus.test is not None:
        test_ppl = evaluate_perplexity(model, batchify(corpus.test, config.eval_batch_size), config.bptt)
    return TrainResult(model, state, corpus.vocab, state.best_valid_ppl, test_ppl)
