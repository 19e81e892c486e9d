"""Embedding, dropout, recurrent cells, layer stacking and the tied decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

CELL_KINDS = ("lstm", "gru", "tanh")
GATES = {"lstm": 4, "gru": 3, "tanh": 1}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int = 650
    cell_kind: str = "lstm"
    num_layers: int = 2
    dp: float = 0.5
    dp_h: float = 0.4
    tied: bool = True

    def __post_init__(self):
        if self.cell_kind not in CELL_KINDS:
            raise ConfigError(f"cell_kind must be one of {CELL_KINDS}, got {self.cell_kind!r}")
        for name in ("vocab_size", "hidden_size", "num_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("dp", "dp_h"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")


@dataclass
class DropoutMask:
    mask: Tensor
    p: float


@dataclass
class CellParams:
    """Input weights ``W`` [in x G*H], recurrent weights ``U`` [H x G*H], bias ``b`` [G*H]."""

    W: Tensor
    U: Tensor
    b: Tensor


@dataclass
class RnnState:
    h: list[Tensor]
    c: list[Tensor] | None = None

    @classmethod
    def zeros(cls, config: ModelConfig, batch_size: int, dtype=np.float64) -> "RnnState":
        shape = (batch_size, config.hidden_size)
        h = [Tensor(np.zeros(shape, dtype=dtype)) for _ in range(config.num_layers)]
        c = None
        if config.cell_kind == "lstm":
            c = [Tensor(np.zeros(shape, dtype=dtype)) for _ in range(config.num_layers)]
        return cls(h, c)

    def detach(self) -> "RnnState":
        return RnnState([t.detach() for t in self.h],
                        None if self.c is None else [t.detach() for t in self.c])


class ForwardResult(NamedTuple):
    raw: Tensor
    dropped: Tensor
    mask: DropoutMask
    state: RnnState


# ---------------------------------------------------------------------------

def embedding_lookup(weights: Tensor, ids) -> Tensor:
    """Gather rows of ``weights`` for an id matrix of shape [T x B]."""
    return ad.gather_rows(weights, ids)


def dropout_forward(x: Tensor, p: float, training: bool,
                    rng: np.random.Generator | None) -> tuple[Tensor, DropoutMask]:
    """Inverted dropout with a fresh Bernoulli(1 - p) mask per element.

    Returns the dropped tensor and the mask so callers (AR) can reuse it.
    In eval mode, or with ``p == 0``, the input comes back unchanged with an
    all-ones mask.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, DropoutMask(Tensor(np.ones(x.shape, dtype=x.dtype)), p)
    keep = rng.random(x.shape) >= p
    m = Tensor(keep.astype(x.dtype) / x.dtype.type(1.0 - p))
    return ad.mul(x, m), DropoutMask(m, p)


# ---------------------------------------------------------------------------
# cells
#
# Each ``*_cell`` takes the already-projected input ``xw = x W + b`` so that
# the input projection for a whole sequence can be done in one matmul.

def _check_step(params: CellParams, x: Tensor, h: Tensor, gates: int) -> None:
    H = h.shape[-1]
    if (x.ndim != 2 or h.ndim != 2 or x.shape[0] != h.shape[0]
            or params.W.shape != (x.shape[1], gates * H)
            or params.U.shape != (H, gates * H) or params.b.shape != (gates * H,)):
        raise ShapeError(
            f"cell shapes disagree: x {x.shape}, h {h.shape}, W {params.W.shape}, "
            f"U {params.U.shape}, b {params.b.shape}")


def _lstm_cell(xw: Tensor, h: Tensor, c: Tensor, U: Tensor) -> tuple[Tensor, Tensor]:
    H = h.shape[1]
    z = ad.add(xw, ad.matmul(h, U))
    i = ad.sigmoid(ad.slice_cols(z, 0, H))
    f = ad.sigmoid(ad.slice_cols(z, H, 2 * H))
    g = ad.tanh(ad.slice_cols(z, 2 * H, 3 * H))
    o = ad.sigmoid(ad.slice_cols(z, 3 * H, 4 * H))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _gru_cell(xw: Tensor, h: Tensor, U_zr: Tensor, U_n: Tensor) -> Tensor:
    H = h.shape[1]
    zr = ad.add(ad.slice_cols(xw, 0, 2 * H), ad.matmul(h, U_zr))
    z = ad.sigmoid(ad.slice_cols(zr, 0, H))
    r = ad.sigmoid(ad.slice_cols(zr, H, 2 * H))
    n = ad.tanh(ad.add(ad.slice_cols(xw, 2 * H, 3 * H), ad.matmul(ad.mul(r, h), U_n)))
    return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, n))


def _tanh_cell(xw: Tensor, h: Tensor, U: Tensor) -> Tensor:
    return ad.tanh(ad.add(xw, ad.matmul(h, U)))


def _project(params: CellParams, x: Tensor) -> Tensor:
    return ad.add_row(ad.matmul(x, params.W), params.b)


def lstm_step(params: CellParams, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM step with gate blocks ordered (input, forget, candidate, output)."""
    h, c = state
    _check_step(params, x, h, 4)
    if c.shape != h.shape:
        raise ShapeError(f"cell state {c.shape} does not match hidden {h.shape}")
    return _lstm_cell(_project(params, x), h, c, params.U)


def gru_step(params: CellParams, x: Tensor, h: Tensor) -> Tensor:
    """One GRU step with gate blocks ordered (update, reset, candidate).

    The reset gate multiplies ``h`` before the recurrent candidate projection.
    """
    _check_step(params, x, h, 3)
    H = h.shape[1]
    return _gru_cell(_project(params, x), h,
                     ad.slice_cols(params.U, 0, 2 * H), ad.slice_cols(params.U, 2 * H, 3 * H))


def tanh_step(params: CellParams, x: Tensor, h: Tensor) -> Tensor:
    _check_step(params, x, h, 1)
    return _tanh_cell(_project(params, x), h, params.U)


def run_layer(kind: str, params: CellParams, inputs: Tensor, h: Tensor,
              c: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Run one recurrent layer over ``inputs`` [T x B x in]; returns (outputs, h_T, c_T)."""
    T, B, n_in = inputs.shape
    G = GATES[kind]
    _check_step(params, Tensor(np.empty((B, n_in))), h, G)
    xw = ad.reshape(_project(params, ad.reshape(inputs, (T * B, n_in))), (T, B, -1))
    if kind == "gru":
        H = h.shape[1]
        U_zr = ad.slice_cols(params.U, 0, 2 * H)
        U_n = ad.slice_cols(params.U, 2 * H, 3 * H)
    outs = []
    for t in range(T):
        xw_t = ad.take(xw, t)
        if kind == "lstm":
            h, c = _lstm_cell(xw_t, h, c, params.U)
        elif kind == "gru":
            h = _gru_cell(xw_t, h, U_zr, U_n)
        else:
            h = _tanh_cell(xw_t, h, params.U)
        outs.append(h)
    return ad.stack(outs), h, c


def layer_params(params: dict[str, Tensor], layer: int) -> CellParams:
    return CellParams(params[f"rnn.{layer}.W"], params[f"rnn.{layer}.U"], params[f"rnn.{layer}.b"])


def stacked_forward(config: ModelConfig, params: dict[str, Tensor], embedded: Tensor,
                    state: RnnState, training: bool,
                    rng: np.random.Generator | None) -> ForwardResult:
    """Run ``embedded`` [T x B x H] (already input-dropped) through every layer.

    Non-final layer outputs are dropped at rate ``dp_h`` before feeding the
    next layer; the final output is dropped at rate ``dp``.  ``raw`` feeds
    TAR, ``dropped`` feeds the decoder and AR.
    """
    if embedded.ndim != 3:
        raise ShapeError(f"expected [T x B x H] input, got {embedded.shape}")
    B = embedded.shape[1]
    for h in state.h:
        if h.shape != (B, config.hidden_size):
            raise ShapeError(f"state shape {h.shape} does not match batch {B}, H {config.hidden_size}")
    new_h, new_c = [], []
    x = embedded
    for layer in range(config.num_layers):
        c0 = state.c[layer] if state.c is not None else None
        out, h_T, c_T = run_layer(config.cell_kind, layer_params(params, layer), x,
                                  state.h[layer], c0)
        new_h.append(h_T.detach())
        if c_T is not None:
            new_c.append(c_T.detach())
        if layer < config.num_layers - 1:
            x, _ = dropout_forward(out, config.dp_h, training, rng)
        else:
            x = out
    dropped, mask = dropout_forward(x, config.dp, training, rng)
    new_state = RnnState(new_h, new_c if config.cell_kind == "lstm" else None)
    return ForwardResult(x, dropped, mask, new_state)


def tied_decoder(embedding_weights: Tensor, dropped_outputs: Tensor, bias: Tensor) -> Tensor:
    """Logits [(T*B) x V] = outputs . E^T + bias."""
    H = embedding_weights.shape[1]
    if dropped_outputs.shape[-1] != H or bias.shape != (embedding_weights.shape[0],):
        raise ShapeError(f"decoder: outputs {dropped_outputs.shape}, weights "
                         f"{embedding_weights.shape}, bias {bias.shape}")
    flat = ad.reshape(dropped_outputs, (-1, H))
    return ad.add_row(ad.matmul(flat, ad.transpose(embedding_weights)), bias)


# ---------------------------------------------------------------------------

def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every stored parameter, in canonical order."""
    V, H, G = config.vocab_size, config.hidden_size, GATES[config.cell_kind]
    shapes: dict[str, tuple[int, ...]] = {"embedding": (V, H)}
    for layer in range(config.num_layers):
        shapes[f"rnn.{layer}.W"] = (H, G * H)
        shapes[f"rnn.{layer}.U"] = (H, G * H)
        shapes[f"rnn.{layer}.b"] = (G * H,)
    if not config.tied:
        shapes["decoder.weight"] = (V, H)
    shapes["decoder.bias"] = (V,)
    return shapes


def init_weights(config: ModelConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, Tensor]:
    """Embeddings ~ U[-0.1, 0.1]; other weights ~ U[-1/sqrt(H), 1/sqrt(H)]; biases zero."""
    bound = 1.0 / math.sqrt(config.hidden_size)
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "embedding":
            data = rng.uniform(-0.1, 0.1, size=shape)
        elif name.endswith(".b") or name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def count_parameters(params: dict[str, Tensor]) -> int:
    return int(np.sum([p.size for p in params.values()]))


@dataclass
class LanguageModel:
    """Embedding -> stacked RNN -> (tied) softmax decoder."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int | np.random.Generator = 0,
               dtype=np.float64) -> "LanguageModel":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(config, init_weights(config, rng, dtype))

    @property
    def embedding(self) -> Tensor:
        return self.params["embedding"]

    @property
    def decoder_weight(self) -> Tensor:
        if self.config.tied:
            return self.params["embedding"]
        return self.params["decoder.weight"]

    @property
    def dtype(self):
        return self.embedding.dtype

    def init_state(self, batch_size: int) -> RnnState:
        return RnnState.zeros(self.config, batch_size, self.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, ids, state: RnnState, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, ForwardResult]:
        """Logits [(T*B) x V] for an id matrix [T x B], plus the RNN outputs."""
        emb = embedding_lookup(self.embedding, ids)
        emb, _ = dropout_forward(emb, self.config.dp, training, rng)
        result = stacked_forward(self.config, self.params, emb, state, training, rng)
        logits = tied_decoder(self.decoder_weight, result.dropped, self.params["decoder.bias"])
        return logits, result
