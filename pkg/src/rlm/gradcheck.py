"""Finite-difference verification suite over primitives, cells and the full objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (CellParams, LanguageModel, ModelConfig, RnnState, gru_step, lstm_step,
                     tanh_step)
from .regularizers import ar_loss, combined_objective, tar_loss

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
PRIMITIVE_EPS = 1e-5
# deep compositions have gradients down to ~1e-7; a slightly wider step keeps
# central-difference roundoff well under the tolerance
COMPOSITE_EPS = 3e-5


@dataclass
class CheckResult:
    component: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _t(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    # sum(y * w) with fixed random weights, so every output entry matters
    return ad.sum_all(ad.mul(y, Tensor(w)))


def primitive_checks(rng: np.random.Generator) -> Iterable[tuple[str, Callable, list[Tensor]]]:
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    yield "matmul", lambda: ad.sum_all(ad.matmul(a, b)), [a, b]

    x, y = _t(rng, 2, 3), _t(rng, 2, 3)
    w = rng.normal(size=(2, 3))
    for kind in ("add", "sub", "mul"):
        yield kind, (lambda k=kind: _weighted(ad.apply_binary(k, x, y), w)), [x, y]
    s = Tensor(np.asarray(0.7), requires_grad=True)
    yield "scalar_mul", lambda: _weighted(ad.mul(s, x), w), [s, x]

    for kind in ("sigmoid", "tanh", "exp"):
        u = _t(rng, 2, 3, low=-2.0, high=2.0)
        yield kind, (lambda k=kind, u=u: _weighted(ad.apply_unary(k, u), w)), [u]
    pos = _t(rng, 2, 3, low=0.5, high=2.0)
    yield "log", lambda: _weighted(ad.log(pos), w), [pos]

    v = _t(rng, 10)
    yield "l2_norm", lambda: ad.l2_norm(v), [v]
    m = _t(rng, 3, 2, 4)
    wm = rng.normal(size=(3, 2))
    yield "vector_norms", lambda: _weighted(ad.vector_norms(m), wm), [m]

    logits = _t(rng, 4, 7, low=-3.0, high=3.0)
    targets = rng.integers(0, 7, size=4)
    yield "cross_entropy", lambda: ad.cross_entropy(logits, targets), [logits]

    emb = _t(rng, 5, 3)
    ids = np.array([[0, 2], [2, 4]])
    we = rng.normal(size=(2, 2, 3))
    yield "gather_rows", lambda: _weighted(ad.gather_rows(emb, ids), we), [emb]

    bias = _t(rng, 3)
    yield "add_row", lambda: _weighted(ad.add_row(x, bias), w), [x, bias]


def _cell_params(rng, n_in: int, H: int, gates: int) -> CellParams:
    return CellParams(_t(rng, n_in, gates * H), _t(rng, H, gates * H), _t(rng, gates * H))


def cell_checks(rng: np.random.Generator, kinds: Iterable[str],
                H: int = 4, B: int = 2) -> Iterable[tuple[str, Callable, list[Tensor]]]:
    for kind in kinds:
        x, h = _t(rng, B, H), _t(rng, B, H)
        wh = rng.normal(size=(B, H))
        if kind == "lstm":
            p = _cell_params(rng, H, H, 4)
            c = _t(rng, B, H)
            wc = rng.normal(size=(B, H))

            def f(p=p, x=x, h=h, c=c):
                h2, c2 = lstm_step(p, x, (h, c))
                return ad.add(_weighted(h2, wh), _weighted(c2, wc))
            yield "cell:lstm", f, [p.W, p.U, p.b, x, h, c]
        elif kind == "gru":
            p = _cell_params(rng, H, H, 3)
            yield "cell:gru", (lambda p=p, x=x, h=h: _weighted(gru_step(p, x, h), wh)), [p.W, p.U, p.b, x, h]
        else:
            p = _cell_params(rng, H, H, 1)
            yield "cell:tanh", (lambda p=p, x=x, h=h: _weighted(tanh_step(p, x, h), wh)), [p.W, p.U, p.b, x, h]


def composite_objective(model: LanguageModel, ids: np.ndarray, targets: np.ndarray,
                        state: RnnState, alpha: float, beta: float, seed: int) -> Tensor:
    """CE + AR + TAR with dropout masks fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    logits, out = model.forward(ids, state, training=True, rng=rng)
    ce = ad.cross_entropy(logits, targets.reshape(-1))
    return combined_objective(ce, ar_loss(out.dropped, alpha), tar_loss(out.raw, beta))


def model_checks(rng: np.random.Generator, kinds: Iterable[str], H: int = 4, T: int = 5,
                 B: int = 2, V: int = 7) -> Iterable[tuple[str, Callable, list[Tensor]]]:
    for kind in kinds:
        cfg = ModelConfig(vocab_size=V, hidden_size=H, cell_kind=kind, num_layers=2,
                          dp=0.3, dp_h=0.2, tied=True)
        model = LanguageModel.create(cfg, rng)
        # O(1) weights keep every gradient well above finite-difference
        # roundoff; nonzero biases and carried state exercise every path
        for p in model.params.values():
            p.data[:] = rng.uniform(-1.0, 1.0, size=p.shape)
        state = model.init_state(B)
        for t in state.h + (state.c or []):
            t.data[:] = rng.uniform(-0.5, 0.5, size=t.shape)
        ids = rng.integers(0, V, size=(T, B))
        targets = rng.integers(0, V, size=(T, B))
        seed = int(rng.integers(1 << 31))

        def f(model=model, ids=ids, targets=targets, state=state, seed=seed):
            return composite_objective(model, ids, targets, state, 2.0, 1.0, seed)
        yield f"model:{kind}", f, list(model.params.values())


def regularizer_checks(rng: np.random.Generator) -> Iterable[tuple[str, Callable, list[Tensor]]]:
    raw = _t(rng, 5, 2, 4)
    mask = Tensor((rng.random((5, 2, 4)) > 0.3) / 0.7)

    def f():
        return ad.add(ar_loss(ad.mul(raw, mask), 2.0), tar_loss(raw, 3.0))
    yield "ar+tar", f, [raw]


def run_suite(cells: Iterable[str] = ("lstm", "gru", "tanh"), include_primitives: bool = True,
              seed: int = 0, tolerance: float | None = None) -> list[CheckResult]:
    """Run every check; ``tolerance`` overrides the per-component defaults."""
    rng = np.random.default_rng(seed)
    cells = list(cells)
    results = []
    groups = []
    if include_primitives:
        groups.append((primitive_checks(rng), PRIMITIVE_TOL, PRIMITIVE_EPS))
        groups.append((regularizer_checks(rng), PRIMITIVE_TOL, PRIMITIVE_EPS))
    groups.append((cell_checks(rng, cells), COMPOSITE_TOL, COMPOSITE_EPS))
    groups.append((model_checks(rng, cells), COMPOSITE_TOL, COMPOSITE_EPS))
    for checks, tol, eps in groups:
        for name, f, xs in checks:
            err = ad.grad_check(f, xs, eps)
            results.append(CheckResult(name, err, tolerance if tolerance is not None else tol))
    return results
