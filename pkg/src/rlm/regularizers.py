"""Activation regularization (AR) and temporal activation regularization (TAR).

Both act on the final RNN layer's outputs, shaped [T x B x H]:

* AR: ``alpha * ||m * h_t||`` on the dropped outputs (the same mask the
  decoder sees), penalising large activations.
* TAR: ``beta * ||h_t - h_{t+1}||`` on the raw outputs, penalising change
  between consecutive timesteps.  Pairs never cross a BPTT segment boundary.

How the per-vector norms are aggregated is selected by :class:`Reduction`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


class Reduction(str, enum.Enum):
    MEAN_NORM = "mean_norm"          # mean over (t, b) of ||v_tb||
    FLAT_NORM = "flat_norm"          # ||all entries|| as one vector
    MEAN_SQUARED = "mean_squared"    # mean over (t, b) of ||v_tb||^2


@dataclass(frozen=True)
class RegularizationConfig:
    alpha: float = 5.0
    beta: float = 2.0
    reduction: Reduction = Reduction.MEAN_NORM

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be nonnegative, got {self.beta}")
        object.__setattr__(self, "reduction", Reduction(self.reduction))


def _reduce(v: Tensor, reduction: Reduction) -> Tensor:
    reduction = Reduction(reduction)
    if reduction is Reduction.MEAN_NORM:
        return ad.mean_all(ad.vector_norms(v))
    if reduction is Reduction.FLAT_NORM:
        return ad.l2_norm(v)
    # mean of squared norms = H * mean of squared entries
    return ad.mul(ad.mean_all(ad.mul(v, v)), float(v.shape[-1]))


def _zero(like: Tensor) -> Tensor:
    return Tensor(like.data.dtype.type(0.0))


def ar_loss(dropped_outputs: Tensor, alpha: float,
            reduction: Reduction = Reduction.MEAN_NORM) -> Tensor:
    """``alpha`` times the aggregated L2 norm of the dropped outputs."""
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    if dropped_outputs.ndim != 3:
        raise ShapeError(f"expected [T x B x H], got {dropped_outputs.shape}")
    if alpha == 0:
        return _zero(dropped_outputs)
    return ad.mul(_reduce(dropped_outputs, reduction), float(alpha))


def tar_loss(raw_outputs: Tensor, beta: float,
             reduction: Reduction = Reduction.MEAN_NORM) -> Tensor:
    """``beta`` times the aggregated L2 norm of ``h_t - h_{t+1}`` over consecutive steps."""
    if beta < 0:
        raise ConfigError(f"beta must be nonnegative, got {beta}")
    if raw_outputs.ndim != 3:
        raise ShapeError(f"expected [T x B x H], got {raw_outputs.shape}")
    T = raw_outputs.shape[0]
    if beta == 0 or T < 2:
        return _zero(raw_outputs)
    diff = ad.sub(ad.slice_rows(raw_outputs, 0, T - 1), ad.slice_rows(raw_outputs, 1, T))
    return ad.mul(_reduce(diff, reduction), float(beta))


def combined_objective(ce: Tensor, ar: Tensor, tar: Tensor) -> Tensor:
    """Cross entropy plus both regularization terms."""
    return ad.add(ad.add(ce, ar), tar)


def regularized_loss(ce: Tensor, dropped: Tensor, raw: Tensor,
                     config: RegularizationConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(objective, ar, tar)`` for one forward pass."""
    ar = ar_loss(dropped, config.alpha, config.reduction)
    tar = tar_loss(raw, config.beta, config.reduction)
    return combined_objective(ce, ar, tar), ar, tar
