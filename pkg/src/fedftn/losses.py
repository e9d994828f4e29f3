"""Training objectives: reconstruction, global weight constraint, FedProx."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .params import ParamTree
from .strategy import StrategyId

# Global epochs are 1-based; the constraint switches on from this epoch.
GWC_FIRST_EPOCH = 3


@dataclass(frozen=True)
class LossWeights:
    lambda_gwc: float = 0.001
    mu_fedprox: float = 0.01
    gwc_normalize: bool = True

    def __post_init__(self):
        if self.lambda_gwc < 0 or self.mu_fedprox < 0:
            raise ValueError("loss weights must be non-negative")


def stack_batch(batch: Sequence, dtype) -> tuple:
    """``[(x, y, d), ...]`` -> (x ``[B,1,...]``, y ``[B,1,...]``, d list)."""
    if not batch:
        raise ContractError("batch must contain at least one sample")
    xs, ys, ds = [], [], []
    for x, y, d in batch:
        x, y = np.asarray(x), np.asarray(y)
        if x.shape != y.shape:
            raise ShapeError(f"sample volumes differ in shape: {x.shape} vs {y.shape}")
        xs.append(x.reshape((1,) + x.shape[-3:]))
        ys.append(y.reshape((1,) + y.shape[-3:]))
        ds.append(float(d))
    try:
        x = np.stack(xs).astype(dtype, copy=False)
        y = np.stack(ys).astype(dtype, copy=False)
    except ValueError:
        raise ShapeError("batch volumes are not congruent") from None
    return x, y, ds


def recon_loss(model, batch: Sequence, track_stats: bool = False) -> Tensor:
    """Mean over the batch of the per-sample mean squared error."""
    x, y, d = stack_batch(batch, model.dtype)
    return ad.mse(model.forward(x, d, track_stats=track_stats), Tensor(y))


def _distance_terms(local: ParamTree, anchor: ParamTree) -> list:
    local.check_congruent(anchor)
    return [ad.squared_distance(local[n], anchor[n].data) for n in local]


def _sum(terms: list, dtype) -> Tensor:
    if not terms:
        return Tensor(np.zeros((), dtype))
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def gwc_loss(theta_local: ParamTree, theta_anchor: ParamTree, normalize: bool = True) -> Tensor:
    """Squared distance to the aggregated weights, divided by the element count.

    The anchor is treated as a constant.  With ``normalize=False`` this is the
    plain squared L2 norm.
    """
    terms = _distance_terms(theta_local, theta_anchor)
    dtype = next(iter(theta_local.values())).dtype if len(theta_local) else np.float32
    total = _sum(terms, dtype)
    if normalize and theta_local.numel():
        total = ad.scale(total, 1.0 / theta_local.numel())
    return total


def fedprox_term(theta_local: ParamTree, theta_anchor: ParamTree, mu: float) -> Tensor:
    terms = _distance_terms(theta_local, theta_anchor)
    dtype = next(iter(theta_local.values())).dtype if len(theta_local) else np.float32
    return ad.scale(_sum(terms, dtype), mu / 2.0)


def constrained_subtree(model, anchor: ParamTree) -> tuple:
    """Differentiable parameters of ``model`` covered by ``anchor``."""
    names = [n for n in anchor if model.params[n].requires_grad]
    return ParamTree((n, model.params[n]) for n in names), ParamTree((n, anchor[n]) for n in names)


class LossTerms(NamedTuple):
    total: Tensor
    recon: Tensor
    penalty: Optional[Tensor]


def objective_terms(model, batch, theta_anchor: Optional[ParamTree], weights: LossWeights,
                    global_epoch: int, strategy=StrategyId.FEDFTN,
                    track_stats: bool = False) -> LossTerms:
    """Strategy-dependent local objective with its parts kept for logging."""
    if global_epoch < 1:
        raise ContractError(f"global epochs are 1-based, got {global_epoch}")
    strategy = StrategyId.parse(strategy)
    recon = recon_loss(model, batch, track_stats)
    if strategy is StrategyId.FEDFTN:
        if global_epoch < GWC_FIRST_EPOCH:
            return LossTerms(recon, recon, None)
        if theta_anchor is None:
            raise ContractError(f"global epoch {global_epoch} needs the aggregated anchor weights")
        local, anchor = constrained_subtree(model, theta_anchor)
        penalty = gwc_loss(local, anchor, weights.gwc_normalize)
        return LossTerms(ad.add(recon, ad.scale(penalty, weights.lambda_gwc)), recon, penalty)
    if strategy is StrategyId.FEDPROX:
        if theta_anchor is None:
            raise ContractError("FedProx needs the deployed anchor weights")
        local, anchor = constrained_subtree(model, theta_anchor)
        penalty = fedprox_term(local, anchor, weights.mu_fedprox)
        return LossTerms(ad.add(recon, penalty), recon, penalty)
    return LossTerms(recon, recon, None)


def combined_loss(model, batch, theta_anchor: Optional[ParamTree], weights: LossWeights,
                  global_epoch: int, strategy=StrategyId.FEDFTN) -> Tensor:
    """Reconstruction loss, plus ``lambda * gwc`` from the third global epoch on."""
    return objective_terms(model, batch, theta_anchor, weights, global_epoch, strategy).total
