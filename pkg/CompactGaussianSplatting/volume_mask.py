"""
Learnable per-Gaussian volume masks.

Each Gaussian carries one mask parameter ``m``. The forward mask is the hard
indicator ``sigmoid(m) > threshold`` while gradients flow through
``sigmoid(m)`` (straight-through estimator). The mask scales both the scale
and the opacity, so a masked-off Gaussian has zero alpha everywhere and can
be removed without changing the render.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, TypeVar

import torch

from .dyn_attributes import DynGaussianSet, temporal_opacity
from .scene_model import DTYPE, GaussianSet

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.01

GaussianModel = TypeVar('GaussianModel', GaussianSet, DynGaussianSet)


@dataclass
class MaskState:
    mask_param: torch.Tensor
    threshold: float = DEFAULT_THRESHOLD
    lambda_m: float = 5e-4

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"Mask threshold must lie in (0, 1), got {self.threshold}")
        if self.lambda_m < 0:
            raise ValueError(f"Mask loss weight must be non-negative, got {self.lambda_m}")

    @classmethod
    def fresh(cls, count: int, threshold: float = DEFAULT_THRESHOLD,
              lambda_m: float = 5e-4) -> 'MaskState':
        return cls(torch.zeros(count, dtype=DTYPE), threshold, lambda_m)

    @property
    def count(self) -> int:
        return self.mask_param.shape[0]

    def values(self) -> torch.Tensor:
        return hard_mask(self.mask_param, self.threshold)

    def keep(self) -> torch.Tensor:
        with torch.no_grad():
            return torch.sigmoid(self.mask_param) > self.threshold


@dataclass
class MaskedAttributes:
    scale: torch.Tensor
    opacity: torch.Tensor


def hard_mask(m: torch.Tensor, threshold: float) -> torch.Tensor:
    soft = torch.sigmoid(m)
    hard = (soft > threshold).to(soft.dtype)
    return (hard - soft).detach() + soft


def _check_lengths(count: int, mask: MaskState) -> None:
    if count != mask.count:
        raise ValueError(f"Mask has {mask.count} entries for {count} Gaussians")


def apply_static(g: GaussianSet, mask: MaskState) -> MaskedAttributes:
    _check_lengths(g.count, mask)
    m = mask.values()
    return MaskedAttributes(scale=g.scale * m.unsqueeze(-1), opacity=g.opacity * m)


def apply_dynamic(dyn: DynGaussianSet, mask: MaskState, t: float) -> MaskedAttributes:
    _check_lengths(dyn.count, mask)
    m = mask.values()
    return MaskedAttributes(scale=dyn.scale * m.unsqueeze(-1), opacity=temporal_opacity(dyn, t) * m)


def mask_loss(mask: MaskState) -> torch.Tensor:
    if mask.count == 0:
        return torch.zeros((), dtype=DTYPE)
    return torch.sigmoid(mask.mask_param).mean()


def prune(model: GaussianModel, mask: MaskState) -> Tuple[GaussianModel, MaskState]:
    """Drop every Gaussian whose hard mask is zero."""
    _check_lengths(model.count, mask)
    keep = mask.keep()
    removed = int((~keep).sum())
    if removed:
        logger.info(f"Mask pruning removed {removed} of {mask.count} Gaussians")
    reduced = MaskState(mask.mask_param.detach()[keep].clone(), mask.threshold, mask.lambda_m)
    return model.subset(keep), reduced
