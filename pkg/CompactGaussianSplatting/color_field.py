"""
Neural colour field: contraction, multiresolution hash grid and a tiny MLP.

Instead of 48 SH coefficients per Gaussian, colour is queried from a field
shared by the whole scene. Static scenes get a view-dependent RGB colour
(degree-0 SH converted to RGB); dynamic scenes get 6-D spatial features.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from .scene_model import DTYPE
from .splat_renderer import SH_C0

logger = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)
GRID_EXTENT = 2.0

_CORNERS = [(dx, dy, dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)]


def contract(p: torch.Tensor) -> torch.Tensor:
    """Identity inside the unit ball, (2 - 1/|p|) p/|p| outside."""
    norm = torch.linalg.vector_norm(p, dim=-1, keepdim=True)
    safe = norm.clamp_min(1.0)
    return torch.where(norm <= 1.0, p, (2.0 - 1.0 / safe) * (p / safe))


def _next_pow2(value: int) -> int:
    return 1 << max(0, int(value - 1).bit_length())


@dataclass(frozen=True)
class FieldLayout:
    resolutions: List[int]
    table_sizes: List[int]
    offsets: List[int]
    dense: List[bool]

    @property
    def total_entries(self) -> int:
        return self.offsets[-1] + self.table_sizes[-1]


def field_layout(levels: int, min_resolution: int, max_resolution: int, log2_table_size: int) -> FieldLayout:
    resolutions = [int(r) for r in np.round(np.geomspace(min_resolution, max_resolution, levels))]
    if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise ValueError(f"Level resolutions must be strictly increasing: {resolutions}")
    limit = 1 << log2_table_size
    sizes, offsets, dense = [], [], []
    offset = 0
    for res in resolutions:
        vertices = (res + 1) ** 3
        size = min(_next_pow2(vertices), limit)
        sizes.append(size)
        offsets.append(offset)
        dense.append(vertices <= size)
        offset += size
    return FieldLayout(resolutions, sizes, offsets, dense)


class ColorField(nn.Module):
    """
    Hash-grid colour field. ``out_dim`` 3 gives static view-dependent colour
    (direction concatenated to the encoding), 6 gives dynamic features.
    """

    def __init__(self, levels: int = 16, features_per_level: int = 2, log2_table_size: int = 19,
                 min_resolution: int = 16, max_resolution: int = 4096, hidden: int = 64,
                 hidden_layers: int = 2, out_dim: int = 3, use_direction: Optional[bool] = None,
                 seed: int = 0):
        super().__init__()
        self.levels = levels
        self.features_per_level = features_per_level
        self.log2_table_size = log2_table_size
        self.min_resolution = min_resolution
        self.max_resolution = max_resolution
        self.hidden = hidden
        self.hidden_layers = hidden_layers
        self.out_dim = out_dim
        self.use_direction = out_dim == 3 if use_direction is None else use_direction
        self.layout = field_layout(levels, min_resolution, max_resolution, log2_table_size)

        generator = torch.Generator().manual_seed(seed)
        table = (torch.rand((self.layout.total_entries, features_per_level), generator=generator,
                            dtype=DTYPE) * 2 - 1) * 1e-4
        self.table = nn.Parameter(table)

        blocks = []
        width = self.encoding_dim + (3 if self.use_direction else 0)
        for _ in range(hidden_layers):
            blocks += [nn.Linear(width, hidden, dtype=DTYPE), nn.ReLU()]
            width = hidden
        blocks.append(nn.Linear(width, out_dim, dtype=DTYPE))
        self.mlp = nn.Sequential(*blocks)

    @property
    def encoding_dim(self) -> int:
        return self.levels * self.features_per_level

    def config(self) -> Dict[str, int]:
        return {
            'levels': self.levels,
            'features_per_level': self.features_per_level,
            'log2_table_size': self.log2_table_size,
            'min_resolution': self.min_resolution,
            'max_resolution': self.max_resolution,
            'hidden': self.hidden,
            'hidden_layers': self.hidden_layers,
            'out_dim': self.out_dim,
            'use_direction': self.use_direction,
        }

    def mlp_parameter_count(self) -> int:
        count = 0
        width = self.encoding_dim + (3 if self.use_direction else 0)
        for _ in range(self.hidden_layers):
            count += width * self.hidden + self.hidden
            width = self.hidden
        return count + width * self.out_dim + self.out_dim


def _vertex_index(corner: torch.Tensor, res: int, size: int, dense: bool) -> torch.Tensor:
    x, y, z = corner.unbind(-1)
    if dense:
        stride = res + 1
        return x + y * stride + z * stride * stride
    h = (x * HASH_PRIMES[0]) ^ (y * HASH_PRIMES[1]) ^ (z * HASH_PRIMES[2])
    return h & (size - 1)


def hash_encode(x: torch.Tensor, field: ColorField) -> torch.Tensor:
    """
    Trilinear hash-grid features for contracted points ``x`` (N, 3) in the
    radius-2 ball, concatenated level by level.
    """
    unit = ((x + GRID_EXTENT) / (2 * GRID_EXTENT)).clamp(0.0, 1.0)
    layout = field.layout
    outputs = []
    for level, res in enumerate(layout.resolutions):
        scaled = unit * res
        base = torch.floor(scaled).clamp(0, res - 1)
        frac = scaled - base
        base = base.long()
        table = field.table[layout.offsets[level]:layout.offsets[level] + layout.table_sizes[level]]
        feature = None
        for dx, dy, dz in _CORNERS:
            offset = torch.tensor([dx, dy, dz], dtype=torch.long)
            idx = _vertex_index(base + offset, res, layout.table_sizes[level], layout.dense[level])
            w = ((frac[:, 0] if dx else 1 - frac[:, 0])
                 * (frac[:, 1] if dy else 1 - frac[:, 1])
                 * (frac[:, 2] if dz else 1 - frac[:, 2]))
            term = w.unsqueeze(-1) * table[idx]
            feature = term if feature is None else feature + term
        outputs.append(feature)
    return torch.cat(outputs, dim=-1)


def query_color(p: torch.Tensor, d: torch.Tensor, field: ColorField) -> torch.Tensor:
    """View-dependent RGB: degree-0 SH from the MLP, converted and clamped at 0."""
    encoding = hash_encode(contract(p), field)
    sh0 = field.mlp(torch.cat([encoding, d], dim=-1))
    return torch.clamp_min(sh0 * SH_C0 + 0.5, 0.0)


def query_features(p: torch.Tensor, field: ColorField) -> torch.Tensor:
    return field.mlp(hash_encode(contract(p), field))


def field_backward(p: torch.Tensor, d: Optional[torch.Tensor], upstream: torch.Tensor,
                   field: ColorField) -> Dict[str, torch.Tensor]:
    """
    Gradients of <field output, upstream> for every field parameter and, in
    the static path, for the view directions.
    """
    names = [name for name, _ in field.named_parameters()]
    params = list(field.parameters())
    inputs = params
    if d is not None:
        d = d.detach().clone().requires_grad_(True)
        inputs = params + [d]
        out = query_color(p, d, field)
    else:
        out = query_features(p, field)
    grads = torch.autograd.grad(out, inputs, grad_outputs=upstream, allow_unused=True)
    result = {
        name: torch.zeros_like(param) if grad is None else grad
        for name, param, grad in zip(names, params, grads)
    }
    if d is not None:
        result['direction'] = grads[-1] if grads[-1] is not None else torch.zeros_like(d)
    return result
