"""
Small random scenes shared by the test modules.
"""

import math
import os
from dataclasses import replace

import torch

from CompactGaussianSplatting.dyn_attributes import DynGaussianSet, PhiMlp
from CompactGaussianSplatting.scene_model import DTYPE, SH_COEFFS, Camera, GaussianSet

SLOW_TESTS = os.environ.get('COMPACT_GS_SLOW_TESTS') == '1'


def camera(width=16, height=16, angle=0.0, distance=3.0, elevation=0.3):
    eye = (distance * math.sin(angle), elevation, -distance * math.cos(angle))
    return Camera.look_at(eye, (0.0, 0.0, 0.0), width, height, math.radians(50.0))


def random_gaussians(n, seed=0, with_sh=True, spread=0.8):
    generator = torch.Generator().manual_seed(seed)
    position = (torch.rand((n, 3), generator=generator, dtype=DTYPE) - 0.5) * spread
    scale = 0.08 + 0.12 * torch.rand((n, 3), generator=generator, dtype=DTYPE)
    rotation = torch.randn((n, 4), generator=generator, dtype=DTYPE)
    rotation = rotation / torch.linalg.vector_norm(rotation, dim=-1, keepdim=True)
    opacity = 0.3 + 0.6 * torch.rand(n, generator=generator, dtype=DTYPE)
    sh = None
    if with_sh:
        sh = 0.3 * torch.randn((n, SH_COEFFS, 3), generator=generator, dtype=DTYPE)
    return GaussianSet.from_activated(position, opacity, scale, rotation, sh)


def random_colors(n, seed=0):
    generator = torch.Generator().manual_seed(seed + 1000)
    return torch.rand((n, 3), generator=generator, dtype=DTYPE)


def random_dynamic(n, seed=0, field_features=False):
    generator = torch.Generator().manual_seed(seed)
    position = (torch.rand((n, 3), generator=generator, dtype=DTYPE) - 0.5) * 0.8
    scale = 0.08 + 0.12 * torch.rand((n, 3), generator=generator, dtype=DTYPE)
    t_center = torch.rand(n, generator=generator, dtype=DTYPE)
    dyn = DynGaussianSet.from_points(position, t_center, scale, opacity=0.7, t_scale=2.0,
                                     field_features=field_features)
    dyn.rotation = torch.randn((n, 4), generator=generator, dtype=DTYPE)
    dyn.features = torch.rand(tuple(dyn.features.shape), generator=generator, dtype=DTYPE)
    dyn.motion = 0.2 * torch.randn((n, 3, 3), generator=generator, dtype=DTYPE)
    dyn.rotation_motion = 0.1 * torch.randn((n, 1, 4), generator=generator, dtype=DTYPE)
    return dyn


def seeded_phi(seed=0):
    torch.manual_seed(seed)
    return PhiMlp(hidden=8, layers=1)


def float32_exact(g):
    """Snap every attribute to float32 so file and container round trips are exact."""
    def snap(t):
        return None if t is None else t.to(torch.float32).to(DTYPE)
    return replace(g, position=snap(g.position), opacity_logit=snap(g.opacity_logit),
                   log_scale=snap(g.log_scale), rotation=snap(g.rotation), sh=snap(g.sh))
