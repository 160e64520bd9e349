"""
Space-time Gaussians for dynamic scenes.

Each Gaussian has a canonical position/rotation at its temporal centre
``mu``, polynomial motion around it, a radial-basis temporal opacity and a
9-D colour feature. Features are splatted like colours and decoded per pixel
by a small MLP fed with the pixel's ray direction.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import torch
from django.conf import settings
from torch import nn

from .scene_model import DTYPE, Camera
from .splat_renderer import RenderOutput, build_covariance, pixel_ray_directions, rasterize

logger = logging.getLogger(__name__)

POSITION_ORDER = 3
ROTATION_ORDER = 1
FEATURE_DIM = 9


@dataclass
class DynGaussianSet:
    """
    N space-time Gaussians. ``features`` is N x 9 with per-Gaussian colour
    features, or N x 3 (time-scaled part only) when the first six channels
    come from the colour field.
    """
    position: torch.Tensor
    rotation: torch.Tensor
    log_scale: torch.Tensor
    opacity_logit: torch.Tensor
    features: torch.Tensor
    motion: torch.Tensor
    rotation_motion: torch.Tensor
    t_center: torch.Tensor
    log_t_scale: torch.Tensor

    def __post_init__(self):
        n = self.position.shape[0]
        expected = {
            'position': (n, 3),
            'rotation': (n, 4),
            'log_scale': (n, 3),
            'opacity_logit': (n,),
            'motion': (n, POSITION_ORDER, 3),
            'rotation_motion': (n, ROTATION_ORDER, 4),
            't_center': (n,),
            'log_t_scale': (n,),
        }
        for name, shape in expected.items():
            actual = tuple(getattr(self, name).shape)
            if actual != shape:
                raise ValueError(f"Attribute {name} has shape {actual}, expected {shape}")
        if tuple(self.features.shape) not in ((n, FEATURE_DIM), (n, 3)):
            raise ValueError(f"Attribute features has shape {tuple(self.features.shape)}")

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    @property
    def t_scale(self) -> torch.Tensor:
        return torch.exp(self.log_t_scale)

    @property
    def uses_field_features(self) -> bool:
        return self.features.shape[1] == 3

    def subset(self, index: torch.Tensor) -> 'DynGaussianSet':
        return DynGaussianSet(**{name: getattr(self, name)[index] for name in self.attribute_names()})

    def detach(self) -> 'DynGaussianSet':
        return DynGaussianSet(**{name: getattr(self, name).detach().clone()
                                 for name in self.attribute_names()})

    @staticmethod
    def attribute_names():
        return ('position', 'rotation', 'log_scale', 'opacity_logit', 'features',
                'motion', 'rotation_motion', 't_center', 'log_t_scale')

    @classmethod
    def from_points(cls, points: torch.Tensor, t_center: torch.Tensor, scale: torch.Tensor,
                    opacity: float = 0.1, t_scale: float = 4.0,
                    field_features: bool = False) -> 'DynGaussianSet':
        n = points.shape[0]
        rotation = torch.zeros((n, 4), dtype=DTYPE)
        rotation[:, 0] = 1.0
        return cls(
            position=points.to(DTYPE).clone(),
            rotation=rotation,
            log_scale=torch.log(scale.to(DTYPE)),
            opacity_logit=torch.logit(torch.full((n,), opacity, dtype=DTYPE)),
            features=torch.zeros((n, 3 if field_features else FEATURE_DIM), dtype=DTYPE),
            motion=torch.zeros((n, POSITION_ORDER, 3), dtype=DTYPE),
            rotation_motion=torch.zeros((n, ROTATION_ORDER, 4), dtype=DTYPE),
            t_center=t_center.to(DTYPE).clone(),
            log_t_scale=torch.log(torch.full((n,), t_scale, dtype=DTYPE)),
        )


def _time_offset(dyn: DynGaussianSet, t: float) -> torch.Tensor:
    return float(t) - dyn.t_center


def position_at(dyn: DynGaussianSet, t: float) -> torch.Tensor:
    """sp + sum_k u_k (t - mu)^k for every Gaussian."""
    dt = _time_offset(dyn, t).unsqueeze(-1)
    position = dyn.position
    power = torch.ones_like(dt)
    for k in range(POSITION_ORDER):
        power = power * dt
        position = position + dyn.motion[:, k] * power
    return position


def rotation_at(dyn: DynGaussianSet, t: float) -> torch.Tensor:
    """Unnormalised quaternion sr + sum_k v_k (t - mu)^k."""
    dt = _time_offset(dyn, t).unsqueeze(-1)
    rotation = dyn.rotation
    power = torch.ones_like(dt)
    for k in range(ROTATION_ORDER):
        power = power * dt
        rotation = rotation + dyn.rotation_motion[:, k] * power
    return rotation


def temporal_opacity(dyn: DynGaussianSet, t: float) -> torch.Tensor:
    dt = _time_offset(dyn, t)
    return dyn.opacity * torch.exp(-dyn.t_scale * dt * dt)


def time_covariance(dyn: DynGaussianSet, t: float) -> torch.Tensor:
    return build_covariance(dyn.scale, rotation_at(dyn, t))


def feature_at(dyn: DynGaussianSet, t: float,
               spatial: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    9-D feature (f_1..6, (t - mu) * f_7..9). With field features the first
    six channels are passed in as ``spatial``.
    """
    dt = _time_offset(dyn, t).unsqueeze(-1)
    if dyn.uses_field_features:
        if spatial is None:
            raise ValueError("Field-backed features need the spatial colour features")
        return torch.cat([spatial, dt * dyn.features], dim=-1)
    return torch.cat([dyn.features[:, :6], dt * dyn.features[:, 6:]], dim=-1)


class PhiMlp(nn.Module):
    """Residual view/time colour head on the splatted feature image."""

    def __init__(self, hidden: int = 32, layers: int = 2):
        super().__init__()
        blocks = []
        width = 6 + 3
        for _ in range(layers):
            blocks += [nn.Linear(width, hidden, dtype=DTYPE), nn.ReLU()]
            width = hidden
        blocks.append(nn.Linear(width, 3, dtype=DTYPE))
        self.net = nn.Sequential(*blocks)
        self.hidden = hidden
        self.layers = layers

    def forward(self, features: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([features, directions], dim=-1))


def decode_color(features: torch.Tensor, directions: torch.Tensor, phi: PhiMlp,
                 coverage: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    C = F_1..3 + phi(F_4..6, F_7..9, d) over any leading shape. ``coverage``
    (accumulated opacity, shape ``[..., 1]``) scales the phi term.
    """
    view = phi(features[..., 3:], directions)
    if coverage is not None:
        view = coverage * view
    return features[..., :3] + view


@dataclass
class DynamicRenderOutput:
    image: torch.Tensor
    features: torch.Tensor
    splat: RenderOutput


def render_dynamic(dyn: DynGaussianSet, cam: Camera, t: float, phi: PhiMlp,
                   scale: Optional[torch.Tensor] = None,
                   opacity: Optional[torch.Tensor] = None,
                   spatial: Optional[torch.Tensor] = None,
                   background: Optional[torch.Tensor] = None, **kwargs) -> DynamicRenderOutput:
    """
    Render the scene at time ``t``. ``scale``/``opacity`` override the
    time-conditioned values (used to apply volume masks).

    Features are splatted over a zero background. The view-dependent term is
    weighted by the pixel's accumulated opacity and the RGB ``background``
    fills the remaining transmittance, so an empty pixel shows the
    background rather than the head's response to a zero feature.
    """
    scale = dyn.scale if scale is None else scale
    opacity = temporal_opacity(dyn, t) if opacity is None else opacity
    if background is None:
        background = torch.as_tensor(settings.COMPACT_GS['BACKGROUND'], dtype=DTYPE)
    features = feature_at(dyn, t, spatial)
    splat = rasterize(position_at(dyn, t), scale, rotation_at(dyn, t), opacity, features, cam,
                      background=torch.zeros(FEATURE_DIM, dtype=DTYPE), **kwargs)
    T = splat.transmittance.unsqueeze(-1)
    image = decode_color(splat.image, pixel_ray_directions(cam), phi, coverage=1 - T) + T * background
    return DynamicRenderOutput(image=image, features=splat.image, splat=splat)


