"""
Synthetic scenes small enough to train on a laptop CPU.

Targets are rendered from a known ground truth with the same renderer used
for training, so the fixtures are recoverable by construction.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch
from django.conf import settings

from .dyn_attributes import DynGaussianSet, PhiMlp, render_dynamic
from .exceptions import ConfigError
from .scene_model import (DTYPE, SH_COEFFS, Camera, FrameSample, GaussianSet,
                          save_ply, write_image)
from .splat_renderer import SH_C0, eval_sh, gaussian_view_directions, rasterize

logger = logging.getLogger(__name__)

CAMERA_RADIUS = 3.0
FIELD_OF_VIEW = math.radians(50.0)
INIT_JITTER = 0.02


@dataclass
class ToyScene:
    mode: str
    gaussians: Union[GaussianSet, DynGaussianSet]
    frames: List[FrameSample]
    points: torch.Tensor
    colors: torch.Tensor
    timestamps: Optional[torch.Tensor] = None
    phi: Optional[PhiMlp] = None
    background: torch.Tensor = field(default_factory=lambda: torch.zeros(3, dtype=DTYPE))


def ring_cameras(views: int, width: int, height: int) -> List[Camera]:
    """Cameras on a slightly tilted ring, all looking at the origin."""
    cameras = []
    for i in range(views):
        angle = 2.0 * math.pi * i / views
        eye = (CAMERA_RADIUS * math.sin(angle), -0.6 + 1.2 * (i % 2), -CAMERA_RADIUS * math.cos(angle))
        cameras.append(Camera.look_at(eye, (0.0, 0.0, 0.0), width, height, FIELD_OF_VIEW))
    return cameras


def _zero_phi() -> PhiMlp:
    phi = PhiMlp()
    with torch.no_grad():
        for p in phi.parameters():
            p.zero_()
    phi.requires_grad_(False)
    return phi


def _static_truth(n: int, generator: torch.Generator):
    position = (torch.rand((n, 3), generator=generator, dtype=DTYPE) - 0.5)
    scale = 0.12 + 0.1 * torch.rand((n, 3), generator=generator, dtype=DTYPE)
    rotation = torch.randn((n, 4), generator=generator, dtype=DTYPE)
    rotation = rotation / torch.linalg.vector_norm(rotation, dim=-1, keepdim=True).clamp_min(1e-12)
    colors = 0.2 + 0.7 * torch.rand((n, 3), generator=generator, dtype=DTYPE)
    opacity = torch.full((n,), 0.85, dtype=DTYPE)
    return position, scale, rotation, colors, opacity


def make_toy_scene(spec: Optional[Dict[str, Any]] = None) -> ToyScene:
    """
    Build ground truth and rendered frames from a scene description (see
    ToySceneSerializer): 3 static Gaussians in 8 views by default, or 2
    moving Gaussians seen by 4 views at 8 timestamps.
    """
    from .serializers import ToySceneSerializer

    serializer = ToySceneSerializer(data=spec or {})
    if not serializer.is_valid():
        raise ConfigError("Invalid toy scene description", serializer.errors)
    spec = serializer.validated_data
    generator = torch.Generator().manual_seed(spec['seed'])
    n = spec['gaussians']
    cameras = ring_cameras(spec['views'], spec['width'], spec['height'])
    position, scale, rotation, colors, opacity = _static_truth(n, generator)
    jitter = INIT_JITTER * torch.randn((n, 3), generator=generator, dtype=DTYPE)

    if spec['mode'] == 'static':
        background = torch.as_tensor(settings.COMPACT_GS['BACKGROUND'], dtype=DTYPE)
        sh = torch.zeros((n, SH_COEFFS, 3), dtype=DTYPE)
        sh[:, 0] = (colors - 0.5) / SH_C0
        truth = GaussianSet.from_activated(position, opacity, scale, rotation, sh)
        frames = []
        for cam in cameras:
            rgb = eval_sh(truth.sh, gaussian_view_directions(truth.position, cam))
            image = rasterize(truth.position, truth.scale, truth.rotation, truth.opacity, rgb, cam,
                              background=background).image
            frames.append(FrameSample(cam, image, 0.0))
        logger.info(f"Built static toy scene: {n} Gaussians, {len(frames)} views")
        return ToyScene('static', truth, frames, position + jitter, colors, background=background)

    steps = spec['timestamps']
    times = [i / (steps - 1) if steps > 1 else 0.0 for i in range(steps)]
    velocity = 0.4 * (torch.rand((n, 3), generator=generator, dtype=DTYPE) - 0.5)
    truth = DynGaussianSet.from_points(position, torch.full((n,), 0.5, dtype=DTYPE), scale,
                                       opacity=0.85, t_scale=0.5)
    truth.rotation = rotation
    truth.features[:, :3] = colors
    truth.motion[:, 0] = velocity
    phi = _zero_phi()
    background = torch.as_tensor(settings.COMPACT_GS['BACKGROUND'], dtype=DTYPE)
    frames = []
    with torch.no_grad():
        for t in times:
            for cam in cameras:
                frames.append(FrameSample(cam, render_dynamic(truth, cam, t, phi, background=background).image, t))
    logger.info(f"Built dynamic toy scene: {n} Gaussians, {len(cameras)} views x {steps} timestamps")
    return ToyScene('dynamic', truth, frames, position + jitter, colors,
                    timestamps=truth.t_center.clone(), phi=phi, background=background)


def write_toy_scene(scene: ToyScene, out_dir: Union[str, Path], image_format: str = 'ppm') -> Path:
    """
    Write a scene directory: ``cameras.json`` (with image paths),
    ``images/``, ``points.json`` and the ground truth.
    """
    out = Path(out_dir)
    (out / 'images').mkdir(parents=True, exist_ok=True)
    records = []
    for i, frame in enumerate(scene.frames):
        name = f'images/frame_{i:04d}.{image_format}'
        write_image(frame.image, out / name)
        record = frame.camera.to_dict(frame.timestamp)
        record['image'] = name
        records.append(record)
    (out / 'cameras.json').write_text(json.dumps(records, indent=2))
    (out / 'points.json').write_text(json.dumps({
        'points': scene.points.tolist(),
        'colors': scene.colors.tolist(),
        'timestamps': scene.timestamps.tolist() if scene.timestamps is not None else None,
    }))
    if scene.mode == 'static':
        save_ply(scene.gaussians, out / 'ground_truth.ply')
    else:
        truth = {name: getattr(scene.gaussians, name).tolist()
                 for name in DynGaussianSet.attribute_names()}
        (out / 'ground_truth.json').write_text(json.dumps(truth))
    logger.info(f"Wrote {scene.mode} toy scene with {len(scene.frames)} frames to {out}")
    return out
