"""
Scene containers: Gaussian attributes, cameras, training frames, and the
file formats they travel in (3DGS PLY, camera JSON, PNG/PPM images).
"""

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch
from PIL import Image
from plyfile import PlyData, PlyElement, PlyElementParseError, PlyHeaderParseError

from .exceptions import CameraError, ImageError, PlyFormatError, PlyTruncationError

logger = logging.getLogger(__name__)

DTYPE = torch.float64

SH_DEGREE = 3
SH_COEFFS = (SH_DEGREE + 1) ** 2

PathLike = Union[str, Path]


class ColorSource(Enum):
    SH = "sh"
    FIELD = "field"


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x / (1 - x))


def normalize_quaternions(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternions; all-zero rows become the identity (1, 0, 0, 0)."""
    norm = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    identity = torch.zeros_like(q)
    identity[..., 0] = 1.0
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return torch.where(norm > 0, q / safe, identity)


@dataclass
class GaussianSet:
    """
    Struct-of-arrays container for N static Gaussians.

    Opacity and scale are stored pre-activation (logit / log); the
    ``opacity`` and ``scale`` properties return activated values.
    """
    position: torch.Tensor
    opacity_logit: torch.Tensor
    log_scale: torch.Tensor
    rotation: torch.Tensor
    sh: Optional[torch.Tensor] = None
    color_source: ColorSource = ColorSource.SH

    def __post_init__(self):
        n = self.position.shape[0]
        shapes = {
            'position': (self.position, (n, 3)),
            'opacity_logit': (self.opacity_logit, (n,)),
            'log_scale': (self.log_scale, (n, 3)),
            'rotation': (self.rotation, (n, 4)),
        }
        if self.color_source is ColorSource.SH:
            if self.sh is None:
                raise ValueError("SH colour source requires SH coefficients")
            shapes['sh'] = (self.sh, (n, SH_COEFFS, 3))
        for name, (tensor, expected) in shapes.items():
            if tuple(tensor.shape) != expected:
                raise ValueError(
                    f"Attribute {name} has shape {tuple(tensor.shape)}, expected {expected}")

    @property
    def count(self) -> int:
        return self.position.shape[0]

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logit)

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    @property
    def needs_normalization(self) -> torch.Tensor:
        """Rows whose quaternion is not unit length (zero rows included)."""
        norm = torch.linalg.vector_norm(self.rotation, dim=-1)
        return (norm - 1).abs() > 1e-7

    @classmethod
    def from_activated(cls, position, opacity, scale, rotation, sh=None):
        source = ColorSource.SH if sh is not None else ColorSource.FIELD
        return cls(
            position=torch.as_tensor(position, dtype=DTYPE),
            opacity_logit=inverse_sigmoid(torch.as_tensor(opacity, dtype=DTYPE)),
            log_scale=torch.log(torch.as_tensor(scale, dtype=DTYPE)),
            rotation=torch.as_tensor(rotation, dtype=DTYPE),
            sh=None if sh is None else torch.as_tensor(sh, dtype=DTYPE),
            color_source=source,
        )

    @classmethod
    def empty(cls, color_source: ColorSource = ColorSource.SH) -> 'GaussianSet':
        return cls(
            position=torch.zeros((0, 3), dtype=DTYPE),
            opacity_logit=torch.zeros((0,), dtype=DTYPE),
            log_scale=torch.zeros((0, 3), dtype=DTYPE),
            rotation=torch.zeros((0, 4), dtype=DTYPE),
            sh=torch.zeros((0, SH_COEFFS, 3), dtype=DTYPE) if color_source is ColorSource.SH else None,
            color_source=color_source,
        )

    def subset(self, index: torch.Tensor) -> 'GaussianSet':
        """Rows selected by a boolean mask or an index tensor, order kept."""
        return replace(
            self,
            position=self.position[index],
            opacity_logit=self.opacity_logit[index],
            log_scale=self.log_scale[index],
            rotation=self.rotation[index],
            sh=None if self.sh is None else self.sh[index],
        )

    def detach(self) -> 'GaussianSet':
        return replace(
            self,
            position=self.position.detach().clone(),
            opacity_logit=self.opacity_logit.detach().clone(),
            log_scale=self.log_scale.detach().clone(),
            rotation=self.rotation.detach().clone(),
            sh=None if self.sh is None else self.sh.detach().clone(),
        )


def normalize_rotations(g: GaussianSet) -> GaussianSet:
    degenerate = int((torch.linalg.vector_norm(g.rotation, dim=-1) == 0).sum())
    if degenerate:
        logger.warning(f"Replaced {degenerate} zero quaternions with identity")
    return replace(g, rotation=normalize_quaternions(g.rotation))


@dataclass
class Camera:
    """
    Pinhole camera. ``world_to_camera`` is a 4x4 rigid transform (OpenCV
    axes: x right, y down, z forward).
    """
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: torch.Tensor = field(default_factory=lambda: torch.eye(4, dtype=DTYPE))
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = torch.as_tensor(self.world_to_camera, dtype=DTYPE)
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("Focal lengths must be positive", {'fx': self.fx, 'fy': self.fy})
        if self.width < 1 or self.height < 1:
            raise CameraError("Image size must be at least 1x1",
                              {'width': self.width, 'height': self.height})
        if tuple(self.world_to_camera.shape) != (4, 4):
            raise CameraError("world_to_camera must be 4x4")
        r = self.rotation
        error = (r @ r.T - torch.eye(3, dtype=DTYPE)).abs().max().item()
        if error > 1e-6:
            raise CameraError("Camera rotation is not orthonormal", {'error': error})

    @property
    def rotation(self) -> torch.Tensor:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> torch.Tensor:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> torch.Tensor:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fov_x: float,
                up=(0.0, -1.0, 0.0), **kwargs) -> 'Camera':
        eye = torch.as_tensor(eye, dtype=DTYPE)
        target = torch.as_tensor(target, dtype=DTYPE)
        forward = target - eye
        forward = forward / torch.linalg.vector_norm(forward)
        right = torch.linalg.cross(forward, torch.as_tensor(up, dtype=DTYPE))
        right = right / torch.linalg.vector_norm(right)
        down = torch.linalg.cross(forward, right)
        rotation = torch.stack([right, down, forward])
        w2c = torch.eye(4, dtype=DTYPE)
        w2c[:3, :3] = rotation
        w2c[:3, 3] = -rotation @ eye
        focal = 0.5 * width / np.tan(0.5 * fov_x)
        return cls(width=width, height=height, fx=focal, fy=focal,
                   cx=(width - 1) / 2, cy=(height - 1) / 2, world_to_camera=w2c, **kwargs)

    def to_dict(self, timestamp: float = 0.0) -> Dict[str, Any]:
        return {
            'width': self.width,
            'height': self.height,
            'fx': self.fx,
            'fy': self.fy,
            'cx': self.cx,
            'cy': self.cy,
            'world_to_camera': self.world_to_camera.tolist(),
            'near': self.near,
            'far': self.far,
            't': timestamp,
        }


@dataclass
class FrameSample:
    camera: Camera
    image: torch.Tensor
    timestamp: float = 0.0

    def __post_init__(self):
        expected = (self.camera.height, self.camera.width, 3)
        if tuple(self.image.shape) != expected:
            raise ImageError(f"Image shape {tuple(self.image.shape)} does not match camera {expected}")
        if not 0.0 <= self.timestamp <= 1.0:
            raise ImageError(f"Timestamp {self.timestamp} outside [0, 1]")


# PLY -------------------------------------------------------------------------

_F_REST = [f'f_rest_{i}' for i in range(3 * (SH_COEFFS - 1))]
PLY_PROPERTIES = (
    ['x', 'y', 'z', 'nx', 'ny', 'nz', 'f_dc_0', 'f_dc_1', 'f_dc_2']
    + _F_REST
    + ['opacity', 'scale_0', 'scale_1', 'scale_2', 'rot_0', 'rot_1', 'rot_2', 'rot_3']
)
_REQUIRED = [name for name in PLY_PROPERTIES if name not in ('nx', 'ny', 'nz')]


def load_ply(path: PathLike) -> GaussianSet:
    try:
        plydata = PlyData.read(str(path), mmap=False)
    except PlyHeaderParseError as exc:
        raise PlyFormatError(f"Malformed PLY header in {path}: {exc}") from exc
    except (PlyElementParseError, ValueError) as exc:
        raise PlyTruncationError(f"PLY vertex data truncated in {path}: {exc}") from exc

    if 'vertex' not in plydata:
        raise PlyFormatError(f"{path} has no vertex element", missing_property='vertex')
    vertex = plydata['vertex']
    names = {p.name for p in vertex.properties}
    for name in _REQUIRED:
        if name not in names:
            raise PlyFormatError(f"{path} is missing property '{name}'", missing_property=name)
    if len(vertex.data) != vertex.count:
        raise PlyTruncationError(
            f"{path} declares {vertex.count} vertices but holds {len(vertex.data)}")

    def column(*props):
        return torch.from_numpy(
            np.stack([np.asarray(vertex[p], dtype=np.float32) for p in props], axis=1).astype(np.float64))

    n = vertex.count
    f_dc = column('f_dc_0', 'f_dc_1', 'f_dc_2').reshape(n, 1, 3)
    # f_rest is channel-major: f_rest_{c * 15 + k}
    f_rest = column(*_F_REST).reshape(n, 3, SH_COEFFS - 1).transpose(1, 2)
    g = GaussianSet(
        position=column('x', 'y', 'z'),
        opacity_logit=column('opacity').reshape(n),
        log_scale=column('scale_0', 'scale_1', 'scale_2'),
        rotation=column('rot_0', 'rot_1', 'rot_2', 'rot_3'),
        sh=torch.cat([f_dc, f_rest], dim=1).contiguous(),
        color_source=ColorSource.SH,
    )
    flagged = int(g.needs_normalization.sum())
    if flagged:
        logger.info(f"{flagged} quaternions in {path} need normalization")
    logger.info(f"Loaded {n} Gaussians from {path}")
    return g


def save_ply(g: GaussianSet, path: PathLike) -> None:
    """
    Write the 62 float properties as little-endian float32. Values are rounded
    to float32 on the way out, so save then load is bit-exact only for sets
    whose attributes are already float32-representable.
    """
    if g.color_source is not ColorSource.SH:
        raise PlyFormatError("SH export requires SH source")
    n = g.count
    sh = g.sh.detach().cpu().numpy()
    attributes = np.concatenate([
        g.position.detach().cpu().numpy(),
        np.zeros((n, 3)),
        sh[:, 0, :],
        sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1),
        g.opacity_logit.detach().cpu().numpy().reshape(n, 1),
        g.log_scale.detach().cpu().numpy(),
        g.rotation.detach().cpu().numpy(),
    ], axis=1).astype(np.float32)

    elements = np.empty(n, dtype=[(name, 'f4') for name in PLY_PROPERTIES])
    for i, name in enumerate(PLY_PROPERTIES):
        elements[name] = attributes[:, i]
    try:
        PlyData([PlyElement.describe(elements, 'vertex')], byte_order='<').write(str(path))
    except OSError:
        logger.error(f"Failed to write PLY to {path}")
        raise
    logger.info(f"Saved {n} Gaussians to {path}")


# Cameras ----------------------------------------------------------------------

def load_cameras(path: PathLike) -> List[Dict[str, Any]]:
    """
    Read a camera JSON array. Returns validated records, each with a
    ``camera`` (Camera), ``t`` (timestamp) and optional ``image`` path.
    """
    from .serializers import CameraSerializer

    try:
        records = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CameraError(f"Cannot read camera file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CameraError(f"Camera file {path} is not valid JSON: {exc}") from exc
    serializer = CameraSerializer(data=records, many=True)
    if not serializer.is_valid():
        raise CameraError(f"Invalid camera file {path}", {'errors': serializer.errors})
    return [
        {'camera': CameraSerializer.to_camera(record), 't': record['t'], 'image': record.get('image')}
        for record in serializer.validated_data
    ]


def load_frames(path: PathLike) -> List[FrameSample]:
    """Camera JSON whose records name their target images -> training frames."""
    path = Path(path)
    frames = []
    for i, record in enumerate(load_cameras(path)):
        if not record['image']:
            raise CameraError(f"Camera {i} in {path} has no target image")
        image = read_image(path.parent / record['image'])
        frames.append(FrameSample(record['camera'], image, record['t']))
    logger.info(f"Loaded {len(frames)} frames from {path}")
    return frames


def load_points(path: PathLike) -> Dict[str, Optional[torch.Tensor]]:
    """Initial point cloud JSON: ``points``, optional ``colors`` and ``timestamps``."""
    from .serializers import PointCloudSerializer

    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CameraError(f"Cannot read point file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CameraError(f"Point file {path} is not valid JSON: {exc}") from exc
    serializer = PointCloudSerializer(data=data)
    if not serializer.is_valid():
        raise CameraError(f"Invalid point file {path}", {'errors': serializer.errors})
    record = serializer.validated_data

    def tensor(name):
        value = record.get(name)
        return None if value is None else torch.as_tensor(value, dtype=DTYPE)

    points = tensor('points').reshape(-1, 3)
    return {'points': points, 'colors': tensor('colors'), 'timestamps': tensor('timestamps')}


# Images -----------------------------------------------------------------------

def read_image(path: PathLike) -> torch.Tensor:
    """8-bit PNG or ASCII PPM -> H x W x 3 tensor in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == '.ppm':
        tokens = []
        for line in path.read_text().splitlines():
            tokens.extend(line.split('#', 1)[0].split())
        if not tokens or tokens[0] != 'P3':
            raise ImageError(f"{path} is not an ASCII (P3) PPM")
        width, height, maxval = (int(v) for v in tokens[1:4])
        values = np.asarray(tokens[4:], dtype=np.float64)
        if values.size != width * height * 3:
            raise ImageError(f"{path} holds {values.size} samples, expected {width * height * 3}")
        return torch.from_numpy(values.reshape(height, width, 3) / maxval)
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert('RGB'), dtype=np.float64)
    except OSError as exc:
        raise ImageError(f"Cannot read image {path}: {exc}") from exc
    return torch.from_numpy(array / 255.0)


def write_image(image: torch.Tensor, path: PathLike) -> None:
    path = Path(path)
    array = np.rint(image.detach().clamp(0, 1).cpu().numpy() * 255).astype(np.uint8)
    if path.suffix.lower() == '.ppm':
        height, width, _ = array.shape
        rows = [' '.join(str(v) for v in row.reshape(-1)) for row in array]
        path.write_text(f"P3\n{width} {height}\n255\n" + '\n'.join(rows) + '\n')
        return
    Image.fromarray(array).save(path)
