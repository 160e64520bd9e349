"""
Differentiable CPU splatting renderer.

Gaussians are projected with the local affine (EWA) approximation, sorted
front to back and alpha-composited per pixel with the usual 3DGS rules:
alpha clamped to 0.99, contributions below 1/255 skipped, and accumulation
stopped once transmittance would fall below 1e-4. Gradients come from
autograd over the same forward code, so the backward pass is exact for the
forward the renderer actually evaluates.

The image is split into square tiles that can be rendered on a thread pool.
Each pixel walks the depth-ordered list of Gaussians whose footprint touches
its tile; a Gaussian outside the footprint has alpha below the skip
threshold, so the output does not depend on the tile size or the worker
count.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
from django.conf import settings

from .scene_model import DTYPE, Camera, GaussianSet, normalize_quaternions

logger = logging.getLogger(__name__)

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
BLUR_FLOOR = 0.3
# alpha < 1/255 beyond 3.5 standard deviations, whatever the opacity
FOOTPRINT_SIGMAS = 3.5

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def _matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product summed term by term in a fixed order."""
    terms = a.unsqueeze(-1) * b.unsqueeze(-3)
    out = terms[..., 0, :]
    for k in range(1, terms.shape[-2]):
        out = out + terms[..., k, :]
    return out


def quaternion_to_rotation_matrix(q: torch.Tensor) -> torch.Tensor:
    q = normalize_quaternions(q)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def build_covariance(scale: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """Sigma = R S S^T R^T for (..., 3) scales and (..., 4) quaternions."""
    rs = quaternion_to_rotation_matrix(rotation) * scale.unsqueeze(-2)
    return _matmul(rs, rs.transpose(-1, -2))


def eval_sh(sh: torch.Tensor, view_dir: torch.Tensor) -> torch.Tensor:
    """
    Degree-3 real SH colour. ``sh`` is (..., 16, 3) (a flat 48-vector is
    read coefficient-major), ``view_dir`` (..., 3) unit vectors.
    """
    if sh.shape[-1] == 48:
        sh = sh.reshape(*sh.shape[:-1], 16, 3)
    x, y, z = (view_dir[..., i:i + 1] for i in range(3))
    result = SH_C0 * sh[..., 0, :]
    result = result - SH_C1 * y * sh[..., 1, :] + SH_C1 * z * sh[..., 2, :] - SH_C1 * x * sh[..., 3, :]

    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    result = (result
              + SH_C2[0] * xy * sh[..., 4, :]
              + SH_C2[1] * yz * sh[..., 5, :]
              + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6, :]
              + SH_C2[3] * xz * sh[..., 7, :]
              + SH_C2[4] * (xx - yy) * sh[..., 8, :])
    result = (result
              + SH_C3[0] * y * (3 * xx - yy) * sh[..., 9, :]
              + SH_C3[1] * xy * z * sh[..., 10, :]
              + SH_C3[2] * y * (4 * zz - xx - yy) * sh[..., 11, :]
              + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[..., 12, :]
              + SH_C3[4] * x * (4 * zz - xx - yy) * sh[..., 13, :]
              + SH_C3[5] * z * (xx - yy) * sh[..., 14, :]
              + SH_C3[6] * x * (xx - 3 * yy) * sh[..., 15, :])
    return torch.clamp_min(result + 0.5, 0.0)


def sh0_to_rgb(sh0: torch.Tensor) -> torch.Tensor:
    return torch.clamp_min(sh0 * SH_C0 + 0.5, 0.0)


def gaussian_view_directions(position: torch.Tensor, cam: Camera) -> torch.Tensor:
    """Unit direction from the camera centre to each Gaussian."""
    d = position - cam.center
    return d / torch.linalg.vector_norm(d, dim=-1, keepdim=True).clamp_min(1e-12)


def pixel_ray_directions(cam: Camera) -> torch.Tensor:
    """H x W x 3 unit world-space ray directions through pixel centres."""
    ys, xs = torch.meshgrid(torch.arange(cam.height, dtype=DTYPE),
                            torch.arange(cam.width, dtype=DTYPE), indexing='ij')
    rays = torch.stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, torch.ones_like(xs)], -1)
    world = _matmul(rays.unsqueeze(-2), cam.rotation).squeeze(-2)
    return world / torch.linalg.vector_norm(world, dim=-1, keepdim=True)


@dataclass
class Projected2D:
    """
    Visible Gaussians in draw order (ascending depth, index tie-break).
    ``conic`` holds the inverse 2D covariance as (a, b, c) for
    [[a, b], [b, c]].
    """
    index: torch.Tensor
    means2d: torch.Tensor
    cov2d: torch.Tensor
    conic: torch.Tensor
    depth: torch.Tensor
    radius: torch.Tensor

    @property
    def count(self) -> int:
        return self.index.shape[0]


@dataclass
class RenderOutput:
    """``visible`` flags Gaussians whose 2D footprint box overlaps the image."""
    image: torch.Tensor
    transmittance: torch.Tensor
    projected: Projected2D
    visible: torch.Tensor


@dataclass
class RenderGradients:
    position: torch.Tensor
    scale: torch.Tensor
    rotation: torch.Tensor
    opacity: torch.Tensor
    colors: torch.Tensor


def project_tensors(position: torch.Tensor, scale: torch.Tensor, rotation: torch.Tensor,
                    cam: Camera) -> Projected2D:
    w = cam.rotation
    t = cam.translation
    p_cam = _matmul(position.unsqueeze(-2), w.T).squeeze(-2) + t
    z_all = p_cam[:, 2]
    with torch.no_grad():
        in_range = (z_all > cam.near) & (z_all < cam.far)
        index = torch.nonzero(in_range).reshape(-1)
        order = torch.sort(z_all[index], stable=True).indices
        index = index[order]

    p = p_cam[index]
    x, y, z = p.unbind(-1)
    sigma = build_covariance(scale[index], rotation[index])
    sigma_cam = _matmul(_matmul(w.expand(len(index), 3, 3), sigma), w.T.expand(len(index), 3, 3))

    zero = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([cam.fx / z, zero, -cam.fx * x / (z * z)], -1),
        torch.stack([zero, cam.fy / z, -cam.fy * y / (z * z)], -1),
    ], -2)
    cov2d = _matmul(_matmul(jac, sigma_cam), jac.transpose(-1, -2))
    cov2d = cov2d + BLUR_FLOOR * torch.eye(2, dtype=DTYPE)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], -1)
    means2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], -1)
    with torch.no_grad():
        lambda_max = 0.5 * (a + c) + torch.sqrt((0.5 * (a - c)) ** 2 + b * b)
        radius = FOOTPRINT_SIGMAS * torch.sqrt(lambda_max)
    return Projected2D(index=index, means2d=means2d, cov2d=cov2d, conic=conic,
                       depth=z, radius=radius)


def project(g: GaussianSet, cam: Camera) -> Projected2D:
    return project_tensors(g.position, g.scale, g.rotation, cam)


def _composite_pixels(pixels: torch.Tensor, means2d: torch.Tensor, conic: torch.Tensor,
                      opacity: torch.Tensor, features: torch.Tensor,
                      background: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Front-to-back blending of K ordered Gaussians over P pixels."""
    n_pixels = pixels.shape[0]
    delta = pixels.unsqueeze(1) - means2d.unsqueeze(0)
    dx, dy = delta[..., 0], delta[..., 1]
    power = -0.5 * (conic[:, 0] * dx * dx + conic[:, 2] * dy * dy) - conic[:, 1] * dx * dy
    alpha = torch.clamp(opacity * torch.exp(power), max=ALPHA_MAX)
    with torch.no_grad():
        usable = (power <= 0) & (alpha >= ALPHA_MIN)

    color = torch.zeros((n_pixels, features.shape[-1]), dtype=DTYPE)
    T = torch.ones(n_pixels, dtype=DTYPE)
    alive = torch.ones(n_pixels, dtype=torch.bool)
    for k in range(means2d.shape[0]):
        a = alpha[:, k]
        with torch.no_grad():
            test_T = T * (1 - a)
            blocked = usable[:, k] & (test_T < TRANSMITTANCE_MIN)
            active = usable[:, k] & alive & ~blocked
            alive = alive & ~blocked
        weight = torch.where(active, a * T, 0.0)
        color = color + weight.unsqueeze(-1) * features[k]
        T = torch.where(active, T * (1 - a), T)
    color = color + T.unsqueeze(-1) * background
    return color, T


def composite(proj: Projected2D, colors: torch.Tensor, opacities: torch.Tensor,
              pixel: Sequence[float], background: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Composite a single pixel. ``colors``/``opacities`` are per input
    Gaussian (indexed through ``proj.index``).
    """
    if background is None:
        background = torch.zeros(colors.shape[-1], dtype=DTYPE)
    pix = torch.as_tensor([pixel], dtype=DTYPE)
    color, _ = _composite_pixels(pix, proj.means2d, proj.conic, opacities[proj.index],
                                 colors[proj.index], background)
    return color[0]


def _tile_bounds(cam: Camera, tile_size: int) -> List[Tuple[int, int, int, int]]:
    return [
        (x0, min(x0 + tile_size, cam.width), y0, min(y0 + tile_size, cam.height))
        for y0 in range(0, cam.height, tile_size)
        for x0 in range(0, cam.width, tile_size)
    ]


def rasterize(position: torch.Tensor, scale: torch.Tensor, rotation: torch.Tensor,
              opacity: torch.Tensor, features: torch.Tensor, cam: Camera,
              background: Optional[torch.Tensor] = None, tile_size: Optional[int] = None,
              workers: Optional[int] = None) -> RenderOutput:
    """Render per-Gaussian D-dimensional features (D=3 for RGB)."""
    options = settings.COMPACT_GS
    tile_size = tile_size or options['TILE_SIZE']
    workers = workers or options['RENDER_WORKERS']
    dim = features.shape[-1]
    if background is None:
        background = torch.zeros(dim, dtype=DTYPE)
        background[:min(3, dim)] = torch.as_tensor(options['BACKGROUND'][:min(3, dim)], dtype=DTYPE)

    proj = project_tensors(position, scale, rotation, cam)
    vis_opacity = opacity[proj.index]
    vis_features = features[proj.index]
    with torch.no_grad():
        centers = proj.means2d.detach()
        radius = proj.radius

    def render_tile(bounds):
        x0, x1, y0, y1 = bounds
        ys, xs = torch.meshgrid(torch.arange(y0, y1, dtype=DTYPE),
                                torch.arange(x0, x1, dtype=DTYPE), indexing='ij')
        pixels = torch.stack([xs, ys], -1).reshape(-1, 2)
        with torch.no_grad():
            touches = ((centers[:, 0] + radius >= x0) & (centers[:, 0] - radius <= x1 - 1)
                       & (centers[:, 1] + radius >= y0) & (centers[:, 1] - radius <= y1 - 1))
            ids = torch.nonzero(touches).reshape(-1)
        color, T = _composite_pixels(pixels, proj.means2d[ids], proj.conic[ids],
                                     vis_opacity[ids], vis_features[ids], background)
        return color.reshape(y1 - y0, x1 - x0, dim), T.reshape(y1 - y0, x1 - x0)

    bounds = _tile_bounds(cam, tile_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tiles = list(pool.map(render_tile, bounds))
    else:
        tiles = [render_tile(b) for b in bounds]

    per_row = -(-cam.width // tile_size)
    rows = [tiles[i:i + per_row] for i in range(0, len(tiles), per_row)]
    image = torch.cat([torch.cat([t[0] for t in row], dim=1) for row in rows], dim=0)
    transmittance = torch.cat([torch.cat([t[1] for t in row], dim=1) for row in rows], dim=0)

    # footprint box overlaps the image
    with torch.no_grad():
        on_screen = ((radius > 0) & (centers[:, 0] + radius >= 0) & (centers[:, 0] - radius <= cam.width - 1)
                     & (centers[:, 1] + radius >= 0) & (centers[:, 1] - radius <= cam.height - 1))
    visible = torch.zeros(position.shape[0], dtype=torch.bool)
    visible[proj.index[on_screen]] = True
    return RenderOutput(image=image, transmittance=transmittance, projected=proj, visible=visible)


def render(g: GaussianSet, colors: torch.Tensor, cam: Camera, **kwargs) -> RenderOutput:
    return rasterize(g.position, g.scale, g.rotation, g.opacity, colors, cam, **kwargs)


def render_backward(g: GaussianSet, colors: torch.Tensor, cam: Camera,
                    d_image: torch.Tensor, **kwargs) -> RenderGradients:
    """
    Gradients of <image, d_image> with respect to position, activated scale,
    raw rotation quaternion, activated opacity and per-Gaussian colours.
    """
    leaves = [
        g.position.detach().clone().requires_grad_(True),
        g.scale.detach().clone().requires_grad_(True),
        g.rotation.detach().clone().requires_grad_(True),
        g.opacity.detach().clone().requires_grad_(True),
        colors.detach().clone().requires_grad_(True),
    ]
    out = rasterize(*leaves[:4], leaves[4], cam, **kwargs)
    grads = torch.autograd.grad(out.image, leaves, grad_outputs=d_image, allow_unused=True)
    grads = [torch.zeros_like(leaf) if grad is None else grad for leaf, grad in zip(leaves, grads)]
    return RenderGradients(*grads)
