"""
End-to-end optimisation of compact Gaussian scenes.

The loop follows the usual 3DGS recipe (Adam over per-attribute parameter
groups, clone/split densification, opacity reset, exponential position LR
decay) and adds:

* volume masks on scale and opacity with a mask loss, pruning masked
  Gaussians at every densification step and once more at the end;
* a shared colour field (hash grid + MLP) instead of per-Gaussian SH;
* residual vector quantization of scale/rotation (and temporal attributes
  for dynamic scenes) during the final window of iterations.

One JSON record per iteration is written to the training log.
"""

import dataclasses
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from django.conf import settings
from torch import nn

from . import metrics
from .color_field import ColorField, query_color, query_features
from .dyn_attributes import DynGaussianSet, PhiMlp, render_dynamic, temporal_opacity
from .exceptions import ConfigError, TrainingDivergedError
from .rvq_codebook import RvqCodebook, codebook_loss, encode, straight_through
from .scene_model import DTYPE, SH_COEFFS, Camera, ColorSource, FrameSample, GaussianSet
from .splat_renderer import (SH_C0, eval_sh, gaussian_view_directions,
                             quaternion_to_rotation_matrix, rasterize)
from .volume_mask import MaskState, hard_mask, mask_loss

logger = logging.getLogger(__name__)

STATIC_ATTRIBUTES = ('position', 'opacity_logit', 'log_scale', 'rotation')
DYNAMIC_ATTRIBUTES = DynGaussianSet.attribute_names()
TEMPORAL_ATTRIBUTES = ('rotation_coeffs', 'temporal_color')


@dataclass
class TrainConfig:
    mode: str = 'static'
    iterations: int = 30000
    seed: int = 0

    # ablation switches
    use_mask: bool = True
    color_mode: str = 'field'
    use_rvq: bool = True
    use_temporal_rvq: bool = True
    half_precision: bool = True

    lambda_mask: float = 5e-4
    mask_threshold: float = 0.01
    lambda_ssim: float = 0.2

    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    feature_lr: float = 2.5e-3
    opacity_lr: float = 0.05
    scaling_lr: float = 5e-3
    rotation_lr: float = 1e-3
    mask_lr: float = 1e-2
    field_lr: float = 1e-2
    field_lr_milestones: List[int] = field(default_factory=lambda: [5000, 15000, 25000])
    field_lr_gamma: float = 0.33
    codebook_lr: float = 1e-3
    phi_lr: float = 1e-3
    motion_lr: float = 1.6e-4
    t_center_lr: float = 1e-3
    t_scale_lr: float = 1e-2

    densify_from_iter: int = 500
    densify_until_iter: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    opacity_reset_interval: int = 3000
    min_opacity: float = 0.005

    rvq_window: int = 1000
    rvq_size: int = 64
    rvq_stages: int = 6
    temporal_rvq_size: int = 64
    temporal_rvq_stages: int = 3
    kmeans_iters: int = 10

    hash_levels: int = 16
    hash_features: int = 2
    hash_min_resolution: int = 16
    hash_max_resolution: int = 4096
    hash_log2_size: int = 19
    field_hidden: int = 64
    field_layers: int = 2
    phi_hidden: int = 32
    phi_layers: int = 2

    @classmethod
    def from_dict(cls, data: Dict[str, Any], preset: Optional[str] = None) -> 'TrainConfig':
        """Merge ``data`` over a named preset and validate it."""
        from .serializers import TrainConfigSerializer

        serializer = TrainConfigSerializer(data={'preset': preset, **data} if preset else data)
        if not serializer.is_valid():
            raise ConfigError("Invalid training configuration", serializer.errors)
        return cls(**serializer.validated_data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def window_start(self) -> int:
        return self.iterations - self.rvq_window

    @property
    def field_colors(self) -> bool:
        return self.color_mode == 'field'


@dataclass
class LossBreakdown:
    ren: torch.Tensor
    l1: torch.Tensor
    ssim: torch.Tensor
    mask: torch.Tensor
    rvq: Dict[str, torch.Tensor]
    total: torch.Tensor

    def to_dict(self) -> Dict[str, float]:
        values = {'ren': self.ren, 'l1': self.l1, 'ssim': self.ssim, 'mask': self.mask}
        values.update({f'rvq_{name}': value for name, value in self.rvq.items()})
        values['total'] = self.total
        return {name: float(value) for name, value in values.items()}


def compute_loss(image: torch.Tensor, target: torch.Tensor, mask: Optional[MaskState],
                 books: Dict[str, Tuple[torch.Tensor, RvqCodebook]], cfg: TrainConfig) -> LossBreakdown:
    """
    (1 - l_ssim) L1 + l_ssim (1 - SSIM) + l_m L_m + the codebook losses of
    the active books (empty outside the quantization window).
    """
    l1 = (image - target).abs().mean()
    ssim_value = metrics.ssim(image, target)
    ren = (1.0 - cfg.lambda_ssim) * l1 + cfg.lambda_ssim * (1.0 - ssim_value)
    l_mask = mask_loss(mask) if mask is not None else torch.zeros((), dtype=DTYPE)
    rvq = {name: codebook_loss(vectors, book) for name, (vectors, book) in books.items()}
    total = ren
    if mask is not None:
        total = total + mask.lambda_m * l_mask
    for value in rvq.values():
        total = total + value
    return LossBreakdown(ren=ren, l1=l1, ssim=ssim_value, mask=l_mask, rvq=rvq, total=total)


def optimizer_step(optimizer: torch.optim.Optimizer, lrs: Optional[Dict[str, float]] = None) -> None:
    """Adam update with optional per-group learning rates (groups by name)."""
    if lrs:
        for group in optimizer.param_groups:
            if group.get('name') in lrs:
                group['lr'] = lrs[group['name']]
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def exponential_lr(step: int, lr_init: float, lr_final: float, max_steps: int) -> float:
    t = min(max(step / max(max_steps, 1), 0.0), 1.0)
    return math.exp(math.log(lr_init) * (1 - t) + math.log(lr_final) * t)


def scene_extent(cameras: Sequence[Camera]) -> float:
    centers = torch.stack([cam.center for cam in cameras])
    radius = float(torch.linalg.vector_norm(centers - centers.mean(0), dim=-1).max()) * 1.1
    return radius if radius > 0 else 1.0


class ModelState:
    """
    Per-Gaussian parameters, each in its own Adam group so densification can
    prune and extend rows together with the optimizer moments.
    """

    def __init__(self, tensors: Dict[str, torch.Tensor], lrs: Dict[str, float], mode: str = 'static'):
        self.mode = mode
        self.params = {name: nn.Parameter(t.detach().clone().to(DTYPE)) for name, t in tensors.items()}
        self.optimizer = torch.optim.Adam(
            [{'params': [p], 'lr': lrs[name], 'name': name} for name, p in self.params.items()],
            lr=0.0, eps=1e-15,
        )
        self.grad_accum = torch.zeros(self.count, dtype=DTYPE)
        self.denom = torch.zeros(self.count, dtype=DTYPE)

    @property
    def count(self) -> int:
        return self.params['position'].shape[0]

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.params['log_scale'])

    @property
    def base_opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.params['opacity_logit'])

    def gaussians(self) -> Union[GaussianSet, DynGaussianSet]:
        if self.mode == 'dynamic':
            return DynGaussianSet(**{name: self.params[name] for name in DYNAMIC_ATTRIBUTES})
        return GaussianSet(
            **{name: self.params[name] for name in STATIC_ATTRIBUTES},
            sh=self.params.get('sh'),
            color_source=ColorSource.SH if 'sh' in self.params else ColorSource.FIELD,
        )

    def mask_state(self, cfg: TrainConfig) -> Optional[MaskState]:
        if 'mask' not in self.params:
            return None
        return MaskState(self.params['mask'], cfg.mask_threshold, cfg.lambda_mask)

    def replace_tensor(self, name: str, tensor: torch.Tensor) -> None:
        for group in self.optimizer.param_groups:
            if group['name'] != name:
                continue
            stored = self.optimizer.state.pop(group['params'][0], None)
            param = nn.Parameter(tensor.detach().clone())
            if stored is not None:
                stored['exp_avg'] = torch.zeros_like(tensor)
                stored['exp_avg_sq'] = torch.zeros_like(tensor)
                self.optimizer.state[param] = stored
            group['params'][0] = param
            self.params[name] = param

    def prune(self, keep: torch.Tensor) -> None:
        for group in self.optimizer.param_groups:
            old = group['params'][0]
            stored = self.optimizer.state.pop(old, None)
            param = nn.Parameter(old.detach()[keep].clone())
            if stored is not None:
                stored['exp_avg'] = stored['exp_avg'][keep]
                stored['exp_avg_sq'] = stored['exp_avg_sq'][keep]
                self.optimizer.state[param] = stored
            group['params'][0] = param
            self.params[group['name']] = param
        self.grad_accum = self.grad_accum[keep]
        self.denom = self.denom[keep]

    def extend(self, new: Dict[str, torch.Tensor]) -> None:
        if not next(iter(new.values())).shape[0]:
            return
        for group in self.optimizer.param_groups:
            old = group['params'][0]
            extra = new[group['name']].detach().to(DTYPE)
            stored = self.optimizer.state.pop(old, None)
            param = nn.Parameter(torch.cat([old.detach(), extra], dim=0))
            if stored is not None:
                stored['exp_avg'] = torch.cat([stored['exp_avg'], torch.zeros_like(extra)], dim=0)
                stored['exp_avg_sq'] = torch.cat([stored['exp_avg_sq'], torch.zeros_like(extra)], dim=0)
                self.optimizer.state[param] = stored
            group['params'][0] = param
            self.params[group['name']] = param
        self.grad_accum = torch.zeros(self.count, dtype=DTYPE)
        self.denom = torch.zeros(self.count, dtype=DTYPE)

    def add_densification_stats(self, grad2d: torch.Tensor, index: torch.Tensor, cam: Camera) -> None:
        """
        Accumulate NDC-space gradient norms of the projected means. Callers
        pass only Gaussians whose footprint reaches the image.
        """
        ndc = grad2d * torch.tensor([cam.width / 2.0, cam.height / 2.0], dtype=DTYPE)
        self.grad_accum[index] += torch.linalg.vector_norm(ndc, dim=-1)
        self.denom[index] += 1

    def reset_opacity(self) -> None:
        capped = torch.clamp(self.base_opacity, max=0.01)
        self.replace_tensor('opacity_logit', torch.logit(capped))
        logger.info("Opacity reset")


def densify_step(state: ModelState, cfg: TrainConfig, extent: float,
                 generator: Optional[torch.Generator] = None) -> None:
    """
    Clone small and split large Gaussians whose mean NDC gradient exceeds the
    threshold. Children inherit every attribute, mask parameter included;
    split children are resampled inside the parent with scale / 1.6.
    """
    with torch.no_grad():
        grads = torch.where(state.denom > 0, state.grad_accum / state.denom.clamp_min(1), 0.0)
        hot = grads >= cfg.densify_grad_threshold
        large = state.scale.max(dim=1).values > cfg.percent_dense * extent
        clone = hot & ~large
        split = hot & large

        rows = {name: p.detach() for name, p in state.params.items()}
        cloned = {name: t[clone] for name, t in rows.items()}

        n_split = int(split.sum())
        children = {name: t[split].repeat_interleave(2, dim=0) for name, t in rows.items()}
        if n_split:
            std = state.scale[split].repeat_interleave(2, dim=0)
            samples = torch.normal(torch.zeros_like(std), std, generator=generator)
            rot = quaternion_to_rotation_matrix(rows['rotation'][split]).repeat_interleave(2, dim=0)
            children['position'] = (rot @ samples.unsqueeze(-1)).squeeze(-1) + children['position']
            children['log_scale'] = torch.log(std / 1.6)

        new = {name: torch.cat([cloned[name], children[name]], dim=0) for name in rows}
        state.extend(new)
        if n_split:
            keep = torch.cat([~split, torch.ones(state.count - split.shape[0], dtype=torch.bool)])
            state.prune(keep)
        if int(clone.sum()) or n_split:
            logger.info(f"Densified: cloned {int(clone.sum())}, split {n_split}, now {state.count}")


def prune_low_opacity(state: ModelState, cfg: TrainConfig) -> None:
    with torch.no_grad():
        keep = state.base_opacity >= cfg.min_opacity
    if not bool(keep.all()):
        logger.info(f"Pruned {int((~keep).sum())} low-opacity Gaussians")
        state.prune(keep)


def prune_masked(state: ModelState, cfg: TrainConfig) -> None:
    mask = state.mask_state(cfg)
    if mask is None:
        return
    keep = mask.keep()
    if not bool(keep.all()):
        logger.info(f"Mask pruning removed {int((~keep).sum())} of {state.count} Gaussians")
        state.prune(keep)


def _knn_scale(points: torch.Tensor) -> torch.Tensor:
    """sqrt of the mean squared distance to the 3 nearest neighbours."""
    n = points.shape[0]
    if n < 2:
        return torch.full((n,), 0.1, dtype=DTYPE)
    dist = torch.cdist(points, points) ** 2
    dist.fill_diagonal_(math.inf)
    k = min(3, n - 1)
    mean = torch.topk(dist, k, dim=1, largest=False).values.mean(dim=1)
    return torch.sqrt(mean.clamp_min(1e-7))


def initial_tensors(points: torch.Tensor, colors: Optional[torch.Tensor], cfg: TrainConfig,
                    timestamps: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    """3DGS-style initialisation from a point cloud."""
    points = points.to(DTYPE)
    n = points.shape[0]
    log_scale = torch.log(_knn_scale(points)).unsqueeze(-1).repeat(1, 3)
    rotation = torch.zeros((n, 4), dtype=DTYPE)
    rotation[:, 0] = 1.0
    tensors = {
        'position': points,
        'opacity_logit': torch.logit(torch.full((n,), 0.1, dtype=DTYPE)),
        'log_scale': log_scale,
        'rotation': rotation,
    }
    rgb = colors.to(DTYPE) if colors is not None else torch.full((n, 3), 0.5, dtype=DTYPE)
    if cfg.mode == 'dynamic':
        if timestamps is None:
            timestamps = torch.full((n,), 0.5, dtype=DTYPE)
        tensors.update({
            'features': torch.zeros((n, 3 if cfg.field_colors else 9), dtype=DTYPE),
            'motion': torch.zeros((n, 3, 3), dtype=DTYPE),
            'rotation_motion': torch.zeros((n, 1, 4), dtype=DTYPE),
            't_center': timestamps.to(DTYPE),
            'log_t_scale': torch.log(torch.full((n,), 4.0, dtype=DTYPE)),
        })
        if not cfg.field_colors:
            tensors['features'][:, :3] = rgb
    elif not cfg.field_colors:
        sh = torch.zeros((n, SH_COEFFS, 3), dtype=DTYPE)
        sh[:, 0] = (rgb - 0.5) / SH_C0
        tensors['sh'] = sh
    if cfg.use_mask:
        tensors['mask'] = torch.zeros(n, dtype=DTYPE)
    return tensors


def _learning_rates(cfg: TrainConfig, extent: float) -> Dict[str, float]:
    return {
        'position': cfg.position_lr_init * extent,
        'opacity_logit': cfg.opacity_lr,
        'log_scale': cfg.scaling_lr,
        'rotation': cfg.rotation_lr,
        'sh': cfg.feature_lr,
        'features': cfg.feature_lr,
        'mask': cfg.mask_lr,
        'motion': cfg.motion_lr * extent,
        'rotation_motion': cfg.rotation_lr,
        't_center': cfg.t_center_lr,
        'log_t_scale': cfg.t_scale_lr,
    }


def quantized_attributes(cfg: TrainConfig) -> List[str]:
    names = []
    if cfg.use_rvq:
        names += ['scale', 'rotation']
    if cfg.mode == 'dynamic' and cfg.use_temporal_rvq:
        names += list(TEMPORAL_ATTRIBUTES)
    return names


def attribute_vectors(params: Dict[str, torch.Tensor], name: str) -> torch.Tensor:
    """Raw rows of a quantized attribute as N x D vectors."""
    if name == 'scale':
        return params['log_scale']
    if name == 'rotation':
        return params['rotation']
    if name == 'rotation_coeffs':
        return params['rotation_motion'].reshape(-1, 4)
    return params['features'][:, -3:]


def with_attribute(params: Dict[str, torch.Tensor], name: str, vectors: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Copy of ``params`` with the quantized attribute replaced."""
    out = dict(params)
    if name == 'scale':
        out['log_scale'] = vectors
    elif name == 'rotation':
        out['rotation'] = vectors
    elif name == 'rotation_coeffs':
        out['rotation_motion'] = vectors.reshape(-1, 1, 4)
    else:
        out['features'] = torch.cat([params['features'][:, :-3], vectors], dim=1)
    return out


def book_shape(cfg: TrainConfig, name: str) -> Tuple[int, int]:
    """(size, stages) of the codebook for one quantized attribute."""
    if name in TEMPORAL_ATTRIBUTES:
        return cfg.temporal_rvq_size, cfg.temporal_rvq_stages
    return cfg.rvq_size, cfg.rvq_stages


@dataclass
class TrainedModel:
    """Everything needed to render a trained (pruned, quantized) scene."""
    mode: str
    gaussians: Union[GaussianSet, DynGaussianSet]
    field: Optional[ColorField] = None
    phi: Optional[PhiMlp] = None
    books: Dict[str, RvqCodebook] = dataclasses.field(default_factory=dict)
    background: Optional[torch.Tensor] = None

    @property
    def count(self) -> int:
        return self.gaussians.count

    def colors(self, cam: Camera) -> torch.Tensor:
        g = self.gaussians
        dirs = gaussian_view_directions(g.position, cam)
        if self.field is not None:
            return query_color(g.position, dirs, self.field)
        return eval_sh(g.sh, dirs)

    def render(self, cam: Camera, t: float = 0.0, **kwargs) -> torch.Tensor:
        with torch.no_grad():
            if self.mode == 'dynamic':
                spatial = query_features(self.gaussians.position, self.field) if self.field is not None else None
                return render_dynamic(self.gaussians, cam, t, self.phi, spatial=spatial,
                                      background=self.background, **kwargs).image
            g = self.gaussians
            return rasterize(g.position, g.scale, g.rotation, g.opacity, self.colors(cam), cam,
                             background=self.background, **kwargs).image


def save_model(model: TrainedModel, path: Union[str, Path]) -> None:
    """Full-precision snapshot (float64 tensors, module state dicts)."""
    g = model.gaussians
    names = DYNAMIC_ATTRIBUTES if model.mode == 'dynamic' else STATIC_ATTRIBUTES
    payload = {
        'mode': model.mode,
        'gaussians': {name: getattr(g, name).detach().clone() for name in names},
        'sh': g.sh.detach().clone() if model.mode == 'static' and g.sh is not None else None,
        'field': {'config': model.field.config(), 'state': model.field.state_dict()} if model.field else None,
        'phi': {'hidden': model.phi.hidden, 'layers': model.phi.layers,
                'state': model.phi.state_dict()} if model.phi else None,
        'books': {name: {'dim': b.dim, 'stages': b.stages, 'size': b.size,
                         'codes': b.codes.detach().clone(), 'indices': b.indices}
                  for name, b in model.books.items()},
        'background': model.background,
    }
    torch.save(payload, str(path))
    logger.info(f"Saved {model.count} Gaussian model to {path}")


def load_model(path: Union[str, Path]) -> TrainedModel:
    try:
        payload = torch.load(str(path), weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise ConfigError(f"Cannot read model snapshot {path}: {exc}") from exc
    if payload['mode'] == 'dynamic':
        gaussians = DynGaussianSet(**payload['gaussians'])
    else:
        sh = payload['sh']
        gaussians = GaussianSet(**payload['gaussians'], sh=sh,
                                color_source=ColorSource.SH if sh is not None else ColorSource.FIELD)
    color_field = None
    if payload['field'] is not None:
        color_field = ColorField(**payload['field']['config'])
        color_field.load_state_dict(payload['field']['state'])
        color_field.requires_grad_(False)
    phi = None
    if payload['phi'] is not None:
        phi = PhiMlp(payload['phi']['hidden'], payload['phi']['layers'])
        phi.load_state_dict(payload['phi']['state'])
        phi.requires_grad_(False)
    books = {}
    for name, record in payload['books'].items():
        book = RvqCodebook(record['dim'], record['stages'], record['size'])
        with torch.no_grad():
            book.codes.copy_(record['codes'])
        book.requires_grad_(False)
        if record['indices'] is not None:
            book.indices = record['indices']
            book.usage = torch.stack([torch.bincount(book.indices[:, s], minlength=book.size)
                                      for s in range(book.stages)])
        books[name] = book
    return TrainedModel(mode=payload['mode'], gaussians=gaussians, field=color_field, phi=phi,
                        books=books, background=payload['background'])


@dataclass
class TrainResult:
    model: TrainedModel
    history: List[Dict[str, Any]]
    final_metrics: Dict[str, float]


class Trainer:
    def __init__(self, frames: Sequence[FrameSample], points: torch.Tensor, cfg: TrainConfig,
                 colors: Optional[torch.Tensor] = None, timestamps: Optional[torch.Tensor] = None,
                 log_path: Optional[Path] = None):
        if not frames:
            raise ConfigError("Training needs at least one frame")
        self.frames = list(frames)
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.extent = scene_extent([f.camera for f in self.frames])
        self.background = torch.as_tensor(settings.COMPACT_GS['BACKGROUND'], dtype=DTYPE)
        self.state = ModelState(initial_tensors(points, colors, cfg, timestamps),
                                _learning_rates(cfg, self.extent), cfg.mode)

        network = []
        self.field = None
        if cfg.field_colors:
            self.field = ColorField(
                levels=cfg.hash_levels, features_per_level=cfg.hash_features,
                log2_table_size=cfg.hash_log2_size, min_resolution=cfg.hash_min_resolution,
                max_resolution=cfg.hash_max_resolution, hidden=cfg.field_hidden,
                hidden_layers=cfg.field_layers, out_dim=6 if cfg.mode == 'dynamic' else 3,
                seed=cfg.seed,
            )
            network.append({'params': list(self.field.parameters()), 'lr': cfg.field_lr, 'name': 'field'})
        self.phi = None
        if cfg.mode == 'dynamic':
            self.phi = PhiMlp(cfg.phi_hidden, cfg.phi_layers)
            network.append({'params': list(self.phi.parameters()), 'lr': cfg.phi_lr, 'name': 'phi'})
        self.network_optimizer = torch.optim.Adam(network, lr=0.0, eps=1e-15) if network else None
        self.network_scheduler = None
        if self.network_optimizer is not None:
            self.network_scheduler = torch.optim.lr_scheduler.MultiStepLR(
                self.network_optimizer, milestones=cfg.field_lr_milestones, gamma=cfg.field_lr_gamma)

        self.books: Dict[str, RvqCodebook] = {}
        self.book_optimizer: Optional[torch.optim.Optimizer] = None
        self.history: List[Dict[str, Any]] = []
        self.log_path = Path(log_path) if log_path else None

    # -- one iteration -------------------------------------------------------

    def _quantized_params(self, in_window: bool):
        params = dict(self.state.params)
        active = {}
        if not in_window:
            return params, active
        for name, book in self.books.items():
            vectors = attribute_vectors(params, name)
            _, recon = encode(vectors, book)
            params = with_attribute(params, name, straight_through(vectors, recon))
            active[name] = (vectors, book)
        return params, active

    def _forward(self, frame: FrameSample, params: Dict[str, torch.Tensor], mask: Optional[MaskState]):
        cam = frame.camera
        m = hard_mask(mask.mask_param, mask.threshold) if mask is not None else None
        scale = torch.exp(params['log_scale'])
        if self.cfg.mode == 'dynamic':
            dyn = DynGaussianSet(**{name: params[name] for name in DYNAMIC_ATTRIBUTES})
            opacity = temporal_opacity(dyn, frame.timestamp)
            if m is not None:
                scale = scale * m.unsqueeze(-1)
                opacity = opacity * m
            spatial = query_features(dyn.position, self.field) if self.field is not None else None
            out = render_dynamic(dyn, cam, frame.timestamp, self.phi, scale=scale, opacity=opacity,
                                 spatial=spatial, background=self.background)
            return out.image, out.splat

        position = params['position']
        opacity = torch.sigmoid(params['opacity_logit'])
        if m is not None:
            scale = scale * m.unsqueeze(-1)
            opacity = opacity * m
        dirs = gaussian_view_directions(position, cam)
        if self.field is not None:
            colors = query_color(position, dirs, self.field)
        else:
            colors = eval_sh(params['sh'], dirs)
        out = rasterize(position, scale, params['rotation'], opacity, colors, cam, background=self.background)
        return out.image, out

    def _start_window(self) -> None:
        names = quantized_attributes(self.cfg)
        for offset, name in enumerate(names):
            size, stages = book_shape(self.cfg, name)
            vectors = attribute_vectors(self.state.params, name).detach()
            book = RvqCodebook(vectors.shape[1], stages, size)
            if vectors.shape[0]:
                book.fit(vectors, self.cfg.kmeans_iters, self.cfg.seed + 100 * offset)
                book.reseed_dead_codes(vectors)
            self.books[name] = book
        if self.books:
            self.book_optimizer = torch.optim.Adam(
                [{'params': [book.codes], 'lr': self.cfg.codebook_lr, 'name': name}
                 for name, book in self.books.items()], lr=self.cfg.codebook_lr, eps=1e-15)
            logger.info(f"Quantization window opened for {', '.join(self.books)}")

    def step(self, iteration: int) -> LossBreakdown:
        cfg = self.cfg
        if iteration == cfg.window_start and not self.books:
            self._start_window()
        in_window = iteration >= cfg.window_start and bool(self.books)

        frame = self.frames[int(torch.randint(len(self.frames), (1,), generator=self.generator))]
        mask = self.state.mask_state(cfg)
        params, active = self._quantized_params(in_window)
        image, splat = self._forward(frame, params, mask)
        splat.projected.means2d.retain_grad()
        losses = compute_loss(image, frame.image, mask, active, cfg)
        if not torch.isfinite(losses.total):
            raise TrainingDivergedError(iteration, losses.to_dict())
        losses.total.backward()

        with torch.no_grad():
            if splat.projected.means2d.grad is not None and splat.projected.count:
                covered = splat.visible[splat.projected.index]
                self.state.add_densification_stats(splat.projected.means2d.grad[covered],
                                                   splat.projected.index[covered], frame.camera)

        position_lr = exponential_lr(iteration, cfg.position_lr_init * self.extent,
                                     cfg.position_lr_final * self.extent, cfg.iterations)
        optimizer_step(self.state.optimizer, {'position': position_lr})
        if self.network_optimizer is not None:
            optimizer_step(self.network_optimizer)
            self.network_scheduler.step()
        if in_window and self.book_optimizer is not None:
            optimizer_step(self.book_optimizer)

        self._densify(iteration + 1)
        self._log(iteration, losses)
        return losses

    def _densify(self, done: int) -> None:
        cfg = self.cfg
        if done % cfg.densify_interval == 0 and done > cfg.densify_from_iter:
            if done < cfg.densify_until_iter:
                densify_step(self.state, cfg, self.extent, self.generator)
                prune_low_opacity(self.state, cfg)
            prune_masked(self.state, cfg)
            self.state.grad_accum.zero_()
            self.state.denom.zero_()
        if cfg.opacity_reset_interval and done % cfg.opacity_reset_interval == 0 \
                and done < cfg.densify_until_iter:
            self.state.reset_opacity()

    def _log(self, iteration: int, losses: LossBreakdown) -> None:
        record = {
            'iter': iteration,
            'losses': losses.to_dict(),
            'N': self.state.count,
            'lr': {group['name']: group['lr'] for group in self.state.optimizer.param_groups},
        }
        if self.network_optimizer is not None:
            record['lr'].update({g['name']: g['lr'] for g in self.network_optimizer.param_groups})
        self.history.append(record)
        self._write(record)

    def _write(self, record: Dict[str, Any]) -> None:
        if self.log_path is None:
            return
        with self.log_path.open('a') as handle:
            handle.write(json.dumps(record) + '\n')

    # -- full run ------------------------------------------------------------

    def finalize(self) -> TrainedModel:
        """Drop masked Gaussians and bake the codebook reconstructions."""
        prune_masked(self.state, self.cfg)
        params = {name: p.detach().clone() for name, p in self.state.params.items() if name != 'mask'}
        for name, book in self.books.items():
            vectors = attribute_vectors(params, name)
            if vectors.shape[0]:
                _, recon = encode(vectors, book)
                params = with_attribute(params, name, recon.detach())
        if self.cfg.mode == 'dynamic':
            gaussians = DynGaussianSet(**{name: params[name] for name in DYNAMIC_ATTRIBUTES})
        else:
            gaussians = GaussianSet(**{name: params[name] for name in STATIC_ATTRIBUTES},
                                    sh=params.get('sh'),
                                    color_source=ColorSource.SH if 'sh' in params else ColorSource.FIELD)
        for module in (self.field, self.phi):
            if module is not None:
                module.requires_grad_(False)
        for book in self.books.values():
            book.requires_grad_(False)
        return TrainedModel(mode=self.cfg.mode, gaussians=gaussians, field=self.field, phi=self.phi,
                            books=dict(self.books), background=self.background)

    def run(self) -> TrainResult:
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text('')
        logger.info(f"Training {self.cfg.mode} scene for {self.cfg.iterations} iterations "
                    f"from {self.state.count} Gaussians")
        for iteration in range(self.cfg.iterations):
            self.step(iteration)
        model = self.finalize()
        views = metrics.evaluate_views(lambda f: model.render(f.camera, f.timestamp), self.frames)
        final = {
            'psnr': sum(v.psnr for v in views) / len(views),
            'ssim': sum(v.ssim for v in views) / len(views),
            'N': model.count,
        }
        self._write({'final': True, **final})
        logger.info(f"Training finished with {model.count} Gaussians, PSNR {final['psnr']:.2f} dB")
        return TrainResult(model=model, history=self.history, final_metrics=final)


def train(frames: Sequence[FrameSample], points: torch.Tensor, cfg: TrainConfig,
          colors: Optional[torch.Tensor] = None, timestamps: Optional[torch.Tensor] = None,
          log_path: Optional[Path] = None) -> TrainResult:
    return Trainer(frames, points, cfg, colors, timestamps, log_path).run()
