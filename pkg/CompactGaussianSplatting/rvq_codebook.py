"""
Residual vector quantization for per-Gaussian attributes.

A codebook cascades L stages of C codes. Stage l quantizes what the previous
stages left over, so a vector is reconstructed as the sum of one code per
stage and stored as L small indices.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import torch
from torch import nn

from .exceptions import RvqError
from .scene_model import DTYPE

logger = logging.getLogger(__name__)

# attribute name -> vector dimensionality
ATTRIBUTE_DIMS = {
    'scale': 3,
    'rotation': 4,
    'rotation_coeffs': 4,
    'temporal_color': 3,
}


def squared_distances(x: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """(N, C) squared euclidean distances, summed per dimension."""
    diff = x.unsqueeze(1) - codes.unsqueeze(0)
    sq = diff * diff
    out = sq[..., 0]
    for d in range(1, sq.shape[-1]):
        out = out + sq[..., d]
    return out


def nearest(x: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Index of the closest code; ties go to the lowest index."""
    return torch.argmin(squared_distances(x, codes), dim=1)


def _kmeans_pp(points: torch.Tensor, size: int, generator: torch.Generator) -> torch.Tensor:
    n = points.shape[0]
    first = int(torch.randint(n, (1,), generator=generator))
    chosen = [first]
    closest = squared_distances(points, points[first:first + 1])[:, 0]
    for _ in range(1, size):
        total = closest.sum()
        if total > 0:
            pick = int(torch.multinomial(closest / total, 1, generator=generator))
        else:
            pick = int(torch.argmax(closest))
        chosen.append(pick)
        closest = torch.minimum(closest, squared_distances(points, points[pick:pick + 1])[:, 0])
    return points[chosen].clone()


def kmeans_init(vectors: torch.Tensor, size: int, iters: int = 10, seed: int = 0) -> torch.Tensor:
    """
    Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
    to the point farthest from its centroid. When there are fewer points
    than codes, the points are cycled to fill the codebook.
    """
    points = vectors.detach().to(DTYPE)
    n = points.shape[0]
    if n == 0:
        raise RvqError("K-means needs at least one vector")
    if size > n:
        logger.warning(f"K-means asked for {size} codes from {n} vectors; padding with duplicates")
        points = points[torch.arange(size) % n]
        n = size

    generator = torch.Generator().manual_seed(seed)
    codes = _kmeans_pp(points, size, generator)
    for _ in range(iters):
        dist = squared_distances(points, codes)
        assign = torch.argmin(dist, dim=1)
        sums = torch.zeros_like(codes).index_add_(0, assign, points)
        counts = torch.zeros(size, dtype=DTYPE).index_add_(0, assign, torch.ones(n, dtype=DTYPE))
        filled = counts > 0
        codes = torch.where(filled.unsqueeze(-1), sums / counts.clamp_min(1).unsqueeze(-1), codes)
        empty = torch.nonzero(~filled).reshape(-1)
        if len(empty):
            error = dist.gather(1, assign.unsqueeze(1))[:, 0]
            far = torch.argsort(error, descending=True, stable=True)[:len(empty)]
            codes[empty] = points[far]
    return codes


class RvqCodebook(nn.Module):
    """L stages of C codes of dimension D, with the latest encoding cached."""

    def __init__(self, dim: int, stages: int, size: int):
        super().__init__()
        if stages < 1 or size < 1:
            raise RvqError(f"Codebook needs at least one stage and one code, got L={stages} C={size}")
        self.dim = dim
        self.stages = stages
        self.size = size
        self.codes = nn.Parameter(torch.zeros((stages, size, dim), dtype=DTYPE))
        self.indices: Optional[torch.Tensor] = None
        self.usage = torch.zeros((stages, size), dtype=torch.long)

    def fit(self, vectors: torch.Tensor, iters: int = 10, seed: int = 0) -> 'RvqCodebook':
        """K-means each stage on the residual of the stages before it."""
        residual = vectors.detach().to(DTYPE)
        with torch.no_grad():
            for stage in range(self.stages):
                self.codes[stage] = kmeans_init(residual, self.size, iters, seed + stage)
                residual = residual - self.codes[stage][nearest(residual, self.codes[stage])]
        logger.info(f"K-means initialised {self.stages}x{self.size} codebook on {vectors.shape[0]} vectors")
        encode(vectors, self)
        return self

    def reconstruct(self, indices: torch.Tensor) -> torch.Tensor:
        out = torch.zeros((indices.shape[0], self.dim), dtype=DTYPE)
        for stage in range(self.stages):
            out = out + self.codes[stage][indices[:, stage]]
        return out

    def residual_energies(self, vectors: torch.Tensor) -> List[float]:
        """Sum of squared residuals after 0..L stages."""
        with torch.no_grad():
            residual = vectors.detach().to(DTYPE)
            energies = [float((residual * residual).sum())]
            for stage in range(self.stages):
                residual = residual - self.codes[stage][nearest(residual, self.codes[stage])]
                energies.append(float((residual * residual).sum()))
        return energies

    def reseed_dead_codes(self, vectors: torch.Tensor) -> int:
        """Move codes unused by the last encoding onto the largest residuals."""
        if self.indices is None:
            encode(vectors, self)
        reseeded = 0
        with torch.no_grad():
            residual = vectors.detach().to(DTYPE)
            for stage in range(self.stages):
                dead = torch.nonzero(self.usage[stage] == 0).reshape(-1)
                if len(dead):
                    norms = (residual * residual).sum(-1)
                    worst = torch.argsort(norms, descending=True, stable=True)[:len(dead)]
                    self.codes[stage][dead[:len(worst)]] = residual[worst]
                    reseeded += len(worst)
                residual = residual - self.codes[stage][self.indices[:, stage]]
        if reseeded:
            logger.warning(f"Reseeded {reseeded} dead codes")
            encode(vectors, self)
        return reseeded

    def stage_stats(self) -> List[Dict[str, Any]]:
        """Per-stage usage entropy (bits) and mean code norm."""
        stats = []
        for stage in range(self.stages):
            usage = self.usage[stage].to(DTYPE)
            total = usage.sum()
            if total > 0:
                p = usage[usage > 0] / total
                entropy = float(-(p * torch.log2(p)).sum())
            else:
                entropy = 0.0
            norms = torch.linalg.vector_norm(self.codes[stage].detach(), dim=-1)
            stats.append({
                'stage': stage,
                'entropy_bits': entropy,
                'mean_code_norm': float(norms.mean()),
                'used_codes': int((self.usage[stage] > 0).sum()),
            })
        return stats

    @property
    def index_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.size)))


def encode(vectors: torch.Tensor, book: RvqCodebook) -> Tuple[torch.Tensor, torch.Tensor]:
    """Greedy stage-by-stage nearest code on the running residual."""
    if vectors.shape[-1] != book.dim:
        raise RvqError(f"Codebook dimension {book.dim} does not match vectors of dimension {vectors.shape[-1]}")
    with torch.no_grad():
        residual = vectors.detach().to(DTYPE)
        indices = torch.zeros((residual.shape[0], book.stages), dtype=torch.long)
        for stage in range(book.stages):
            idx = nearest(residual, book.codes[stage])
            indices[:, stage] = idx
            residual = residual - book.codes[stage][idx]
        book.indices = indices
        book.usage = torch.stack([
            torch.bincount(indices[:, s], minlength=book.size) for s in range(book.stages)
        ])
    return indices, book.reconstruct(indices)


def codebook_loss(vectors: torch.Tensor, book: RvqCodebook) -> torch.Tensor:
    """
    sum_l sum_n |sg(r_n - r_hat_n^{l-1}) - Z^l[i_n^l]|^2 / (N C), with the
    inputs gradient-stopped so only the codes receive gradient.
    """
    n = vectors.shape[0]
    if n == 0:
        return torch.zeros((), dtype=DTYPE)
    if book.indices is None or book.indices.shape[0] != n:
        encode(vectors, book)
    target = vectors.detach().to(DTYPE)
    total = torch.zeros((), dtype=DTYPE)
    for stage in range(book.stages):
        selected = book.codes[stage][book.indices[:, stage]]
        diff = target - selected
        total = total + (diff * diff).sum()
        target = (target - selected).detach()
    return total / (n * book.size)


def straight_through(vectors: torch.Tensor, reconstruction: torch.Tensor) -> torch.Tensor:
    """Forward the reconstruction, backward the identity to the raw vectors."""
    return vectors + (reconstruction - vectors).detach()


@dataclass
class QuantizedAttribute:
    name: str
    book: RvqCodebook
    indices: torch.Tensor
    values: torch.Tensor


def quantize_attribute(name: str, values: torch.Tensor, size: int, stages: int,
                       book: Optional[RvqCodebook] = None, iters: int = 10,
                       seed: int = 0) -> QuantizedAttribute:
    """
    Replace an attribute matrix by its R-VQ reconstruction. A new codebook is
    fitted with K-means unless ``book`` is given.
    """
    if name not in ATTRIBUTE_DIMS:
        raise RvqError(f"Unsupported attribute for R-VQ: {name}")
    flat = values.reshape(values.shape[0], -1)
    if flat.shape[1] != ATTRIBUTE_DIMS[name]:
        raise RvqError(f"Attribute {name} expects dimension {ATTRIBUTE_DIMS[name]}, got {flat.shape[1]}")
    if book is None:
        book = RvqCodebook(flat.shape[1], stages, size).fit(flat, iters, seed)
    indices, recon = encode(flat, book)
    return QuantizedAttribute(name=name, book=book, indices=indices, values=recon.reshape(values.shape))
