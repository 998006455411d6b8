"""Full-volume generation and the seam-consistency check against slab-wise generation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import GeometryError
from .netspec import g1_forward, g2_forward, receptive_radius
from .subvolume import extract_embedding_subset, tiling_selectors
from .volume import Volume3D


def _latent_batch(state, z) -> tuple[torch.Tensor, bool]:
    z = torch.as_tensor(z).to(state.config.dtype)
    single = z.ndim == 1
    return (z[None] if single else z), single


def _to_volumes(x: torch.Tensor, single: bool):
    vols = [Volume3D(v[0].detach().cpu().float().numpy()) for v in x]
    return vols[0] if single else vols


@torch.no_grad()
def generate_full(state, z):
    """G2 applied to the whole embedding G1(z). A 1-D ``z`` gives one Volume3D, a batch a list."""
    zb, single = _latent_batch(state, z)
    x = g2_forward(state.g2, g1_forward(state.g1, zb))
    if tuple(x.shape[2:]) != state.geometry.full_shape:
        raise GeometryError(f"generated shape {tuple(x.shape[2:])} != {state.geometry.full_shape}")
    return _to_volumes(x, single)


@torch.no_grad()
def generate_stitched(state, z):
    """G1(z) once, G2 on each disjoint embedding slab, slabs concatenated along depth."""
    zb, single = _latent_batch(state, z)
    a = g1_forward(state.g1, zb)
    slabs = [g2_forward(state.g2, extract_embedding_subset(a, sel)) for sel in tiling_selectors(state.geometry)]
    return _to_volumes(torch.cat(slabs, dim=2), single)


def g2_radius(state) -> int:
    return receptive_radius(state.g2.graph)


@dataclass
class ConsistencyReport:
    rho: int
    slab_depth: int
    interior_max_diff: float
    boundary_max_diff: float
    boundary_grad_full: float
    boundary_grad_stitched: float
    n_interior_voxels: int
    n_boundary_voxels: int

    def to_dict(self) -> dict:
        return asdict(self)


def seam_band_mask(depth: int, slab_depth: int, rho: int) -> np.ndarray:
    """True for depth indices within ``rho`` voxels of an internal slab seam."""
    z = np.arange(depth)
    mask = np.zeros(depth, dtype=bool)
    for b in range(slab_depth, depth, slab_depth):
        mask |= (z >= b - rho) & (z < b + rho)
    return mask


def consistency_report(full: Volume3D, stitched: Volume3D, rho: int, slab_depth: int) -> ConsistencyReport:
    """Compare full and stitched generations away from and near the slab seams.

    Interior voxels are farther than ``rho`` from every seam; the seam-artifact
    proxy is the mean absolute depth-gradient across the boundary bands.
    """
    if full.shape != stitched.shape:
        raise GeometryError(f"shape mismatch {full.shape} vs {stitched.shape}")
    a = full.voxels.astype(np.float64)
    b = stitched.voxels.astype(np.float64)
    band = seam_band_mask(a.shape[0], slab_depth, rho)
    diff = np.abs(a - b)
    interior = diff[~band]
    boundary = diff[band]
    # depth differences v[z+1] - v[z] for z inside a band
    gz = band[:-1]
    grad_full = np.abs(np.diff(a, axis=0))[gz]
    grad_st = np.abs(np.diff(b, axis=0))[gz]
    plane = a.shape[1] * a.shape[2]
    return ConsistencyReport(
        rho=int(rho),
        slab_depth=int(slab_depth),
        interior_max_diff=float(interior.max()) if interior.size else 0.0,
        boundary_max_diff=float(boundary.max()) if boundary.size else 0.0,
        boundary_grad_full=float(grad_full.mean()) if grad_full.size else 0.0,
        boundary_grad_stitched=float(grad_st.mean()) if grad_st.size else 0.0,
        n_interior_voxels=int((~band).sum() * plane),
        n_boundary_voxels=int(band.sum() * plane),
    )


def report_for_state(state, z) -> ConsistencyReport:
    geom = state.geometry
    return consistency_report(
        generate_full(state, z), generate_stitched(state, z), g2_radius(state), geom.extent * geom.scale
    )
