"""Fully-connected binary-label CRF over embedding patches.

Energy of a labelling y in {0, 1}^N::

    E(y) = sum_i u_i(y_i) + sum_{i<j} w * k(x_i, x_j) * [y_i != y_j]
    k(x_i, x_j) = exp(-|x_i - x_j|^2 / (2 theta^2))

Label 1 means "consistent"; the mean of Q_i(1) over patches is the scalar
score fed to the adversarial objective.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .errors import CapacityError, NumericError, ParameterError
from .netspec import INIT_STD, SCORE_EPS, crf_pool_factor

MAX_EXACT_PATCHES = 14


@dataclass
class PatchGraph:
    x: np.ndarray  # (N, C) patch embeddings
    coords: np.ndarray | None = None  # (N, 3) positions on the (pooled) embedding grid

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 2:
            raise ParameterError(f"need at least 2 patch embeddings, got shape {self.x.shape}")
        if not np.isfinite(self.x).all():
            raise NumericError("patch embeddings must be finite")

    @property
    def n(self) -> int:
        return self.x.shape[0]


def patch_graph(a, max_patches: int = 512) -> PatchGraph:
    """Flatten an embedding grid (C, d, h, w) into patches, average-pooling if needed."""
    a = np.asarray(a, dtype=np.float64)
    f = crf_pool_factor(a.shape[1:], max_patches)
    if f > 1:
        c, d, h, w = a.shape
        a = a.reshape(c, d // f, f, h // f, f, w // f, f).mean(axis=(2, 4, 6))
    coords = np.stack(np.meshgrid(*(np.arange(n) for n in a.shape[1:]), indexing="ij"), -1)
    return PatchGraph(a.reshape(a.shape[0], -1).T, coords.reshape(-1, 3))


@dataclass
class Potentials:
    """Unary costs (N, 2), similarity kernel (N, N) and pairwise weight."""

    unary: np.ndarray
    kernel: np.ndarray
    w: float

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        n = self.unary.shape[0]
        if self.unary.shape != (n, 2) or self.kernel.shape != (n, n):
            raise ParameterError("unary must be (N, 2) and kernel (N, N)")
        if self.w < 0:
            raise ParameterError(f"pairwise weight must be >= 0, got {self.w}")

    @property
    def n(self) -> int:
        return self.unary.shape[0]

    @property
    def unary_gap(self) -> np.ndarray:
        """u_i(0) - u_i(1): the logit of label 1 before any pairwise message."""
        return self.unary[:, 0] - self.unary[:, 1]


def gaussian_kernel(x: np.ndarray, theta: float) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    return np.exp(-d2 / (2.0 * theta * theta))


@dataclass
class CrfModel:
    unary_weight: np.ndarray  # (2, C)
    unary_bias: np.ndarray  # (2,)
    w: float = 0.01
    theta: float = 1.0
    n_iter: int = 5

    def __post_init__(self):
        if self.w < 0:
            raise ParameterError("w must be >= 0")
        if self.theta <= 0:
            raise ParameterError("theta must be > 0")
        if self.n_iter < 1:
            raise ParameterError("need at least one mean-field sweep")

    def potentials(self, g: PatchGraph) -> Potentials:
        unary = g.x @ np.asarray(self.unary_weight).T + np.asarray(self.unary_bias)
        return Potentials(unary, gaussian_kernel(g.x, self.theta), self.w)


def energy(pot: Potentials, y) -> float:
    y = np.asarray(y)
    if y.shape != (pot.n,) or not np.isin(y, (0, 1)).all():
        raise ParameterError("labels must be a length-N vector over {0, 1}")
    y = y.astype(np.int64)
    un = pot.unary[np.arange(pot.n), y].sum()
    differ = y[:, None] != y[None, :]
    pair = np.triu(pot.kernel * differ, 1).sum()
    return float(un + pot.w * pair)


def gibbs_exact(pot: Potentials) -> tuple[float, np.ndarray]:
    """Partition function and exact marginals (N, 2) by enumerating all 2^N labellings."""
    if pot.n > MAX_EXACT_PATCHES:
        raise CapacityError(f"exact enumeration limited to {MAX_EXACT_PATCHES} patches, got {pot.n}")
    probs, log_z = _gibbs_probs(pot)
    bits = (np.arange(1 << pot.n)[:, None] >> np.arange(pot.n)[None, :]) & 1
    q1 = probs @ bits
    return math.exp(log_z), np.stack([1.0 - q1, q1], axis=1)


def gibbs_probabilities(pot: Potentials) -> np.ndarray:
    """P(Y = y | x) for every labelling, indexed by the bit pattern of y."""
    return _gibbs_probs(pot)[0]


def _gibbs_probs(pot):
    e = kernels.enumerate_energies(np.ascontiguousarray(pot.unary), np.ascontiguousarray(pot.kernel), pot.w)
    e_min = e.min()
    unnorm = np.exp(-(e - e_min))
    s = unnorm.sum()
    return unnorm / s, math.log(s) - e_min


def meanfield_infer(pot: Potentials, n_iter: int = 5, *, trace: bool = False):
    """Sequential mean-field marginals (N, 2).

    Starts from the unary-only distribution and runs ``n_iter`` sweeps in
    ascending patch order. With ``trace=True`` also returns the marginals
    after every sweep (index 0 is the starting point).
    """
    if n_iter < 1:
        raise ParameterError("n_iter must be >= 1")
    a = np.ascontiguousarray(pot.unary_gap[None, :])
    K = np.ascontiguousarray(pot.kernel[None])
    if not trace:
        q, _, _ = kernels.meanfield_forward(a, K, float(pot.w), n_iter)
        return _two_column(q[0])
    steps = []
    q, q0, _ = kernels.meanfield_forward(a, K, float(pot.w), 0)
    steps.append(_two_column(q0[0]))
    for t in range(1, n_iter + 1):
        q, _, _ = kernels.meanfield_forward(a, K, float(pot.w), t)
        steps.append(_two_column(q[0]))
    return steps[-1], steps


def _two_column(q1):
    return np.stack([1.0 - q1, q1], axis=1)


def free_energy(pot: Potentials, Q: np.ndarray) -> float:
    """F(Q) = E_Q[E] - H(Q) for a factorised Q."""
    Q = np.asarray(Q, dtype=np.float64)
    expected_unary = np.sum(Q * pot.unary)
    q1 = Q[:, 1]
    p_differ = q1[:, None] * (1.0 - q1[None, :]) + (1.0 - q1[:, None]) * q1[None, :]
    expected_pair = pot.w * np.triu(pot.kernel * p_differ, 1).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        neg_entropy = np.sum(np.where(Q > 0, Q * np.log(Q), 0.0))
    return float(expected_unary + expected_pair + neg_entropy)


class _MeanField(torch.autograd.Function):
    """Differentiable sequential mean-field; returns q_i = Q_i(1), shape (B, N)."""

    @staticmethod
    def forward(ctx, a, K, w, n_sweeps):
        a_np = np.ascontiguousarray(a.detach().cpu().numpy(), dtype=np.float64)
        K_np = np.ascontiguousarray(K.detach().cpu().numpy(), dtype=np.float64)
        w_val = float(w.detach())
        q, _, old = kernels.meanfield_forward(a_np, K_np, w_val, int(n_sweeps))
        ctx.saved = (K_np, w_val, q, old)
        ctx.dtypes = (a.dtype, K.dtype, w.dtype)
        return torch.from_numpy(q).to(a.dtype)

    @staticmethod
    def backward(ctx, grad_q):
        K_np, w_val, q, old = ctx.saved
        g = np.ascontiguousarray(grad_q.detach().cpu().numpy(), dtype=np.float64)
        ga, gK, gw = kernels.meanfield_backward(K_np, w_val, q, old, g)
        da, dK, dw = ctx.dtypes
        return (
            torch.from_numpy(ga).to(da),
            torch.from_numpy(gK).to(dK),
            torch.tensor(gw, dtype=dw),
            None,
        )


def meanfield_q(a: torch.Tensor, K: torch.Tensor, w: torch.Tensor, n_sweeps: int) -> torch.Tensor:
    return _MeanField.apply(a, K, w, n_sweeps)


class CrfHead(nn.Module):
    """Trainable CRF: linear unary head, pairwise weight w >= 0, bandwidth theta > 0."""

    def __init__(self, embed_channels: int, n_iter: int = 5, max_patches: int = 512,
                 w_init: float | None = None, theta_init: float | None = None):
        super().__init__()
        self.unary = nn.Linear(embed_channels, 2)
        # total coupling w * sum_j k_ij stays below 1 even when all patches look alike
        w = w_init if w_init is not None else 0.5 / max_patches
        self.w = nn.Parameter(torch.tensor(float(w)))
        theta = theta_init if theta_init is not None else math.sqrt(embed_channels)
        self.log_theta = nn.Parameter(torch.tensor(math.log(theta)))
        self.n_iter = n_iter
        self.max_patches = max_patches

    def reset_parameters(self, generator: torch.Generator) -> None:
        with torch.no_grad():
            self.unary.weight.copy_(torch.randn(self.unary.weight.shape, generator=generator) * INIT_STD)
            self.unary.bias.zero_()

    @property
    def theta(self) -> torch.Tensor:
        return self.log_theta.exp()

    def project_(self) -> None:
        """Keep the pairwise weight feasible after an optimizer step."""
        with torch.no_grad():
            self.w.clamp_(min=0.0)

    def to_model(self) -> CrfModel:
        return CrfModel(
            self.unary.weight.detach().double().numpy().copy(),
            self.unary.bias.detach().double().numpy().copy(),
            w=max(self.w.item(), 0.0),
            theta=self.theta.item(),
            n_iter=self.n_iter,
        )

    def patches(self, a: torch.Tensor) -> torch.Tensor:
        """(B, C, d, h, w) embedding -> (B, N, C) patch vectors."""
        f = crf_pool_factor(tuple(a.shape[2:]), self.max_patches)
        if f > 1:
            a = F.avg_pool3d(a, f)
        return a.flatten(2).transpose(1, 2)

    def score_patches(self, x: torch.Tensor) -> torch.Tensor:
        """Per-sample mean of Q_i(1) over patches (B, N, C) -> (B,)."""
        if not torch.isfinite(x).all():
            raise NumericError("non-finite embedding passed to the CRF")
        u = self.unary(x)
        a = u[..., 0] - u[..., 1]
        sq = (x * x).sum(-1)
        d2 = (sq[:, :, None] + sq[:, None, :] - 2.0 * x @ x.transpose(1, 2)).clamp(min=0.0)
        theta = self.theta.to(x.dtype)
        K = torch.exp(-d2 / (2.0 * theta * theta))
        q = meanfield_q(a, K, self.w.to(x.dtype), self.n_iter)
        return q.mean(dim=1).clamp(SCORE_EPS, 1.0 - SCORE_EPS)

    def forward(self, a: torch.Tensor) -> torch.Tensor:
        return self.score_patches(self.patches(a))


def crf_score(head: CrfHead, a: torch.Tensor) -> torch.Tensor:
    """Consistency score in [eps, 1 - eps] for an embedding grid (batched or not)."""
    single = a.ndim == 4
    out = head(a[None] if single else a)
    return out[0] if single else out
