"""Per-player objectives: adversarial (D alone or D averaged with the CRF) and L1 reconstruction."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import GraphError, NumericError
from .netspec import SCORE_EPS


@dataclass
class LossBundle:
    d_and_crf_loss: float
    g_loss: float
    recon_loss: float
    diagnostics: dict[str, float] = field(default_factory=dict)

    def row(self, iteration: int) -> list:
        d = self.diagnostics
        return [
            iteration,
            self.d_and_crf_loss,
            self.g_loss,
            self.recon_loss,
            d.get("d_real", float("nan")),
            d.get("d_fake", float("nan")),
            d.get("crf_real", float("nan")),
            d.get("crf_fake", float("nan")),
        ]


def _as_score(s) -> torch.Tensor:
    s = torch.as_tensor(s)
    if not s.is_floating_point():
        s = s.to(torch.get_default_dtype())
    if not torch.isfinite(s).all():
        raise NumericError("non-finite score")
    if (s < 0).any() or (s > 1).any():
        raise NumericError("score outside [0, 1]")
    return s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def gan_loss(d_real, d_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator loss and non-saturating generator loss, batch-averaged."""
    real = _as_score(d_real)
    fake = _as_score(d_fake)
    loss_d = -(torch.log(real) + torch.log(1.0 - fake)).mean()
    loss_g = -torch.log(fake).mean()
    return loss_d, loss_g


def crfgan_loss(d_real, d_fake, crf_real, crf_fake) -> tuple[torch.Tensor, torch.Tensor]:
    """Same as :func:`gan_loss` on the averaged scores (D + CRF) / 2.

    Averaging happens inside the log for both the real and the fake term.
    """
    real = _as_score((_as_score(d_real) + _as_score(crf_real)) / 2.0)
    fake = _as_score((_as_score(d_fake) + _as_score(crf_fake)) / 2.0)
    loss_max = -(torch.log(real) + torch.log(1.0 - fake)).mean()
    loss_g = -torch.log(fake).mean()
    return loss_max, loss_g


def reconstruct_loss(x_sub: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute voxel difference."""
    if tuple(x_sub.shape) != tuple(x_hat.shape):
        raise GraphError(f"shape mismatch {tuple(x_sub.shape)} vs {tuple(x_hat.shape)}")
    return (x_sub - x_hat).abs().mean()
