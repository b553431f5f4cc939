"""Adversarial objectives shared by the feature-volume and image
discriminators: non-saturating logistic losses with R1 gradient penalty on
real inputs only.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def g_nonsat_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(-fake_logits).mean()


def d_nonsat_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def r1_penalty(real_logits: torch.Tensor, real_inputs: torch.Tensor) -> torch.Tensor:
    """E[ ||d logit / d real||^2 ]; caller scales by lambda/2."""
    grad = torch.autograd.grad(real_logits.sum(), real_inputs, create_graph=True)[0]
    return grad.flatten(1).pow(2).sum(dim=1).mean()


def discriminator_step(disc, real: torch.Tensor, fake: torch.Tensor,
                       r1_weight: float) -> tuple[torch.Tensor, dict]:
    """Full discriminator objective; fake must already be detached."""
    real = real.detach().requires_grad_(True)
    real_logits = disc(real)
    fake_logits = disc(fake)
    adv = d_nonsat_loss(real_logits, fake_logits)
    pen = r1_penalty(real_logits, real) if r1_weight > 0 else real.new_zeros(())
    total = adv + (r1_weight / 2.0) * pen
    return total, {"d_adv": float(adv.detach()), "d_r1": float(pen.detach())}
