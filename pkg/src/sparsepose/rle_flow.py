"""2-D affine-coupling flow and the residual log-likelihood keypoint loss.

The flow maps a keypoint residual ``xbar`` to a latent ``z`` with an exact
log-Jacobian, giving ``log p(xbar) = log base(z) + log|det dz/dxbar|``.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from .errors import ConfigurationError, NumericError

LOG_2PI = math.log(2 * math.pi)
SIGMA_EPS = 1e-9


class AffineCoupling(nn.Module):
    """Transforms one coordinate conditioned on the other.

    ``z_t = x_t * exp(s(x_c)) + t(x_c)`` with ``s`` bounded by tanh. The last
    conditioner layer starts at zero, so a fresh coupling is the identity.
    """

    def __init__(self, transformed_axis: int, hidden: int = 64):
        super().__init__()
        self.t_axis = transformed_axis
        self.c_axis = 1 - transformed_axis
        self.net = nn.Sequential(nn.Linear(1, hidden), nn.Tanh(), nn.Linear(hidden, 2))
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def _scale_shift(self, cond):
        s, t = self.net(cond).unbind(-1)
        return torch.tanh(s), t

    def forward(self, x):
        cond = x[..., self.c_axis : self.c_axis + 1]
        s, t = self._scale_shift(cond)
        out = x.clone()
        out[..., self.t_axis] = x[..., self.t_axis] * s.exp() + t
        return out, s

    def inverse(self, z):
        cond = z[..., self.c_axis : self.c_axis + 1]
        s, t = self._scale_shift(cond)
        out = z.clone()
        out[..., self.t_axis] = (z[..., self.t_axis] - t) * (-s).exp()
        return out, -s


class CouplingFlow(nn.Module):
    def __init__(self, num_layers: int = 4, hidden: int = 64, base: str = "gaussian"):
        super().__init__()
        if base not in ("gaussian", "laplace"):
            raise ConfigurationError(f"unknown base density {base!r}")
        self.base = base
        self.layers = nn.ModuleList(AffineCoupling(i % 2, hidden) for i in range(num_layers))

    def to_latent(self, x: torch.Tensor):
        """``(..., 2)`` residuals -> latent and log|det dz/dx|."""
        logdet = x.new_zeros(x.shape[:-1])
        for layer in self.layers:
            x, ld = layer(x)
            logdet = logdet + ld
        return x, logdet

    def from_latent(self, z: torch.Tensor):
        logdet = z.new_zeros(z.shape[:-1])
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z)
            logdet = logdet + ld
        return z, logdet

    def base_log_prob(self, z: torch.Tensor) -> torch.Tensor:
        if self.base == "gaussian":
            return -0.5 * (z**2).sum(-1) - LOG_2PI
        return -z.abs().sum(-1) - 2 * math.log(2.0)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        z, logdet = self.to_latent(x)
        out = self.base_log_prob(z) + logdet
        if not torch.isfinite(out).all():
            raise NumericError("non-finite flow log-density", term="flow")
        return out

    def round_trip(self, x: torch.Tensor) -> torch.Tensor:
        return self.from_latent(self.to_latent(x)[0])[0]


class RleLoss(NamedTuple):
    loss: torch.Tensor
    num_supervised: int

    @property
    def supervised(self) -> bool:
        return self.num_supervised > 0


def keypoint_nll(mu, sigma, target, flow: CouplingFlow, mode: str = "residual") -> torch.Tensor:
    """Per-keypoint negative log-likelihood ``(..., K)`` of ``target`` under the prediction.

    basic:    -log p_flow(xbar) + sum_axis log sigma
    residual: -log [Laplace(xbar) * p_flow(xbar)] + sum_axis log sigma, the
              tractable Laplace prior times a learned residual density.
    """
    sigma = sigma + SIGMA_EPS
    xbar = (target - mu) / sigma
    nll = -flow.log_prob(xbar) + sigma.log().sum(-1)
    if mode == "residual":
        nll = nll + (xbar.abs() + math.log(2.0)).sum(-1)
    elif mode != "basic":
        raise ConfigurationError(f"unknown flow loss mode {mode!r}")
    return nll


def rle_loss(mu, sigma, target, mask, flow: CouplingFlow, mode: str = "residual") -> RleLoss:
    """Sum over unmasked keypoints per instance, averaged over supervised instances.

    All inputs are ``(I, K, 2)`` except ``mask`` ``(I, K)``. An instance with
    every keypoint masked contributes nothing; if none is supervised the loss
    is an exact zero that still carries the graph.
    """
    mask = mask.bool()
    per_instance_count = mask.sum(-1)
    supervised = per_instance_count > 0
    n = int(supervised.sum())
    if n == 0:
        return RleLoss(mu.sum() * 0.0 + sigma.sum() * 0.0, 0)
    # masked entries are replaced before the flow so their values cannot produce NaNs
    safe_target = torch.where(mask[..., None], target, mu.detach())
    nll = keypoint_nll(mu, sigma, safe_target, flow, mode)
    per_instance = (nll * mask).sum(-1)
    return RleLoss(per_instance[supervised].sum() / n, n)
