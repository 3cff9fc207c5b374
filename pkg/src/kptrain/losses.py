"""Detector training objectives: keypoint cross-entropy and coverage regularization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .targets import gaussian_kernel1d

COVERAGE_MODES = ("gaussian_mvs", "uniform", "off")


@dataclass
class LossConfig:
    coverage_sigma: float = 12.5  # pixels at reference_resolution
    coverage_weight: float = 1.0
    coverage_mode: str = "gaussian_mvs"
    reference_resolution: int = 512
    scale_with_resolution: bool = True

    def __post_init__(self):
        if self.coverage_mode not in COVERAGE_MODES:
            raise ValueError(f"coverage_mode must be one of {COVERAGE_MODES}")
        if self.coverage_mode != "off" and self.coverage_sigma <= 0:
            raise ValueError("coverage_sigma must be > 0")
        if self.coverage_weight < 0:
            raise ValueError("coverage_weight must be >= 0")

    def sigma_for(self, width: int) -> float:
        if self.scale_with_resolution:
            return self.coverage_sigma * width / self.reference_resolution
        return self.coverage_sigma


def _reflect_index(n: int, r: int) -> torch.Tensor:
    idx = np.arange(-r, n + r) % (2 * n)
    idx = np.where(idx >= n, 2 * n - 1 - idx, idx)
    return torch.as_tensor(idx, dtype=torch.long)


def smooth_torch(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Differentiable twin of :func:`kptrain.targets.smooth` over the last two dims."""
    k = gaussian_kernel1d(sigma)
    r = len(k) // 2
    *lead, h, w = x.shape
    x = x.reshape(-1, 1, h, w)
    kt = torch.as_tensor(k, dtype=x.dtype, device=x.device)
    x = x.index_select(2, _reflect_index(h, r).to(x.device))
    x = F.conv2d(x, kt.view(1, 1, -1, 1))
    x = x.index_select(3, _reflect_index(w, r).to(x.device))
    x = F.conv2d(x, kt.view(1, 1, 1, -1))
    return x.reshape(*lead, h, w)


def _as_mask(mask, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask, device=like.device).bool()


def keypoint_ce(logits: torch.Tensor, target_mask) -> torch.Tensor:
    """Mean negative log-probability of the target pixels under softmax(logits).

    ``logits`` is ``(H, W)``; the loss is normalized by the number of target
    pixels so its magnitude does not depend on k.
    """
    mask = _as_mask(target_mask, logits)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("target mask is empty")
    logp = torch.log_softmax(logits.reshape(-1), dim=0)
    return -logp[mask.reshape(-1)].sum() / n


def coverage_distribution(mvs_mask, sigma: float, dtype=torch.float64) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mvs_mask, dtype=np.float64), dtype=dtype)
    total = m.sum()
    if total <= 0:
        raise ValueError("MVS mask is empty")
    return smooth_torch(m / total, sigma)


def coverage_loss(logits: torch.Tensor, mvs_mask, config: LossConfig) -> torch.Tensor:
    """Cross-entropy between the blurred MVS distribution and the blurred prediction.

    ``uniform`` mode replaces the MVS distribution with the uniform one; ``off``
    returns zero.
    """
    if config.coverage_mode == "off":
        return logits.new_zeros(())
    h, w = logits.shape[-2:]
    sigma = config.sigma_for(w)
    if config.coverage_mode == "uniform":
        q = torch.full((h, w), 1.0 / (h * w), dtype=logits.dtype, device=logits.device)
    else:
        q = coverage_distribution(mvs_mask, sigma, logits.dtype).to(logits.device)
    p = torch.softmax(logits.reshape(-1), dim=0).reshape(h, w)
    p_s = smooth_torch(p, sigma)
    return -(q * torch.log(p_s.clamp_min(1e-300 if p_s.dtype == torch.float64 else 1e-38))).sum()


def total_loss(logits: torch.Tensor, target_mask, mvs_mask, config: LossConfig):
    """``keypoint_ce + weight * coverage_loss`` plus a per-term breakdown."""
    ce = keypoint_ce(logits, target_mask)
    if config.coverage_mode == "off" or config.coverage_weight == 0:
        cov = logits.new_zeros(())
    else:
        cov = coverage_loss(logits, mvs_mask, config)
    total = ce + config.coverage_weight * cov
    return total, {"ce": float(ce.detach()), "coverage": float(cov.detach())}
