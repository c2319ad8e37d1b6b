"""Structural similarity (SSIM) between image tensors.

11x11 Gaussian window with sigma 1.5, C1=(0.01*L)^2, C2=(0.03*L)^2 at
dynamic range L=1, computed per channel with valid windowing and averaged.
"""

import torch
import torch.nn.functional as F

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _window(dtype) -> torch.Tensor:
    t = torch.arange(WINDOW_SIZE, dtype=dtype) - (WINDOW_SIZE - 1) / 2
    g = torch.exp(-(t * t) / (2 * WINDOW_SIGMA ** 2))
    w = torch.outer(g, g)
    return w / w.sum()


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean SSIM of two (B,3,H,W) or (1,3,H,W) tensors in [0,1]."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(ssim_map_mean(a, b).mean())


def ssim_per_image(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ssim_map_mean(a, b)


def ssim_map_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image SSIM, shape (B,). Inputs must be at least 11x11."""
    if a.shape[-1] < WINDOW_SIZE or a.shape[-2] < WINDOW_SIZE:
        raise ValueError(f"image smaller than the {WINDOW_SIZE}x{WINDOW_SIZE} SSIM window")
    a = a.detach()
    b = b.detach()
    channels = a.shape[1]
    w = _window(a.dtype)[None, None].expand(channels, 1, -1, -1)

    mu_a = F.conv2d(a, w, groups=channels)
    mu_b = F.conv2d(b, w, groups=channels)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    sigma_aa = F.conv2d(a * a, w, groups=channels) - mu_aa
    sigma_bb = F.conv2d(b * b, w, groups=channels) - mu_bb
    sigma_ab = F.conv2d(a * b, w, groups=channels) - mu_ab

    num = (2 * mu_ab + C1) * (2 * sigma_ab + C2)
    den = (mu_aa + mu_bb + C1) * (sigma_aa + sigma_bb + C2)
    return (num / den).mean(dim=(1, 2, 3))
