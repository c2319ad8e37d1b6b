"""Benign post-processing operations applied between encoder and decoder.

All operations act on (B, 3, H, W) tensors and keep the computation graph
alive so gradients reach the encoder: blur and resize are linear, crop
propagates to the surviving pixels, and JPEG uses a surrogate gradient
(see the jpeg module).
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .imageio import MIN_SIZE


class ParameterError(ValueError):
    """Post-processing parameter outside its legal domain."""


# family indices are fixed: they index the scheduler state space and the
# reward bias vector [identity, jpeg, blur, crop, resize]
FAMILIES = ("identity", "jpeg", "blur", "crop", "resize")

# training parameter grids, one per family
GRIDS = {
    "identity": (None,),
    "jpeg": tuple(range(10, 101, 10)),
    "blur": tuple(round(0.1 * i, 1) for i in range(11)),
    "crop": tuple(round(0.6 + 0.1 * i, 1) for i in range(5)),
    "resize": tuple(round(0.3 + 0.1 * i, 1) for i in range(8)),
}


@dataclass(frozen=True)
class PostProcessOp:
    """One post-processing operation: a family plus its parameter."""

    kind: str
    param: float | int | None = None

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ParameterError(f"unknown post-processing kind {self.kind!r}")
        if self.kind == "identity":
            if self.param is not None:
                raise ParameterError("identity takes no parameter")
        elif self.kind == "jpeg":
            if not isinstance(self.param, int) or not 1 <= self.param <= 100:
                raise ParameterError(f"jpeg quality must be an integer in [1, 100], got {self.param!r}")
        elif self.kind == "blur":
            if self.param is None or self.param < 0:
                raise ParameterError(f"blur variance must be >= 0, got {self.param!r}")
        elif self.kind == "crop":
            if self.param is None or not 0 < self.param <= 1:
                raise ParameterError(f"crop size must be in (0, 1], got {self.param!r}")
        elif self.kind == "resize":
            if self.param is None or self.param <= 0:
                raise ParameterError(f"resize ratio must be > 0, got {self.param!r}")

    @property
    def family(self) -> int:
        return FAMILIES.index(self.kind)

    def label(self) -> str:
        return "identity" if self.kind == "identity" else f"{self.kind}({self.param})"


def identity_op() -> PostProcessOp:
    return PostProcessOp("identity")


def gaussian_kernel(variance: float) -> torch.Tensor:
    """Normalized 2-D Gaussian, radius ceil(3*sigma). Radius 0 is the 1x1 identity."""
    if variance < 0:
        raise ParameterError(f"variance must be >= 0, got {variance}")
    sigma = math.sqrt(variance)
    radius = math.ceil(3 * sigma)
    if radius == 0:
        return torch.ones(1, 1)
    t = torch.arange(-radius, radius + 1, dtype=torch.float32)
    k1 = torch.exp(-(t * t) / (2 * variance))
    k2 = torch.outer(k1, k1)
    return k2 / k2.sum()


def gaussian_blur(img: torch.Tensor, variance: float) -> torch.Tensor:
    """Blur with a normalized Gaussian kernel and reflective boundary padding."""
    kernel = gaussian_kernel(variance).to(img.dtype)
    if kernel.shape[0] == 1:
        return img
    r = kernel.shape[0] // 2
    c = img.shape[1]
    weight = kernel[None, None].expand(c, 1, -1, -1)
    padded = F.pad(img, (r, r, r, r), mode="reflect")
    return F.conv2d(padded, weight, groups=c)


def crop(img: torch.Tensor, size: float) -> torch.Tensor:
    """Centered crop to floor(size*H) x floor(size*W).

    When the discarded margin is odd the extra row/column comes off the
    bottom/right. The output keeps its reduced dimensions; the decoder is
    size-agnostic so no padding back.
    """
    if not 0 < size <= 1:
        raise ParameterError(f"crop size must be in (0, 1], got {size}")
    height, width = img.shape[-2:]
    out_h = math.floor(size * height)
    out_w = math.floor(size * width)
    if out_h < MIN_SIZE or out_w < MIN_SIZE:
        raise ParameterError(f"crop size {size} yields {out_h}x{out_w}, below the {MIN_SIZE}px minimum")
    top = (height - out_h) // 2
    left = (width - out_w) // 2
    return img[..., top:top + out_h, left:left + out_w]


def resize(img: torch.Tensor, ratio: float) -> torch.Tensor:
    """Bilinear resize to floor(ratio*H) x floor(ratio*W), align_corners=False."""
    if ratio <= 0:
        raise ParameterError(f"resize ratio must be > 0, got {ratio}")
    height, width = img.shape[-2:]
    out_h = math.floor(ratio * height)
    out_w = math.floor(ratio * width)
    if out_h < MIN_SIZE or out_w < MIN_SIZE:
        raise ParameterError(f"resize ratio {ratio} yields {out_h}x{out_w}, below the {MIN_SIZE}px minimum")
    if (out_h, out_w) == (height, width):
        return img
    return F.interpolate(img, size=(out_h, out_w), mode="bilinear", align_corners=False)


def apply_post_process(img: torch.Tensor, op: PostProcessOp, jpeg_surrogate: bool = True) -> torch.Tensor:
    """Dispatch a post-processing op; jpeg_surrogate=False blocks gradients through JPEG."""
    if op.kind == "identity":
        return img
    if op.kind == "jpeg":
        from .jpeg import simplified_jpeg
        return simplified_jpeg(img, op.param, surrogate=jpeg_surrogate)
    if op.kind == "blur":
        return gaussian_blur(img, op.param)
    if op.kind == "crop":
        return crop(img, op.param)
    return resize(img, op.param)


def sample_op(family: int, rng) -> PostProcessOp:
    """Uniformly sample this family's parameter from its training grid."""
    kind = FAMILIES[family]
    grid = GRIDS[kind]
    param = grid[int(rng.integers(0, len(grid)))]
    return PostProcessOp(kind, param)


def full_grid() -> list[PostProcessOp]:
    """Every (family, parameter) point, identity first."""
    ops = []
    for kind in FAMILIES:
        for param in GRIDS[kind]:
            ops.append(PostProcessOp(kind, param))
    return ops
