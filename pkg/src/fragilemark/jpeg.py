"""Simplified differentiable JPEG compression.

Pipeline: scale to [0,255] -> RGB->YCbCr -> 8x8 blocking with -128 level
shift -> orthonormal DCT -> divide by the scaled quantization table (luma
for Y, chroma for Cb/Cr, no subsampling) -> quantize-dequantize -> multiply
back -> inverse DCT -> +128 -> YCbCr->RGB -> [0,1].

Everything is linear or affine except the quantize-dequantize step, whose
true derivative is zero almost everywhere.  The backward pass instead
reports k = g(x)/x, the ratio of the rounded output to the input, treated
as a constant (k=0 at x=0).  Entropy coding and the steps between
quantization and dequantization cancel exactly and are omitted.
"""

import math
import struct

import torch
import torch.nn.functional as F

from .postproc import ParameterError

# JPEG Annex-K reference quantization tables
BASE_LUMA = torch.tensor([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=torch.float32)

BASE_CHROMA = torch.tensor([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=torch.float32)


def scale_quant_table(base: torch.Tensor, quality: int) -> torch.Tensor:
    """libjpeg quality scaling: entries clamp to [1, 255] so division is always defined."""
    if not isinstance(quality, int) or not 1 <= quality <= 100:
        raise ParameterError(f"quality must be an integer in [1, 100], got {quality!r}")
    s = 5000 / quality if quality < 50 else 200 - 2 * quality
    return torch.clamp(torch.floor((base * s + 50) / 100), 1, 255)


def rgb_to_ycbcr(img: torch.Tensor) -> torch.Tensor:
    """Full-range BT.601 transform, input/output in the [0,255] domain."""
    r, g, b = img[:, 0], img[:, 1], img[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return torch.stack([y, cb, cr], dim=1)


def ycbcr_to_rgb(img: torch.Tensor) -> torch.Tensor:
    y, cb, cr = img[:, 0], img[:, 1] - 128.0, img[:, 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1)


def _dct_matrix(dtype=torch.float32) -> torch.Tensor:
    k = torch.arange(8, dtype=torch.float64)
    c = torch.cos(math.pi * (2 * k[None, :] + 1) * k[:, None] / 16) * math.sqrt(2 / 8)
    c[0, :] = math.sqrt(1 / 8)
    return c.to(dtype)


def dct8x8(block: torch.Tensor) -> torch.Tensor:
    """Orthonormal 2-D DCT-II of (..., 8, 8) blocks."""
    c = _dct_matrix(block.dtype)
    return c @ block @ c.T


def idct8x8(coef: torch.Tensor) -> torch.Tensor:
    c = _dct_matrix(coef.dtype)
    return c.T @ coef @ c


class _QuantDequant(torch.autograd.Function):
    """Round-half-up with ratio gradient.

    Forward: g(x) = x - x%1 if x%1 < 0.5 else x + 1 - x%1, where
    x%1 = x - floor(x). Backward reports k = g(x)/x (0 at x = 0) instead
    of the true derivative, which is zero almost everywhere.
    """

    @staticmethod
    def forward(ctx, x):
        frac = x - torch.floor(x)
        g = torch.where(frac < 0.5, x - frac, x + 1 - frac)
        ctx.save_for_backward(x, g)
        return g

    @staticmethod
    def backward(ctx, grad_output):
        x, g = ctx.saved_tensors
        k = torch.where(x == 0, torch.zeros_like(x), g / x)
        return grad_output * k


def quant_dequant(x: torch.Tensor) -> torch.Tensor:
    """Quantize-dequantize a tensor of table-normalized DCT coefficients."""
    return _QuantDequant.apply(x)


def quant_dequant_gradient(x: torch.Tensor) -> torch.Tensor:
    """The surrogate gradient k reported by quant_dequant's backward pass."""
    frac = x - torch.floor(x)
    g = torch.where(frac < 0.5, x - frac, x + 1 - frac)
    return torch.where(x == 0, torch.zeros_like(x), g / x)


def _to_blocks(channel: torch.Tensor) -> torch.Tensor:
    b, h, w = channel.shape
    return channel.reshape(b, h // 8, 8, w // 8, 8).permute(0, 1, 3, 2, 4)


def _from_blocks(blocks: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b = blocks.shape[0]
    return blocks.permute(0, 1, 3, 2, 4).reshape(b, h, w)


def _coefficient_path(img: torch.Tensor, quality: int, surrogate: bool):
    """Shared forward up to the quantize-dequantize step.

    Returns (ycc padded dims, per-channel (scaled coeffs x, rounded g, table)).
    """
    b, c, h, w = img.shape
    if c != 3:
        raise ValueError(f"expected 3 channels, got {c}")
    pad_h = (-h) % 8
    pad_w = (-w) % 8
    x = img * 255.0
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    ycc = rgb_to_ycbcr(x) - 128.0
    tables = (scale_quant_table(BASE_LUMA, quality), scale_quant_table(BASE_CHROMA, quality))
    per_channel = []
    for ci in range(3):
        table = tables[0] if ci == 0 else tables[1]
        table = table.to(img.dtype)
        coef = dct8x8(_to_blocks(ycc[:, ci]))
        scaled = coef / table
        if surrogate:
            rounded = quant_dequant(scaled)
        else:
            # zero-gradient codec: same forward values, detached like real JPEG
            rounded = torch.floor(scaled.detach() + 0.5)
        per_channel.append((scaled, rounded, table))
    return (h + pad_h, w + pad_w), per_channel


def simplified_jpeg(img: torch.Tensor, quality: int, surrogate: bool = True) -> torch.Tensor:
    """Compress-decompress a (B,3,H,W) tensor in [0,1] at the given quality.

    Non-multiple-of-8 sizes are edge-replicated to the next multiple and
    cropped back.  With surrogate=False the result carries no gradient
    through the rounding, mimicking the true codec.
    """
    b, c, h, w = img.shape
    (ph, pw), per_channel = _coefficient_path(img, quality, surrogate)
    channels = []
    for scaled, rounded, table in per_channel:
        channels.append(_from_blocks(idct8x8(rounded * table), ph, pw))
    ycc = torch.stack(channels, dim=1) + 128.0
    out = ycbcr_to_rgb(ycc) / 255.0
    return out[..., :h, :w]


DUMP_MAGIC = b"CDMP"
DUMP_VERSION = 1


def dump_coefficients(img: torch.Tensor, quality: int, path) -> None:
    """Write the per-block coefficient arrays around the quantization step.

    Binary layout, all little-endian:
      bytes 0..3   magic "CDMP"
      u32          version (1)
      u32          padded height, u32 padded width
      u32          quality
      u32          channels (3), u32 block rows, u32 block cols
    then for each channel (Y, Cb, Cr), for each block in row-major order:
      64 f32       coefficients after division by the quantization table
      64 f32       the same coefficients after quantize-dequantize
    """
    if img.shape[0] != 1:
        raise ValueError("coefficient dump expects a single image (batch of 1)")
    with torch.no_grad():
        (ph, pw), per_channel = _coefficient_path(img, quality, surrogate=True)
    header = DUMP_MAGIC + struct.pack("<7I", DUMP_VERSION, ph, pw, quality, 3, ph // 8, pw // 8)
    with open(path, "wb") as f:
        f.write(header)
        for scaled, rounded, _ in per_channel:
            pre = scaled[0].reshape(-1, 64).to(torch.float32)
            post = rounded[0].reshape(-1, 64).to(torch.float32)
            interleaved = torch.cat([pre, post], dim=1)
            f.write(interleaved.numpy().astype("<f4").tobytes())


def read_coefficient_dump(path):
    """Parse a dump written by dump_coefficients.

    Returns (meta dict, pre array, post array), arrays shaped
    (channels, blocks_y, blocks_x, 8, 8).
    """
    import numpy as np

    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != DUMP_MAGIC:
        raise ValueError("not a coefficient dump")
    version, ph, pw, quality, channels, by, bx = struct.unpack_from("<7I", data, 4)
    if version != DUMP_VERSION:
        raise ValueError(f"unsupported dump version {version}")
    body = np.frombuffer(data, dtype="<f4", offset=4 + 28)
    per_block = body.reshape(channels, by * bx, 128)
    pre = per_block[:, :, :64].reshape(channels, by, bx, 8, 8)
    post = per_block[:, :, 64:].reshape(channels, by, bx, 8, 8)
    meta = {"height": ph, "width": pw, "quality": quality, "channels": channels}
    return meta, pre, post
