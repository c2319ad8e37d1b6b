"""Image loading, saving and tensor conversion.

Canonical in-memory form for the differentiable pipeline is a torch tensor
of shape (B, 3, H, W) with float32 values in [0, 1].  On disk images are
8-bit PNG or binary PPM (P6).
"""

import os
import tempfile

import numpy as np
import torch
from PIL import Image as PILImage

MIN_SIZE = 8  # 8x8 JPEG blocking requires at least this


class ImageFormatError(ValueError):
    pass


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    """HxWx3 float array in [0,1] -> (1,3,H,W) float32 tensor."""
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 array, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)


def to_array(img: torch.Tensor) -> np.ndarray:
    """(3,H,W) or (1,3,H,W) tensor -> HxWx3 float32 array."""
    if img.dim() == 4:
        if img.shape[0] != 1:
            raise ValueError("batch dimension must be 1 for array conversion")
        img = img[0]
    return img.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)


def quantize_to_bytes(arr: np.ndarray) -> np.ndarray:
    """Clamp to [0,1] then round half-up to 8-bit."""
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Load a PNG or PPM image as HxWx3 float32 in [0,1] (byte b -> b/255)."""
    path = os.fspath(path)
    if path.lower().endswith((".ppm", ".pnm")):
        raw = _read_ppm(path)
    else:
        with PILImage.open(path) as im:
            raw = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if raw.shape[0] < MIN_SIZE or raw.shape[1] < MIN_SIZE:
        raise ImageFormatError(f"{path}: image must be at least {MIN_SIZE}x{MIN_SIZE}, got {raw.shape[0]}x{raw.shape[1]}")
    return raw.astype(np.float32) / 255.0


def save_image(path, arr: np.ndarray) -> None:
    """Save HxWx3 float array in [0,1] as 8-bit PNG or PPM, written atomically."""
    path = os.fspath(path)
    data = quantize_to_bytes(arr)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=os.path.splitext(path)[1])
    os.close(fd)
    try:
        if path.lower().endswith((".ppm", ".pnm")):
            _write_ppm(tmp, data)
        else:
            PILImage.fromarray(data, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    # header is magic, width, height, maxval separated by whitespace;
    # '#' starts a comment running to end of line
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated PPM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    n = width * height * 3
    pixels = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    if pixels.size != n:
        raise ImageFormatError(f"{path}: truncated PPM pixel data")
    return pixels.reshape(height, width, 3).copy()


def _write_ppm(path, data: np.ndarray) -> None:
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
