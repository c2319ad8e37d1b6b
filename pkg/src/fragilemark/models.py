"""Encoder, decoder and discriminator networks plus watermark helpers.

The encoder turns (image, 30-bit watermark) into a watermarked image of the
same size.  The decoder maps an image of any size (>= 8x8) to 30 logits via
global average pooling.  The discriminator scores the probability that an
image carries no watermark.
"""

import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

WATERMARK_LEN = 30

HARDEN_THRESHOLD = 0.5


def random_watermark(rng, n_bits: int = WATERMARK_LEN, batch: int | None = None) -> torch.Tensor:
    """Uniform {0,1} bits as a float tensor, (n_bits,) or (batch, n_bits)."""
    shape = (n_bits,) if batch is None else (batch, n_bits)
    return torch.from_numpy(rng.integers(0, 2, shape).astype(np.float32))


def harden(logits: torch.Tensor) -> torch.Tensor:
    """Decoded logits -> bits: 1 where value >= 0.5 (inclusive), else 0."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite watermark logits")
    return (logits >= HARDEN_THRESHOLD).to(logits.dtype)


def _conv_block(c_in, c_out, with_bn=True):
    layers = [nn.Conv2d(c_in, c_out, kernel_size=3, stride=1, padding=1)]
    if with_bn:
        layers.append(nn.BatchNorm2d(c_out))
    layers.append(nn.ReLU())
    return layers


class Encoder(nn.Module):
    """Six conv layers; layer 5 consumes [features(64), watermark(30), image(3)] = 97 channels."""

    def __init__(self, n_bits: int = WATERMARK_LEN):
        super().__init__()
        self.n_bits = n_bits
        self.features = nn.Sequential(
            *_conv_block(3, 64), *_conv_block(64, 64), *_conv_block(64, 64), *_conv_block(64, 64))
        self.merge = nn.Sequential(*_conv_block(64 + n_bits + 3, 64))
        self.head = nn.Conv2d(64, 3, kernel_size=1, stride=1, padding=0)

    def forward(self, img: torch.Tensor, watermark: torch.Tensor) -> torch.Tensor:
        if watermark.dim() == 1:
            watermark = watermark.unsqueeze(0)
        if watermark.shape[-1] != self.n_bits:
            raise ValueError(f"watermark length {watermark.shape[-1]}, expected {self.n_bits}")
        if watermark.shape[0] != img.shape[0]:
            raise ValueError("batch size mismatch between image and watermark")
        h, w = img.shape[-2:]
        feats = self.features(img)
        wmap = watermark[:, :, None, None].expand(-1, -1, h, w)
        merged = self.merge(torch.cat([feats, wmap, img], dim=1))
        return self.head(merged)


class Decoder(nn.Module):
    """Eight conv layers, GAP, then a 30->30 fully-connected head with no activation."""

    def __init__(self, n_bits: int = WATERMARK_LEN):
        super().__init__()
        self.n_bits = n_bits
        blocks = _conv_block(3, 64)
        for _ in range(6):
            blocks += _conv_block(64, 64)
        blocks += _conv_block(64, n_bits)
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(n_bits, n_bits)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.features(img)).flatten(1)
        return self.fc(x)


class Discriminator(nn.Module):
    """Three conv layers, GAP, FC to a single logit."""

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(*_conv_block(3, 64), *_conv_block(64, 64), *_conv_block(64, 64))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(64, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.features(img)).flatten(1)
        return self.fc(x)


def discriminate(model: Discriminator, img: torch.Tensor) -> torch.Tensor:
    """Probability in (0,1) that img is non-watermarked (logistic on the logit)."""
    return torch.sigmoid(model(img)).squeeze(-1)


# expected (conv_in, conv_out, kernel, with_bn) rows, in forward order
_ENCODER_LAYOUT = [(3, 64, 3, True), (64, 64, 3, True), (64, 64, 3, True), (64, 64, 3, True),
                   (97, 64, 3, True), (64, 3, 1, False)]
_DECODER_LAYOUT = [(3, 64, 3, True)] + [(64, 64, 3, True)] * 6 + [(64, 30, 3, True)]
_DISCRIMINATOR_LAYOUT = [(3, 64, 3, True), (64, 64, 3, True), (64, 64, 3, True)]


def _conv_layout(module: nn.Module):
    rows = []
    mods = list(module.modules())
    for i, m in enumerate(mods):
        if isinstance(m, nn.Conv2d):
            with_bn = i + 1 < len(mods) and isinstance(mods[i + 1], nn.BatchNorm2d)
            rows.append((m.in_channels, m.out_channels, m.kernel_size[0], with_bn))
    return rows


def check_architecture(bundle: "ModelBundle") -> None:
    """Assert conv channel counts, kernel sizes and BN placement match the reference layout."""
    for model, layout, name in ((bundle.encoder, _ENCODER_LAYOUT, "encoder"),
                                (bundle.decoder, _DECODER_LAYOUT, "decoder"),
                                (bundle.discriminator, _DISCRIMINATOR_LAYOUT, "discriminator")):
        got = _conv_layout(model)
        if got != layout:
            raise AssertionError(f"{name} architecture drifted: {got} != {layout}")
    if bundle.decoder.fc.in_features != bundle.decoder.n_bits or bundle.decoder.fc.out_features != bundle.decoder.n_bits:
        raise AssertionError("decoder FC head must be n_bits -> n_bits")
    if bundle.discriminator.fc.out_features != 1:
        raise AssertionError("discriminator FC head must output a single logit")


@dataclass
class ModelBundle:
    encoder: Encoder
    decoder: Decoder
    discriminator: Discriminator
    config_hash: str = ""

    def train(self):
        for m in (self.encoder, self.decoder, self.discriminator):
            m.train()

    def eval(self):
        for m in (self.encoder, self.decoder, self.discriminator):
            m.eval()

    def encode(self, img: torch.Tensor, watermark: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        """Inference-path embedding: eval mode, no grad, clamped to [0,1]."""
        self.encoder.eval()
        with torch.no_grad():
            out = self.encoder(img, watermark)
        return out.clamp(0, 1) if clamp else out

    def decode(self, img: torch.Tensor) -> torch.Tensor:
        self.decoder.eval()
        with torch.no_grad():
            return self.decoder(img)


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            else:
                fan_in = m.in_features
            bound = math.sqrt(1.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
                m.running_mean.zero_()
                m.running_var.fill_(1.0)


def init_bundle(seed: int, n_bits: int = WATERMARK_LEN, config_hash: str = "") -> ModelBundle:
    """Fresh networks with seeded uniform(+-sqrt(1/fan_in)) kernels and zero biases."""
    gen = torch.Generator().manual_seed(seed)
    bundle = ModelBundle(Encoder(n_bits), Decoder(n_bits), Discriminator(), config_hash)
    for model in (bundle.encoder, bundle.decoder, bundle.discriminator):
        _init_module(model, gen)
    check_architecture(bundle)
    return bundle


CHECKPOINT_MAGIC = b"WMCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, bundle: ModelBundle, extra: dict | None = None) -> None:
    """Versioned container: JSON manifest (names, shapes, dtypes) + raw LE float32 data."""
    arrays = []
    blobs = []
    for prefix, model in (("encoder", bundle.encoder), ("decoder", bundle.decoder),
                          ("discriminator", bundle.discriminator)):
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().cpu().to(torch.float32).numpy()
            arrays.append({"name": f"{prefix}.{name}", "shape": list(arr.shape), "dtype": "float32"})
            blobs.append(arr.astype("<f4").tobytes())
    manifest = {
        "config_hash": bundle.config_hash,
        "n_bits": bundle.decoder.n_bits,
        "arrays": arrays,
        "extra": extra or {},
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.fspath(path)) or ".")
    os.close(fd)
    try:
        with open(tmp, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(payload)))
            f.write(payload)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    """Rebuild a bundle; array shape mismatches against the architecture are rejected."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint")
    version, manifest_len = struct.unpack_from("<IQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 4 + 12
    manifest = json.loads(data[offset:offset + manifest_len].decode("utf-8"))
    offset += manifest_len

    bundle = ModelBundle(Encoder(manifest["n_bits"]), Decoder(manifest["n_bits"]), Discriminator(),
                         manifest.get("config_hash", ""))
    states = {"encoder": {}, "decoder": {}, "discriminator": {}}
    reference = {prefix: getattr(bundle, prefix).state_dict()
                 for prefix in ("encoder", "decoder", "discriminator")}
    for entry in manifest["arrays"]:
        prefix, _, name = entry["name"].partition(".")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        offset += count * 4
        if prefix not in reference or name not in reference[prefix]:
            raise ValueError(f"unknown array {entry['name']} in checkpoint")
        ref = reference[prefix][name]
        if list(ref.shape) != entry["shape"]:
            raise ValueError(f"shape mismatch for {entry['name']}: checkpoint {entry['shape']}, model {list(ref.shape)}")
        states[prefix][name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    for prefix in states:
        getattr(bundle, prefix).load_state_dict(states[prefix])
    check_architecture(bundle)
    return bundle, manifest.get("extra", {})


def checkpoint_digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
