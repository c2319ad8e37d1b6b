"""Joint training of encoder, decoder and discriminator.

Each step encodes a batch with fresh random watermarks, pushes the result
through one scheduled post-processing operation, decodes, and takes one
optimizer step on the encoder/decoder followed by one on the
discriminator.  The batch's mean bitwise accuracy feeds the scheduler.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import models
from .detect import bitwise_accuracy_batch
from .postproc import FAMILIES, PostProcessOp, apply_post_process, full_grid, sample_op
from .scheduler import SchedulerConfig, make_scheduler, write_trace


@dataclass
class TrainingConfig:
    epochs: int = 40000
    batch_size: int = 30
    watermark_len: int = 30
    lr_initial: float = 0.001
    lambda1: float = 0.7
    lambda2: float = 0.001
    scheduler: str = "rl"            # rl | random
    jpeg_gradient: str = "surrogate"  # surrogate | zero
    seed: int = 0
    image_size: int = 64
    val_every: int = 0               # epochs between validation scans; 0 = only at the end
    val_max_images: int = 12

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.scheduler not in ("rl", "random"):
            raise ValueError(f"scheduler must be 'rl' or 'random', got {self.scheduler!r}")
        if self.jpeg_gradient not in ("surrogate", "zero"):
            raise ValueError(f"jpeg_gradient must be 'surrogate' or 'zero', got {self.jpeg_gradient!r}")


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(train_cfg: TrainingConfig, sched_cfg: SchedulerConfig) -> str:
    """Stable digest of the run configuration, stamped into every artifact."""
    blob = json.dumps({"training": config_to_dict(train_cfg), "scheduler": config_to_dict(sched_cfg)},
                      sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class LossBreakdown:
    reconstruction: float
    pixel: float
    adversarial: float
    total: float
    discriminator: float = 0.0


_PROB_EPS = 1e-7


def loss_encdec(img, img_w, bits, logits, d_prob, lambda1, lambda2):
    """Watermark reconstruction + weighted pixel and adversarial terms.

    Returns (total tensor, LossBreakdown of detached floats).
    """
    recon = ((logits - bits) ** 2).mean()
    pixel = ((img_w - img) ** 2).mean()
    adv = torch.log(1 - d_prob.clamp(_PROB_EPS, 1 - _PROB_EPS)).mean()
    total = recon + lambda1 * pixel + lambda2 * adv
    breakdown = LossBreakdown(float(recon), float(pixel), float(adv), float(total))
    return total, breakdown


def loss_discriminator(d_real, d_wm):
    """Mean of log(1 - D(real)) + log(D(watermarked)); low when D separates them."""
    d_real = d_real.clamp(_PROB_EPS, 1 - _PROB_EPS)
    d_wm = d_wm.clamp(_PROB_EPS, 1 - _PROB_EPS)
    return (torch.log(1 - d_real) + torch.log(d_wm)).mean()


def lr_at(step: int, total_steps: int, lr_initial: float) -> float:
    """Cosine annealing from the initial rate to zero."""
    if total_steps <= 0:
        return lr_initial
    return lr_initial * 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))


class Trainer:
    def __init__(self, cfg: TrainingConfig, sched_cfg: SchedulerConfig | None = None):
        self.cfg = cfg
        self.sched_cfg = sched_cfg or SchedulerConfig()
        self.hash = config_hash(cfg, self.sched_cfg)
        self.rng = np.random.default_rng(cfg.seed)
        torch.manual_seed(cfg.seed)
        self.bundle = models.init_bundle(cfg.seed, cfg.watermark_len, self.hash)
        self.scheduler = make_scheduler(cfg.scheduler, self.sched_cfg, self.rng)
        self.opt_enc = torch.optim.Adam(self.bundle.encoder.parameters(), lr=cfg.lr_initial,
                                        betas=(0.9, 0.999), eps=1e-8)
        self.opt_dec = torch.optim.Adam(self.bundle.decoder.parameters(), lr=cfg.lr_initial,
                                        betas=(0.9, 0.999), eps=1e-8)
        self.opt_disc = torch.optim.Adam(self.bundle.discriminator.parameters(), lr=cfg.lr_initial,
                                         betas=(0.9, 0.999), eps=1e-8)
        self.global_step = 0
        self.total_steps = 0

    def _set_lr(self, lr: float):
        for opt in (self.opt_enc, self.opt_dec, self.opt_disc):
            for group in opt.param_groups:
                group["lr"] = lr

    def train_step(self, batch_imgs: torch.Tensor, op: PostProcessOp | None = None):
        """One optimization step; returns (LossBreakdown, f_t, op, watermarks).

        If op is None the scheduler picks the family and the parameter is
        sampled uniformly from the family's training grid.
        """
        cfg = self.cfg
        self.bundle.train()
        if op is None:
            family = self.scheduler.choose(self.rng)
            op = sample_op(family, self.rng)
        bits = models.random_watermark(self.rng, cfg.watermark_len, batch_imgs.shape[0])

        surrogate = cfg.jpeg_gradient == "surrogate"
        freeze_encoder = op.kind == "jpeg" and not surrogate

        self.opt_enc.zero_grad(set_to_none=True)
        self.opt_dec.zero_grad(set_to_none=True)
        img_w = self.bundle.encoder(batch_imgs, bits)
        img_p = apply_post_process(img_w, op, jpeg_surrogate=surrogate)
        logits = self.bundle.decoder(img_p)
        d_prob = models.discriminate(self.bundle.discriminator, img_w)
        total, breakdown = loss_encdec(batch_imgs, img_w, bits, logits, d_prob,
                                       cfg.lambda1, cfg.lambda2)
        if not torch.isfinite(total):
            raise FloatingPointError(
                f"non-finite loss at step {self.global_step}: {breakdown} (op {op.label()})")
        total.backward()
        if not freeze_encoder:
            self.opt_enc.step()
        self.opt_dec.step()

        self.opt_disc.zero_grad(set_to_none=True)
        d_real = models.discriminate(self.bundle.discriminator, batch_imgs)
        d_fake = models.discriminate(self.bundle.discriminator, img_w.detach())
        d_loss = loss_discriminator(d_real, d_fake)
        d_loss.backward()
        self.opt_disc.step()
        breakdown.discriminator = float(d_loss)

        with torch.no_grad():
            f_t = float(bitwise_accuracy_batch(models.harden(logits), bits).mean())
        self.global_step += 1
        return breakdown, f_t, op, bits

    def validation_score(self, val_imgs: torch.Tensor) -> float:
        """Mean bitwise accuracy over the whole post-processing grid."""
        cfg = self.cfg
        n = min(val_imgs.shape[0], cfg.val_max_images)
        imgs = val_imgs[:n]
        self.bundle.eval()
        bits = models.random_watermark(np.random.default_rng(cfg.seed), cfg.watermark_len, n)
        with torch.no_grad():
            img_w = self.bundle.encoder(imgs, bits).clamp(0, 1)
            accs = []
            for op in full_grid():
                img_p = apply_post_process(img_w, op, jpeg_surrogate=False)
                logits = self.bundle.decoder(img_p)
                accs.append(float(bitwise_accuracy_batch(models.harden(logits), bits).mean()))
        self.bundle.train()
        return float(np.mean(accs))


def train(train_imgs: torch.Tensor, cfg: TrainingConfig,
          sched_cfg: SchedulerConfig | None = None,
          val_imgs: torch.Tensor | None = None,
          log_fh=None, trace_fh=None, progress=None):
    """Run the full loop; returns (bundle, list of log records).

    train_imgs: (N,3,H,W) tensor. A partial final batch per epoch is kept.
    Best-on-validation parameters are restored at the end when val_imgs is
    given, scored by mean grid bitwise accuracy.
    """
    if train_imgs.shape[0] < 1:
        raise ValueError("empty training set")
    trainer = Trainer(cfg, sched_cfg)
    n = train_imgs.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    trainer.total_steps = cfg.epochs * steps_per_epoch
    log = []
    best = (-1.0, None, -1)

    for epoch in range(cfg.epochs):
        trainer.scheduler.set_epoch(epoch)
        order = trainer.rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lr = lr_at(trainer.global_step, trainer.total_steps, cfg.lr_initial)
            trainer._set_lr(lr)
            breakdown, f_t, op, _ = trainer.train_step(train_imgs[idx])
            record = trainer.scheduler.observe(f_t, trainer.rng)
            if trace_fh is not None:
                write_trace(trace_fh, record)
            entry = {"step": trainer.global_step, "epoch": epoch, "lr": round(lr, 8),
                     "op": op.label(), "f_t": round(f_t, 4),
                     "loss": round(breakdown.total, 6),
                     "recon": round(breakdown.reconstruction, 6),
                     "pixel": round(breakdown.pixel, 6),
                     "adv": round(breakdown.adversarial, 6),
                     "disc": round(breakdown.discriminator, 6),
                     "epsilon": record.get("epsilon")}
            log.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
        if progress is not None:
            progress(epoch, log[-1])
        if val_imgs is not None and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
            score = trainer.validation_score(val_imgs)
            if score > best[0]:
                best = (score, _snapshot(trainer.bundle), epoch)

    if val_imgs is not None:
        score = trainer.validation_score(val_imgs)
        if score > best[0]:
            best = (score, _snapshot(trainer.bundle), epoch)
        if best[1] is not None:
            _restore(trainer.bundle, best[1])
    trainer.bundle.eval()
    return trainer.bundle, log


def _snapshot(bundle: models.ModelBundle):
    return {name: {k: v.detach().clone() for k, v in getattr(bundle, name).state_dict().items()}
            for name in ("encoder", "decoder", "discriminator")}


def _restore(bundle: models.ModelBundle, snap):
    for name, state in snap.items():
        getattr(bundle, name).load_state_dict(state)
