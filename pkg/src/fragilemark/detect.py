"""Watermark verification: bit accuracy, threshold calibration, verdicts."""

import json
from dataclasses import dataclass

import numpy as np
import torch

from . import models


def bitwise_accuracy(a, b) -> float:
    """Fraction of matching bits between two equal-length bit vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float((a == b).mean())


def bitwise_accuracy_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise bit accuracy for (B, n) bit tensors."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a == b).float().mean(dim=1)


class CalibrationError(ValueError):
    pass


def calibrate_threshold(neg_bitaccs, fpr_budget: float = 0.01) -> float:
    """Largest threshold keeping FPR within budget on the negatives.

    An image is flagged fake when its bit accuracy is strictly below the
    threshold, so candidates are the observed values plus 1.0 and the
    feasible set is never empty (the minimum observed value flags nothing).
    """
    accs = np.asarray(list(neg_bitaccs), dtype=np.float64)
    if accs.size == 0:
        raise CalibrationError("cannot calibrate a threshold from zero negative examples")
    if accs.min() < 0 or accs.max() > 1:
        raise CalibrationError("bit accuracies must lie in [0, 1]")
    candidates = np.unique(np.append(accs, 1.0))
    best = None
    for tau in candidates:
        fpr = float((accs < tau).mean())
        if fpr <= fpr_budget:
            best = float(tau)
    return best


@dataclass
class DetectionProfile:
    identity: str
    ground_truth: np.ndarray  # bit vector
    threshold: float
    config_hash: str = ""
    fpr_budget: float = 0.01

    def to_dict(self) -> dict:
        return {"identity": self.identity,
                "watermark": "".join(str(int(b)) for b in self.ground_truth),
                "threshold": self.threshold,
                "config_hash": self.config_hash,
                "fpr_budget": self.fpr_budget}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionProfile":
        bits = np.array([int(c) for c in d["watermark"]], dtype=np.float64)
        return cls(d["identity"], bits, float(d["threshold"]), d.get("config_hash", ""),
                   float(d.get("fpr_budget", 0.01)))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DetectionProfile":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def detect(img: torch.Tensor, profile: DetectionProfile, bundle: models.ModelBundle):
    """Verdict for one image: ('fake'|'real', bit accuracy vs ground truth)."""
    logits = bundle.decode(img)
    bits = models.harden(logits)[0].numpy()
    acc = bitwise_accuracy(bits, profile.ground_truth)
    return ("fake" if acc < profile.threshold else "real"), acc


@dataclass
class MetricsReport:
    acc: float
    fpr: float
    fnr: float
    n_positive: int
    n_negative: int

    def to_dict(self) -> dict:
        return {"acc": self.acc, "fpr": self.fpr, "fnr": self.fnr,
                "n_positive": self.n_positive, "n_negative": self.n_negative}


def compute_metrics(verdicts, labels, rng=None) -> MetricsReport:
    """ACC/FPR/FNR from verdicts ('fake'/'real') and labels (1=fake, 0=real).

    ACC is computed on a class-balanced subsample (majority class randomly
    reduced to the minority size with the given rng) to avoid imbalance bias.
    """
    pred_fake = np.array([v == "fake" for v in verdicts], dtype=bool)
    is_fake = np.asarray(labels, dtype=bool)
    if pred_fake.shape != is_fake.shape:
        raise ValueError("verdicts and labels differ in length")
    pos = np.where(is_fake)[0]
    neg = np.where(~is_fake)[0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both classes are required to compute balanced accuracy")
    fpr = float(pred_fake[neg].mean())
    fnr = float((~pred_fake[pos]).mean())

    rng = rng or np.random.default_rng(0)
    m = min(len(pos), len(neg))
    pos_s = pos if len(pos) == m else rng.choice(pos, m, replace=False)
    neg_s = neg if len(neg) == m else rng.choice(neg, m, replace=False)
    correct = pred_fake[pos_s].sum() + (~pred_fake[neg_s]).sum()
    acc = float(correct / (2 * m))
    return MetricsReport(acc, fpr, fnr, len(pos), len(neg))
