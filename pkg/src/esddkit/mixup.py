"""Mixup on normalised log-spectrogram batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchTooSmall, LabelNotSimplex


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.5
    apply_probability: float = 0.8
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("mixup alpha must be positive")
        if not 0 <= self.apply_probability <= 1:
            raise ValueError("apply_probability must lie in [0, 1]")


def partner_indices(b: int, rng: np.random.Generator) -> np.ndarray:
    """A random cyclic derangement: nobody is paired with itself."""
    order = rng.permutation(b)
    partner = np.empty(b, dtype=np.int64)
    partner[order] = np.roll(order, -1)
    return partner


def mixup_batch(batch: np.ndarray, labels: np.ndarray, cfg: MixupConfig, rng: np.random.Generator,
                lam: float | None = None):
    """Return ``(mixed_batch, mixed_labels, lam)``.

    ``lam`` may be forced (e.g. for tests); otherwise it is drawn from
    Beta(alpha, alpha). Disabled configs and failed apply-probability draws
    hand back the inputs untouched with ``lam == 1``.
    """
    if batch.shape[0] < 2:
        raise BatchTooSmall("mixup needs at least two examples")
    if np.any(labels < 0) or np.any(np.abs(labels.sum(axis=1) - 1.0) > 1e-6):
        raise LabelNotSimplex("mixup labels must be probability rows")
    if not cfg.enabled:
        return batch, labels, 1.0
    if lam is None:
        if rng.random() >= cfg.apply_probability:
            return batch, labels, 1.0
        lam = float(rng.beta(cfg.alpha, cfg.alpha))
    if lam == 1.0:
        return batch, labels, 1.0
    j = partner_indices(batch.shape[0], rng)
    mixed = lam * batch + (1.0 - lam) * batch[j]
    mixed_labels = lam * labels + (1.0 - lam) * labels[j]
    return mixed, mixed_labels, lam
