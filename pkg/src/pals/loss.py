"""Label smoothing, smoothed cross-entropy, mixup and the training objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import Cache, Model, add_grads, backward, forward, log_softmax

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


def smooth_label(y: int, r: float, num_classes: int) -> np.ndarray:
    if not 0.0 <= r < 1.0:
        raise ValueError(f"smoothing rate must lie in [0, 1), got {r}")
    out = np.full(num_classes, r / num_classes)
    out[y] += 1.0 - r
    return out


def smooth_labels(y: np.ndarray, r: float, num_classes: int) -> np.ndarray:
    """Row-wise :func:`smooth_label` for an integer label vector."""
    if not 0.0 <= r < 1.0:
        raise ValueError(f"smoothing rate must lie in [0, 1), got {r}")
    out = np.full((len(y), num_classes), r / num_classes)
    out[np.arange(len(y)), y] += 1.0 - r
    return out


def ls_cross_entropy(p: np.ndarray, target: np.ndarray):
    """``-sum_j target_j log p_j`` with probabilities floored at 1e-12.

    Accepts single rows or batches; batches return one loss per row.
    """
    return -(target * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=-1)


def mixup_pair(x_i: np.ndarray, x_j: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * x_i + (1.0 - alpha) * x_j


def mixup_loss(p_mix: np.ndarray, target_i: np.ndarray, target_j: np.ndarray, alpha: float):
    return alpha * ls_cross_entropy(p_mix, target_i) + (1.0 - alpha) * ls_cross_entropy(p_mix, target_j)


@dataclass(frozen=True)
class AugSpec:
    """Vector-space augmentations; scales are multiples of the per-feature std."""

    weak_sigma: float = 0.05
    strong_sigma: float = 0.2
    drop_frac: float = 0.25

    def validate(self) -> None:
        if self.weak_sigma < 0 or self.strong_sigma < 0:
            raise ValueError("augmentation noise scales must be non-negative")
        if self.weak_sigma > self.strong_sigma:
            raise ValueError("weak augmentation must not be stronger than strong augmentation")
        if not 0.0 <= self.drop_frac < 1.0:
            raise ValueError(f"drop_frac must lie in [0, 1), got {self.drop_frac}")


def augment(x: np.ndarray, kind: str, spec: AugSpec, rng: np.random.Generator,
            scale: np.ndarray | float = 1.0) -> np.ndarray:
    """Weak: additive Gaussian noise.  Strong: larger noise, then zero a random
    ``floor(drop_frac * d)`` coordinates of every row (cutout analogue)."""
    x = np.asarray(x, dtype=float)
    if kind == "weak":
        return x + spec.weak_sigma * scale * rng.standard_normal(x.shape)
    if kind != "strong":
        raise ValueError(f"unknown augmentation kind {kind!r}")
    out = x + spec.strong_sigma * scale * rng.standard_normal(x.shape)
    n_drop = int(np.floor(spec.drop_frac * x.shape[-1]))
    if n_drop:
        rows = np.atleast_2d(out)
        cols = np.argsort(rng.random(rows.shape), axis=1)[:, :n_drop]
        np.put_along_axis(rows, cols, 0.0, axis=1)
    return out


@dataclass(frozen=True)
class LossSpec:
    smoothing: float = 0.5
    zeta: float = 1.0
    mixup: bool = True
    cr: bool = True
    aug: AugSpec = AugSpec()


def _mix_term(model: Model, x: np.ndarray, targets: np.ndarray, mixup: bool, zeta: float,
              rng: np.random.Generator):
    """Mean mixup loss and its gradients for one view of the batch."""
    if mixup:
        alpha = float(rng.beta(zeta, zeta))
        perm = rng.permutation(len(x))
    else:
        alpha, perm = 1.0, np.arange(len(x))
    x_mix = mixup_pair(x, x[perm], alpha)
    # CE is linear in the target, so the two-target loss is CE against the mixed target
    t_mix = alpha * targets + (1.0 - alpha) * targets[perm]
    cache = Cache()
    _, p = forward(model, x_mix, cache)
    loss = float(-(t_mix * log_softmax(cache.logits)).sum(axis=1).mean())
    dlogits = (p - t_mix) / len(x)
    return loss, backward(model, cache, dlogits)


def final_batch_loss(model: Model, x: np.ndarray, targets: np.ndarray, spec: LossSpec,
                     rng: np.random.Generator, scale: np.ndarray | float = 1.0):
    """Batch objective and gradients.

    With consistency regularisation the loss is the mixup loss on weakly
    augmented inputs plus the mixup loss on strongly augmented inputs, each
    with its own pairing permutation and mixing coefficient.  Without it a
    single mixup term on the raw inputs is used.  ``mixup=False`` pins the
    coefficient to 1.  Returns ``(loss, grads)``, or ``(0.0, None)`` for an
    empty batch.
    """
    if len(x) == 0:
        log.debug("empty batch skipped")
        return 0.0, None
    if not spec.cr:
        return _mix_term(model, x, targets, spec.mixup, spec.zeta, rng)
    weak = augment(x, "weak", spec.aug, rng, scale)
    strong = augment(x, "strong", spec.aug, rng, scale)
    loss_w, g_w = _mix_term(model, weak, targets, spec.mixup, spec.zeta, rng)
    loss_s, g_s = _mix_term(model, strong, targets, spec.mixup, spec.zeta, rng)
    return loss_w + loss_s, add_grads(g_w, g_s)
