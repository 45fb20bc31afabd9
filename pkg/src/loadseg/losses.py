"""Pixel-wise CE, the adversarial BCE terms and the hybrid generator objective.

Every function returns a :class:`LossValue` whose ``total`` is a graph node,
so callers can backpropagate through it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

SCORE_CLAMP = 1e-7


@dataclass
class LossValue:
    total: Tensor
    pixel: float | None = None
    adversarial: float | None = None
    lam: float | None = None

    @property
    def value(self) -> float:
        return self.total.item()


def _scores(scores) -> Tensor:
    t = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    if np.any(t.data <= 0) or np.any(t.data >= 1):
        raise ContractError("discriminator scores must lie strictly inside (0, 1)")
    return ad.clip(t, SCORE_CLAMP, 1 - SCORE_CLAMP)


def pixel_ce(logits, target: np.ndarray, ignore_index: int | None = None, pixel_weights=None) -> LossValue:
    """Mean over non-ignored pixels of ``-log softmax(logits)[true class]``.

    ``pixel_weights`` (same shape as ``target``) scales each pixel's term;
    the class-weighted stage-1 loss uses it.
    """
    z = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits, dtype=np.float64))
    target = np.asarray(target)
    k = z.shape[-1]
    if z.shape[:-1] != target.shape:
        raise ContractError(f"logits {z.shape} do not match target {target.shape}")
    valid = np.ones(target.shape, dtype=bool) if ignore_index is None else target != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ContractError("every pixel is ignored; cross entropy is undefined")
    if int(target[valid].max()) >= k or int(target[valid].min()) < 0:
        raise ContractError(f"target class out of range for K={k}")
    safe = np.where(valid, target, 0)
    mask = np.eye(k, dtype=z.dtype)[safe] * valid[..., None]
    if pixel_weights is not None:
        mask = mask * np.asarray(pixel_weights, dtype=z.dtype)[..., None]
    # pick each pixel's term first (the other K-1 products are exact zeros),
    # then reduce over pixels, so the sum runs over one value per pixel
    per_pixel = ad.tsum(ad.mul(ad.log_softmax(z, axis=-1), mask), axis=-1)
    nll = ad.neg(ad.tsum(per_pixel))
    total = ad.mul(nll, z.dtype.type(1.0 / count))
    return LossValue(total, pixel=total.item())


def discriminator_loss(real_scores, fake_scores, fake_weight: float) -> LossValue:
    """``-[sum log s_real + fake_weight * sum log(1 - s_fake)]``, minimized by D."""
    if not fake_weight > 0:
        raise ContractError(f"fake_weight must be positive, got {fake_weight}")
    parts = []
    if real_scores is not None and np.size(_data(real_scores)):
        parts.append(ad.tsum(ad.log(_scores(real_scores))))
    if fake_scores is not None and np.size(_data(fake_scores)):
        fake = _scores(fake_scores)
        parts.append(ad.mul(ad.tsum(ad.log(ad.sub(1.0, fake))), fake.dtype.type(fake_weight)))
    if not parts:
        raise ContractError("discriminator loss needs at least one score")
    total = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    total = ad.neg(total)
    return LossValue(total, adversarial=total.item())


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def generator_adversarial_term(fake_scores) -> LossValue:
    """Non-saturating generator term ``-sum log s``."""
    total = ad.neg(ad.tsum(ad.log(_scores(fake_scores))))
    return LossValue(total, adversarial=total.item())


def hybrid_generator_loss(logits, target, fake_scores, lam: float, ignore_index: int | None = None) -> LossValue:
    if lam < 0:
        raise ContractError(f"lambda must be nonnegative, got {lam}")
    pix = pixel_ce(logits, target, ignore_index)
    if lam == 0:
        # keep the graph identical to plain CE so gradients match bit for bit
        return LossValue(pix.total, pixel=pix.pixel, adversarial=None, lam=0.0)
    adv = generator_adversarial_term(fake_scores)
    total = ad.add(pix.total, ad.mul(adv.total, adv.total.dtype.type(lam)))
    return LossValue(total, pixel=pix.pixel, adversarial=adv.adversarial, lam=lam)
