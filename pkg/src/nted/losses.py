"""Training and appearance-editing losses.

Images are (..., H, W, 3) arrays or Vars. All L1 terms are per-element means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc
from .kernel import FeatureMap, nted_warp, region_texture_usage


@dataclass
class LossWeights:
    attn: float = 15.0
    rec: float = 2.0
    # face and adversarial terms have no counterpart at desk scale
    face: float = 0.0
    adv: float = 0.0
    regu: float = 1.0
    r1: float = 3e5
    r2: float = 9e5

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")
        if self.face != 0 or self.adv != 0:
            raise ValueError("face and adversarial losses are not available; their weights must be 0")


def _as_batched(img) -> ad.Var:
    img = ad.as_var(img)
    if img.value.ndim == 3:
        img = ad.reshape(img, (1,) + img.shape)
    return img


def l1_mean(a, b) -> ad.Var:
    return ad.mean(ad.absolute(ad.sub(a, b)))


def downsample_image(img: np.ndarray, size: int) -> np.ndarray:
    """Block-average (..., H, W, C) down to (..., size, size, C)."""
    img = np.asarray(img)
    *lead, H, W, C = img.shape
    fy, fx = H // size, W // size
    if fy * size != H or fx * size != W:
        raise tc.DimensionError("downsample_image", img.shape, (size, size))
    return img.reshape(*lead, size, fy, size, fx, C).mean(axis=(-4, -2))


def downsample_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Average-pool a binary (H, W) mask to (size, size) and binarise at 0.5."""
    m = downsample_image(np.asarray(mask, dtype=np.float64)[..., None], size)[..., 0]
    return (m > 0.5).astype(np.float64)


def attn_reconstruction(targets_by_layer, references_by_layer, correlations_by_layer) -> ad.Var:
    """Sum over layers of mean |I_t - W(I_r, c_d^T c_e)| at each layer's size.

    ``targets_by_layer``/``references_by_layer`` hold (B, h, w, 3) images and
    ``correlations_by_layer`` holds ``(c_e, c_d)`` pairs of shape (B, k, h*w).
    The warp is applied in factored form.
    """
    if not (len(targets_by_layer) == len(references_by_layer) == len(correlations_by_layer)):
        raise ValueError("attn_reconstruction: layer count mismatch")
    loss = None
    for tgt, ref, (c_e, c_d) in zip(targets_by_layer, references_by_layer, correlations_by_layer):
        tgt = np.asarray(tgt)
        ref = np.asarray(ref)
        *lead, h, w, ch = ref.shape
        fmap = FeatureMap(h, w, ref.reshape(*lead, h * w, ch))
        warped = nted_warp(fmap, c_e, c_d).values
        term = l1_mean(warped, tgt.reshape(*lead, h * w, ch))
        loss = term if loss is None else ad.add(loss, term)
    return loss


def pixel_pyramid_rec(pred, truth, levels: int = 3) -> ad.Var:
    """Sum over pyramid levels of mean absolute difference, 2x2 average pooling between levels."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    pred, truth = _as_batched(pred), _as_batched(truth)
    if pred.shape != truth.shape:
        raise tc.DimensionError("pixel_pyramid_rec", pred.shape, truth.shape)
    loss = l1_mean(pred, truth)
    for _ in range(levels - 1):
        pred, truth = ad.avg_pool2(pred), ad.avg_pool2(truth)
        loss = ad.add(loss, l1_mean(pred, truth))
    return loss


def select_textures(c_d, mask, sigma: float) -> np.ndarray:
    """Binary k-vector: textures whose mean attention inside ``mask`` exceeds ``sigma``."""
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    return (region_texture_usage(c_d, mask) > sigma).astype(np.float64)


def regu_loss(selections_by_layer, complements_by_layer, masks_m_by_layer) -> ad.Var:
    """Sum_l sum_k sel*(1 - m) + comp*m."""
    if not (len(selections_by_layer) == len(complements_by_layer) == len(masks_m_by_layer)):
        raise ValueError("regu_loss: layer count mismatch")
    loss = None
    for sel, comp, m in zip(selections_by_layer, complements_by_layer, masks_m_by_layer):
        m = ad.as_var(m)
        sel = np.asarray(sel, dtype=m.value.dtype)
        comp = np.asarray(comp, dtype=m.value.dtype)
        if sel.shape != m.shape or comp.shape != m.shape:
            raise tc.DimensionError("regu_loss", sel.shape, comp.shape, m.shape)
        term = ad.total(ad.add(ad.mul(ad.sub(1.0, m), sel), ad.mul(m, comp)))
        loss = term if loss is None else ad.add(loss, term)
    return loss


def masked_rec_losses(edited, transformed_r1, transformed_r2, masks, levels: int = 3):
    """Appearance-maintaining and appearance-editing losses.

    ``masks`` is either one (H, W) region mask used for all three images or a
    triple ``(S_t, S_t1, S_t2)``. Returns ``(L_r1, L_r2)``.
    """
    if isinstance(masks, (tuple, list)):
        s_t, s_t1, s_t2 = (np.asarray(m, dtype=np.float64) for m in masks)
    else:
        s_t = s_t1 = s_t2 = np.asarray(masks, dtype=np.float64)
    edited = _as_batched(edited)
    dtype = edited.value.dtype

    def expand(m):
        return np.broadcast_to(np.asarray(m, dtype=dtype)[..., None], edited.shape)

    r1 = _as_batched(transformed_r1).value
    r2 = _as_batched(transformed_r2).value
    if r1.shape != edited.shape or r2.shape != edited.shape:
        raise tc.DimensionError("masked_rec_losses", edited.shape, r1.shape, r2.shape)
    l_r1 = pixel_pyramid_rec(ad.mul(edited, expand(1.0 - s_t)), r1 * expand(1.0 - s_t1), levels)
    l_r2 = pixel_pyramid_rec(ad.mul(edited, expand(s_t)), r2 * expand(s_t2), levels)
    return l_r1, l_r2
