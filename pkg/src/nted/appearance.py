"""Appearance control by interpolating two references' neural textures.

A frozen renderer produces neural textures for two references. Per-layer
coefficients ``m`` in (0, 1)^k blend them; the coefficients are optimised so
that one region of the edited render comes from the second reference and the
rest from the first.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc
from .losses import LossWeights, downsample_mask, masked_rec_losses, regu_loss, select_textures
from .renderer import RendererConfig, encode_reference, encode_skeleton, extract_textures, render

log = logging.getLogger(__name__)


@dataclass
class MaskCoefficients:
    logits: list[np.ndarray]

    @property
    def values(self) -> list[np.ndarray]:
        return [tc.sigmoid(z) for z in self.logits]

    def to_dict(self) -> dict:
        return {
            "layers": [
                {
                    "k": int(z.size),
                    # forced endpoints have infinite logits, stored as null
                    "logits": [float(v) if np.isfinite(v) else None for v in z],
                    "values": [float(v) for v in m],
                    "rounded": [int(round(float(v))) for v in m],
                }
                for z, m in zip(self.logits, self.values)
            ]
        }


def fuse_textures(fe1, fe2, m):
    """Blend (..., k, c) texture banks with per-texture weights ``m`` of shape (k,).

    Written as ``(1 - m) * fe1 + m * fe2`` so both endpoints are exact.
    """
    if fe1.shape != fe2.shape:
        raise tc.DimensionError("fuse_textures", tuple(fe1.shape), tuple(fe2.shape))
    m = ad.as_var(m)
    if m.shape != (fe1.shape[-2],):
        raise tc.DimensionError("fuse_textures", tuple(fe1.shape), tuple(m.shape))
    col = ad.reshape(m, (m.shape[0], 1))
    return ad.add(ad.mul(fe1, ad.sub(1.0, col)), ad.mul(fe2, col))


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


@dataclass
class EditResult:
    masks: MaskCoefficients
    image: np.ndarray  # (H, W, 3)
    trace: list[dict] = field(default_factory=list)
    selections: list[np.ndarray] = field(default_factory=list)
    complements: list[np.ndarray] = field(default_factory=list)
    transfer_r1: np.ndarray | None = None
    transfer_r2: np.ndarray | None = None


def _region_selection(c_d, mask_small, sigma):
    if mask_small.sum() == 0:
        # a region too small to survive downsampling selects nothing
        return np.zeros(c_d.shape[0])
    return select_textures(c_d, mask_small.reshape(-1), sigma)


def optimize_masks(
    params: dict[str, np.ndarray],
    cfg: RendererConfig,
    ref1_image: np.ndarray,
    ref2_image: np.ndarray,
    target_heatmaps: np.ndarray,
    region_mask: np.ndarray,
    weights: LossWeights | None = None,
    sigma: float | list[float] | None = None,
    max_iters: int = 200,
    lr: float = 0.05,
    freeze_selection: bool = False,
    force_m: float | None = None,
) -> EditResult:
    """Optimise interpolation logits with every model parameter held fixed.

    ``sigma`` defaults to twice the uniform attention, ``2 / k``, per layer.
    Selections are recomputed from each iteration's render unless
    ``freeze_selection`` keeps the ones found at iteration 0. ``force_m``
    skips optimisation and renders with every coefficient set to that value.
    """
    weights = weights or LossWeights()
    digest = params_digest(params)
    dtype = next(iter(params.values())).dtype
    L = len(cfg.scales)
    if sigma is None:
        sigmas = [2.0 / k for k in cfg.semantics]
    elif np.ndim(sigma) == 0:
        sigmas = [float(sigma)] * L
    else:
        sigmas = [float(s) for s in sigma]

    def batch(x):
        return np.asarray(x, dtype=dtype)[None]

    skel = encode_skeleton(params, batch(target_heatmaps), cfg)
    fe1, _ = extract_textures(params, encode_reference(params, batch(ref1_image), cfg), cfg)
    fe2, _ = extract_textures(params, encode_reference(params, batch(ref2_image), cfg), cfg)
    transfer1 = render(params, skel, None, cfg, textures=fe1).image.value
    transfer2 = render(params, skel, None, cfg, textures=fe2).image.value
    region = np.asarray(region_mask, dtype=np.float64)
    small = [downsample_mask(region, s) for s in cfg.scales]

    def finish(result: EditResult) -> EditResult:
        if params_digest(params) != digest:
            raise RuntimeError("model parameters changed during mask optimisation")
        result.transfer_r1, result.transfer_r2 = transfer1[0], transfer2[0]
        return result

    if force_m is not None:
        ms = [np.full(k, float(force_m), dtype=dtype) for k in cfg.semantics]
        fused = [fuse_textures(a, b, m) for a, b, m in zip(fe1, fe2, ms)]
        img = render(params, skel, None, cfg, textures=fused).image.value[0]
        logits = [np.full(k, np.inf if force_m >= 1 else -np.inf if force_m <= 0 else
                          np.log(force_m / (1 - force_m))) for k in cfg.semantics]
        return finish(EditResult(MaskCoefficients(logits), img))

    logits = [np.zeros(k, dtype=dtype) for k in cfg.semantics]
    opt = ad.Adam(lr=lr, betas=(0.9, 0.999))
    trace: list[dict] = []
    sel = comp = None
    best = None

    for it in range(max_iters + 1):
        leaves = [ad.leaf(z) for z in logits]
        ms = [ad.sigmoid(z) for z in leaves]
        fused = [fuse_textures(a, b, m) for a, b, m in zip(fe1, fe2, ms)]
        out = render(params, skel, None, cfg, textures=fused)
        if sel is None or not freeze_selection:
            c_ds = [c.value[0] for c in out.c_d]
            sel = [_region_selection(c, s, sg) for c, s, sg in zip(c_ds, small, sigmas)]
            comp = [_region_selection(c, 1.0 - s, sg) for c, s, sg in zip(c_ds, small, sigmas)]
        l_regu = regu_loss(sel, comp, ms)
        l_r1, l_r2 = masked_rec_losses(out.image, transfer1, transfer2, region)
        total = ad.add(
            ad.mul(l_regu, weights.regu),
            ad.add(ad.mul(l_r1, weights.r1), ad.mul(l_r2, weights.r2)),
        )
        value = float(total.value)
        if not np.isfinite(value):
            raise tc.NonFiniteError(f"non-finite editing loss at iteration {it}")
        best_value = value if best is None else min(best["loss"], value)
        trace.append({
            "iter": it,
            "loss": value,
            "regu": float(l_regu.value),
            "r1": float(l_r1.value),
            "r2": float(l_r2.value),
            "best": best_value,
        })
        if best is None or value < best["loss"]:
            best = {
                "loss": value,
                "logits": [z.copy() for z in logits],
                "image": out.image.value[0].copy(),
                "sel": sel,
                "comp": comp,
            }
        if it == max_iters:
            break
        ad.backward(total)
        grads = {str(l): leaf.grad for l, leaf in enumerate(leaves)}
        updated = opt.step({str(l): z for l, z in enumerate(logits)}, grads)
        logits = [updated[str(l)] for l in range(L)]

    initial, final = trace[0]["loss"], trace[-1]["loss"]
    if final < initial:
        chosen = {"logits": logits, "image": out.image.value[0], "sel": sel, "comp": comp}
    else:
        warnings.warn("mask optimisation did not decrease the loss; returning the best iterate", stacklevel=2)
        chosen = best
    log.info("mask optimisation: loss %.6g -> %.6g over %d iterations", initial, final, max_iters)
    return finish(EditResult(
        MaskCoefficients(chosen["logits"]),
        chosen["image"],
        trace,
        chosen["sel"],
        chosen["comp"],
    ))
