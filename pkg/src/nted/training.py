"""Training loop, parameter EMA and checkpoints for the desk renderer."""

from __future__ import annotations

import io
import json
import logging
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensor_core as tc
from .losses import LossWeights, attn_reconstruction, downsample_image, pixel_pyramid_rec
from .renderer import RendererConfig, forward, init_params

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nted-checkpoint"
CHECKPOINT_VERSION = 1
PYRAMID_LEVELS = 3


class ConfigMismatchError(ValueError):
    pass


def compute_losses(p, batch: dict, cfg: RendererConfig, weights: LossWeights, ablate_nted: bool = False):
    """Weighted total plus its parts: ``(total, l_attn, l_rec, render_output)``."""
    out = forward(p, batch["ref_image"], batch["tgt_heatmaps"], cfg, ablate_nted=ablate_nted)
    l_rec = pixel_pyramid_rec(out.image, batch["tgt_image"], PYRAMID_LEVELS)
    l_attn = attn_reconstruction(
        [downsample_image(batch["tgt_image"], s) for s in cfg.scales],
        [downsample_image(batch["ref_image"], s) for s in cfg.scales],
        list(zip(out.c_e, out.c_d)),
    )
    total = ad.add(ad.mul(l_attn, weights.attn), ad.mul(l_rec, weights.rec))
    return total, l_attn, l_rec, out


class Trainer:
    """Owns parameters, the EMA shadow copy and the optimizer state."""

    def __init__(
        self,
        cfg: RendererConfig,
        seed: int,
        dtype=np.float32,
        lr: float = 2e-3,
        weights: LossWeights | None = None,
        ema_decay: float = 0.999,
    ):
        if not 0.0 < ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        self.cfg = cfg
        self.dtype = dtype
        self.weights = weights or LossWeights()
        self.ema_decay = ema_decay
        self.params = init_params(cfg, np.random.default_rng(seed), dtype)
        self.ema = {k: v.copy() for k, v in self.params.items()}
        self.opt = ad.Adam(lr=lr)
        self.step_count = 0

    def train_step(self, batch: dict) -> dict[str, float]:
        """One Adam step on ``batch``; returns the loss values."""
        batch = {k: np.asarray(v, dtype=self.dtype) for k, v in batch.items()}
        leaves = {k: ad.leaf(v) for k, v in self.params.items()}
        total, l_attn, l_rec, _ = compute_losses(leaves, batch, self.cfg, self.weights)
        value = float(total.value)
        if not np.isfinite(value):
            raise tc.NonFiniteError(
                f"non-finite loss at step {self.step_count}: attn={float(l_attn.value)} rec={float(l_rec.value)}"
            )
        ad.backward(total)
        grads = {k: v.grad for k, v in leaves.items() if v.grad is not None}
        self.params = self.opt.step(self.params, grads)
        self.step_count += 1
        self._update_ema()
        return {"loss": value, "attn": float(l_attn.value), "rec": float(l_rec.value)}

    def _update_ema(self) -> None:
        # warm-up keeps the average from being dominated by the initial weights
        t = self.step_count
        d = min(self.ema_decay, (1.0 + t) / (10.0 + t))
        self.ema = {k: (d * self.ema[k] + (1.0 - d) * p).astype(self.dtype) for k, p in self.params.items()}

    # ------------------------------------------------------------------ io

    def save(self, path) -> None:
        save_checkpoint(path, self.cfg, self.params, self.ema, self.opt, self.step_count, self.ema_decay)

    @classmethod
    def resume(cls, path, cfg: RendererConfig, dtype=np.float32, weights: LossWeights | None = None, lr: float = 2e-3) -> "Trainer":
        ckpt = load_checkpoint(path, cfg)
        trainer = cls(cfg, seed=0, dtype=dtype, lr=lr, weights=weights, ema_decay=ckpt["ema_decay"])
        trainer.params = {k: v.astype(dtype) for k, v in ckpt["params"].items()}
        trainer.ema = {k: v.astype(dtype) for k, v in ckpt["ema"].items()}
        trainer.opt.load_state_dict(ckpt["adam"])
        trainer.step_count = ckpt["step"]
        return trainer


def save_checkpoint(path, cfg, params, ema, opt: ad.Adam, step: int, ema_decay: float) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "step": step,
        "ema_decay": ema_decay,
        "adam_t": opt.t,
        "shapes": {k: list(v.shape) for k, v in params.items()},
    }
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k, v in params.items():
        arrays[f"params/{k}"] = v
        arrays[f"ema/{k}"] = ema[k]
    for k, v in opt.m.items():
        arrays[f"adam_m/{k}"] = v
    for k, v in opt.v.items():
        arrays[f"adam_v/{k}"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, cfg: RendererConfig | None = None) -> dict:
    """Read a checkpoint; ``cfg`` (if given) must hash to the stored config."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} NTED checkpoint")
        stored = RendererConfig.from_dict(header["config"])
        if stored.hash() != header["config_hash"]:
            raise ConfigMismatchError(f"{path}: header config hash is inconsistent")
        if cfg is not None and cfg.hash() != header["config_hash"]:
            raise ConfigMismatchError(
                f"{path}: checkpoint config hash {header['config_hash']} != requested {cfg.hash()}"
            )
        groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
        for key in data.files:
            if key == "__header__":
                continue
            group, name = key.split("/", 1)
            groups[group][name] = data[key]
    for name, shape in header["shapes"].items():
        if list(groups["params"][name].shape) != shape:
            raise ValueError(f"{path}: shape manifest mismatch for {name}")
    return {
        "config": stored,
        "step": header["step"],
        "ema_decay": header["ema_decay"],
        "params": groups["params"],
        "ema": groups["ema"],
        "adam": {"t": header["adam_t"], "m": groups["adam_m"], "v": groups["adam_v"]},
    }


def batches(data: dict[str, np.ndarray], batch_size: int, rng: np.random.Generator, swap: bool = True):
    """Endless stream of random minibatches.

    With ``swap`` each pair is also used in the reverse direction (target as
    reference), which doubles the number of distinct training examples.
    """
    n = data["ref_image"].shape[0]
    while True:
        idx = rng.integers(0, n, size=batch_size)
        flip = rng.random(batch_size) < 0.5 if swap else np.zeros(batch_size, dtype=bool)
        ref_img = np.where(flip[:, None, None, None], data["tgt_image"][idx], data["ref_image"][idx])
        tgt_img = np.where(flip[:, None, None, None], data["ref_image"][idx], data["tgt_image"][idx])
        tgt_hm = np.where(flip[:, None, None, None], data["ref_heatmaps"][idx], data["tgt_heatmaps"][idx])
        yield {"ref_image": ref_img, "tgt_heatmaps": tgt_hm, "tgt_image": tgt_img}
