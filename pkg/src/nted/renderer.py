"""Desk-scale pose-conditioned renderer built around the NTED kernel.

Layout is channels-last: images (B, H, W, 3), heatmaps (B, H, W, K), feature
maps (B, h, w, c). Convolutions are 3x3 im2col + matmul so they reuse the
verified matmul gradient.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .kernel import FeatureMap, Projection, distribute, extract


@dataclass(frozen=True)
class RendererConfig:
    resolution: int = 64
    scales: tuple[int, ...] = (8, 16, 32)  # coarse to fine
    semantics: tuple[int, ...] = (4, 8, 8)  # k per scale
    channels: tuple[int, ...] = (64, 64, 32)  # feature width per scale
    keypoints: int = 5

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        object.__setattr__(self, "semantics", tuple(int(k) for k in self.semantics))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not (len(self.scales) == len(self.semantics) == len(self.channels)) or not self.scales:
            raise ValueError("scales, semantics and channels must have the same nonzero length")
        for a, b in zip(self.scales, self.scales[1:]):
            if b != 2 * a:
                raise ValueError(f"scales must strictly double, got {self.scales}")
        ratio = self.resolution / self.scales[-1]
        if ratio < 2 or ratio != 2 ** round(math.log2(ratio)):
            raise ValueError("resolution must be a power-of-two multiple (>= 2) of the finest scale")
        if min(self.semantics) < 1 or min(self.channels) < 1 or self.keypoints < 1:
            raise ValueError("semantics, channels and keypoints must be positive")

    @property
    def encoder_sizes(self) -> list[int]:
        """Spatial size after each stride-2 encoder block."""
        sizes = []
        s = self.resolution
        while s > self.scales[0]:
            s //= 2
            sizes.append(s)
        return sizes

    def width(self, size: int) -> int:
        return self.channels[self.scales.index(size)] if size in self.scales else self.channels[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RendererConfig":
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def init_params(cfg: RendererConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}

    def conv(name, cin, cout, ksize=3):
        fan_in = ksize * ksize * cin
        params[f"{name}.w"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, cout))
        params[f"{name}.b"] = np.zeros(cout)

    for enc, cin in (("skel", cfg.keypoints), ("ref", 3)):
        for i, size in enumerate(cfg.encoder_sizes):
            cout = cfg.width(size)
            conv(f"{enc}{i}", cin, cout)
            cin = cout

    for l, (k, c) in enumerate(zip(cfg.semantics, cfg.channels)):
        params[f"nted{l}.we"] = rng.normal(0.0, 1.0 / math.sqrt(c), size=(k, c))
        params[f"nted{l}.wd"] = rng.normal(0.0, 1.0 / math.sqrt(c), size=(k, c))
        params[f"nted{l}.fw"] = rng.normal(0.0, 1.0 / math.sqrt(c), size=(c, c))
        params[f"nted{l}.fb"] = np.zeros(c)
        conv(f"dec{l}", c, c)
        params[f"rgb{l}.w"] = rng.normal(0.0, 0.1 / math.sqrt(c), size=(c, 3))
        params[f"rgb{l}.b"] = np.full(3, 0.5 if l == 0 else 0.0)
        if l + 1 < len(cfg.scales):
            conv(f"up{l}", c, cfg.channels[l + 1])
    return {k: v.astype(dtype) for k, v in params.items()}


# --------------------------------------------------------------------------
# building blocks


def dense(x, w, b=None):
    """Position-wise linear map on (B, h, w, cin) -> (B, h, w, cout)."""
    shape = x.shape
    out = ad.matmul(ad.reshape(x, (-1, shape[-1])), w)
    if b is not None:
        out = ad.add(out, b)
    return ad.reshape(out, shape[:-1] + (w.shape[-1],))


def conv3x3(x, w, b, stride=1):
    return dense(ad.unfold3x3(x, stride), w, b)


def _encode(p, prefix, x, cfg) -> list[ad.Var]:
    feats = []
    for i, _ in enumerate(cfg.encoder_sizes):
        x = ad.leaky_relu(conv3x3(x, p[f"{prefix}{i}.w"], p[f"{prefix}{i}.b"], stride=2))
        feats.append(x)
    return feats


def _check_input(x, cfg, channels, what):
    shape = x.shape
    if len(shape) != 4 or shape[1] != cfg.resolution or shape[2] != cfg.resolution or shape[3] != channels:
        raise ValueError(
            f"{what}: expected (B, {cfg.resolution}, {cfg.resolution}, {channels}), got {tuple(shape)}"
        )


def encode_skeleton(p, heatmaps, cfg: RendererConfig) -> ad.Var:
    """Coarsest target feature map from (B, H, W, K) keypoint heatmaps."""
    x = ad.as_var(heatmaps)
    _check_input(x, cfg, cfg.keypoints, "encode_skeleton")
    return _encode(p, "skel", x, cfg)[-1]


def encode_reference(p, image, cfg: RendererConfig) -> list[ad.Var]:
    """Reference feature maps at every renderer scale, coarse to fine."""
    x = ad.as_var(image)
    _check_input(x, cfg, 3, "encode_reference")
    feats = _encode(p, "ref", x, cfg)
    by_size = {f.shape[1]: f for f in feats}
    return [by_size[s] for s in cfg.scales]


def _flat(x) -> FeatureMap:
    B, h, w, c = x.shape
    return FeatureMap(h, w, ad.reshape(x, (B, h * w, c)))


def extract_textures(p, reference_features, cfg: RendererConfig):
    """Per-layer neural textures (B, k, c) and extraction weights (B, k, hw)."""
    textures, c_es = [], []
    for l, ref in enumerate(reference_features):
        proj = Projection(p[f"nted{l}.fw"], p[f"nted{l}.fb"])
        t, c_e = extract(_flat(ref), p[f"nted{l}.we"], proj)
        textures.append(t)
        c_es.append(c_e)
    return textures, c_es


@dataclass
class RenderOutput:
    image: ad.Var  # (B, H, W, 3)
    c_e: list = field(default_factory=list)  # per layer (B, k, hw), empty if textures were given
    c_d: list = field(default_factory=list)  # per layer (B, k, hw)
    textures: list = field(default_factory=list)  # per layer (B, k, c)


def render(p, skeleton_features, reference_features, cfg: RendererConfig, textures=None, ablate_nted: bool = False) -> RenderOutput:
    """Coarse-to-fine rendering with an NTED residual at every scale.

    ``textures`` replaces extraction with precomputed (possibly fused) neural
    textures. With ``ablate_nted`` the NTED outputs are dropped entirely.
    """
    if textures is None and (reference_features is None or len(reference_features) != len(cfg.scales)):
        raise ValueError("one reference feature map per scale is required")
    if textures is not None and len(textures) != len(cfg.scales):
        raise ValueError("one texture bank per scale is required")
    c_es = []
    if textures is None:
        textures, c_es = extract_textures(p, reference_features, cfg)
    x = ad.as_var(skeleton_features)
    if x.shape[1] != cfg.scales[0] or x.shape[-1] != cfg.channels[0]:
        raise ValueError(f"skeleton features {x.shape} do not match the coarsest scale")
    image = None
    c_ds = []
    for l, size in enumerate(cfg.scales):
        B, h, w, c = x.shape
        fo, c_d = distribute(_flat(x), p[f"nted{l}.wd"], textures[l])
        c_ds.append(c_d)
        if not ablate_nted:
            x = ad.add(x, ad.reshape(fo.values, (B, h, w, c)))
        x = ad.leaky_relu(conv3x3(x, p[f"dec{l}.w"], p[f"dec{l}.b"]))
        rgb = dense(x, p[f"rgb{l}.w"], p[f"rgb{l}.b"])
        while rgb.shape[1] < cfg.resolution:
            rgb = ad.upsample2(rgb)
        image = rgb if image is None else ad.add(image, rgb)
        if l + 1 < len(cfg.scales):
            x = ad.leaky_relu(conv3x3(ad.upsample2(x), p[f"up{l}.w"], p[f"up{l}.b"]))
    return RenderOutput(image, c_es, c_ds, textures)


def forward(p, ref_image, tgt_heatmaps, cfg: RendererConfig, ablate_nted: bool = False) -> RenderOutput:
    skel = encode_skeleton(p, tgt_heatmaps, cfg)
    refs = encode_reference(p, ref_image, cfg)
    return render(p, skel, refs, cfg, ablate_nted=ablate_nted)
