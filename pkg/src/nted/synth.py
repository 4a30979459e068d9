"""Deterministic structured-sprite pairs standing in for person photographs.

A sprite has four parts: two limbs, a striped torso and a head, painted in
that z-order over a light background. Appearance (colours, stripes) and pose
(five keypoints) are sampled independently, so a pair shares appearance and
differs only in pose.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

PARTS = ("left_limb", "right_limb", "torso", "head")  # z-order, back to front
KEYPOINTS = ("head", "neck", "hip", "left_hand", "right_hand")
BACKGROUND = 0.9
MANIFEST_VERSION = 1

TORSO_HALF_WIDTH = 6.0
LIMB_HALF_WIDTH = 2.5
HEAD_RADII = (4.5, 5.5)  # across, along the body axis
STRIPE_SHADE = 0.45


@dataclass(frozen=True)
class Appearance:
    colors: dict[str, tuple[float, float, float]]
    stripe_frequency: float  # stripes per torso length
    stripe_phase: float


@dataclass(frozen=True)
class Pose:
    keypoints: tuple[tuple[float, float], ...]  # (x, y), normalised to [0, 1]


@dataclass(frozen=True)
class SpriteSpec:
    appearance: Appearance
    pose: Pose
    canvas: int = 64


@dataclass
class View:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    heatmaps: np.ndarray  # (H, W, K)
    masks: dict[str, np.ndarray]  # part -> (H, W) bool
    pose: Pose


@dataclass
class Pair:
    seed: int
    appearance: Appearance
    reference: View
    target: View


def sample_appearance(rng: np.random.Generator) -> Appearance:
    colors = {p: tuple(float(v) for v in rng.uniform(0.05, 0.75, size=3)) for p in PARTS}
    return Appearance(colors, float(rng.uniform(2.0, 4.0)), float(rng.uniform(0.0, 2 * np.pi)))


def sample_pose(rng: np.random.Generator, canvas: int = 64) -> Pose:
    s = canvas / 64.0
    neck = np.array([rng.uniform(26, 38), rng.uniform(18, 24)]) * s
    tilt = rng.uniform(-0.35, 0.35)
    axis = np.array([np.sin(tilt), np.cos(tilt)])
    hip = neck + rng.uniform(16, 22) * s * axis
    head = neck - (HEAD_RADII[1] + 1.0) * s * axis
    left = rng.uniform(0.6, 2.5)
    right = rng.uniform(0.6, 2.5)
    lengths = rng.uniform(14, 19, size=2) * s
    left_hand = neck + lengths[0] * np.array([-np.sin(left), np.cos(left)])
    right_hand = neck + lengths[1] * np.array([np.sin(right), np.cos(right)])
    pts = np.stack([head, neck, hip, left_hand, right_hand])
    # snap to pixel centres so each heatmap peaks exactly on its keypoint
    pts = np.clip(np.round(pts), 1, canvas - 2)
    return Pose(tuple((float(x) / (canvas - 1), float(y) / (canvas - 1)) for x, y in pts))


def _pixels(pose: Pose, canvas: int) -> np.ndarray:
    return np.asarray(pose.keypoints) * (canvas - 1)


def _segment_mask(xx, yy, a, b, half_width):
    ab = b - a
    length2 = max(float(ab @ ab), 1e-9)
    t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / length2, 0.0, 1.0)
    dx = xx - (a[0] + t * ab[0])
    dy = yy - (a[1] + t * ab[1])
    return dx * dx + dy * dy <= half_width * half_width


def render_sprite(spec: SpriteSpec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Paint the sprite; returns the image and the visible silhouette of each part."""
    n = spec.canvas
    s = n / 64.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    head, neck, hip, lhand, rhand = _pixels(spec.pose, n)

    axis = hip - neck
    length = float(np.linalg.norm(axis))
    unit = axis / length
    along = (xx - neck[0]) * unit[0] + (yy - neck[1]) * unit[1]
    across = -(xx - neck[0]) * unit[1] + (yy - neck[1]) * unit[0]
    torso = (along >= 0) & (along <= length) & (np.abs(across) <= TORSO_HALF_WIDTH * s)

    hx = (xx - head[0]) * unit[1] - (yy - head[1]) * unit[0]
    hy = (xx - head[0]) * unit[0] + (yy - head[1]) * unit[1]
    head_mask = (hx / (HEAD_RADII[0] * s)) ** 2 + (hy / (HEAD_RADII[1] * s)) ** 2 <= 1.0

    shapes = {
        "left_limb": _segment_mask(xx, yy, neck, lhand, LIMB_HALF_WIDTH * s),
        "right_limb": _segment_mask(xx, yy, neck, rhand, LIMB_HALF_WIDTH * s),
        "torso": torso,
        "head": head_mask,
    }
    label = np.full((n, n), -1, dtype=np.int64)
    for i, part in enumerate(PARTS):
        label[shapes[part]] = i

    app = spec.appearance
    image = np.full((n, n, 3), BACKGROUND)
    for i, part in enumerate(PARTS):
        image[label == i] = app.colors[part]
    stripes = np.sin(2 * np.pi * app.stripe_frequency * along / length + app.stripe_phase) > 0
    dark = (label == PARTS.index("torso")) & ~stripes
    image[dark] *= STRIPE_SHADE
    masks = {part: label == i for i, part in enumerate(PARTS)}
    return image, masks


def heatmaps(pose: Pose, canvas: int = 64, sigma: float = 1.5) -> np.ndarray:
    """Gaussian heatmaps, one channel per keypoint, peak value 1 at the keypoint pixel."""
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    pts = _pixels(pose, canvas)
    out = np.empty((canvas, canvas, len(pts)))
    for j, (x, y) in enumerate(pts):
        out[..., j] = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sigma * sigma))
    return out


def render_view(appearance: Appearance, pose: Pose, canvas: int = 64, sigma: float = 1.5) -> View:
    image, masks = render_sprite(SpriteSpec(appearance, pose, canvas))
    return View(image, heatmaps(pose, canvas, sigma), masks, pose)


def generate_pair(seed: int, canvas: int = 64, sigma: float = 1.5) -> Pair:
    rng = np.random.default_rng(seed)
    appearance = sample_appearance(rng)
    ref_pose = sample_pose(rng, canvas)
    tgt_pose = sample_pose(rng, canvas)
    return Pair(
        seed,
        appearance,
        render_view(appearance, ref_pose, canvas, sigma),
        render_view(appearance, tgt_pose, canvas, sigma),
    )


# --------------------------------------------------------------------------
# splits and manifests


def generate_split(
    n_train: int,
    n_test: int,
    seed: int,
    canvas: int = 64,
    sigma: float = 1.5,
    train_start: int | None = None,
    test_start: int | None = None,
) -> dict:
    """Manifest listing the per-sample seeds of a train/test split.

    Seeds are contiguous ranges; by default both derive from ``seed`` and the
    test range follows the train range.
    """
    if n_train < 0 or n_test < 0:
        raise ValueError("split sizes must be nonnegative")
    base = int(seed) * 1_000_003
    train_start = base if train_start is None else int(train_start)
    test_start = train_start + n_train if test_start is None else int(test_start)
    train = list(range(train_start, train_start + n_train))
    test = list(range(test_start, test_start + n_test))
    if set(train) & set(test):
        raise ValueError("train and test seed ranges overlap")
    if n_test == 0:
        warnings.warn("empty test split", stacklevel=2)
    return {
        "version": MANIFEST_VERSION,
        "canvas": canvas,
        "K": len(KEYPOINTS),
        "sigma_hm": sigma,
        "parts": list(PARTS),
        "split_seed": int(seed),
        "train_seeds": train,
        "test_seeds": test,
    }


def save_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')!r}")
    return manifest


def pairs_from_manifest(manifest: dict, split: str) -> list[Pair]:
    seeds = manifest[f"{split}_seeds"]
    return [generate_pair(s, manifest["canvas"], manifest["sigma_hm"]) for s in seeds]


def stack_pairs(pairs: list[Pair], dtype=np.float64) -> dict[str, np.ndarray]:
    """Batch arrays: reference/target images and heatmaps."""
    return {
        "ref_image": np.stack([p.reference.image for p in pairs]).astype(dtype),
        "ref_heatmaps": np.stack([p.reference.heatmaps for p in pairs]).astype(dtype),
        "tgt_image": np.stack([p.target.image for p in pairs]).astype(dtype),
        "tgt_heatmaps": np.stack([p.target.heatmaps for p in pairs]).astype(dtype),
    }


# --------------------------------------------------------------------------
# image io


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6, maxval 255) from an (H, W, 3) float image in [0, 1]."""
    data = to_bytes(image)
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError("not a P6 PPM file")
    w, h, maxval = (int(f) for f in fields[1:])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def image_grid(rows: list[list[np.ndarray]], pad: int = 2) -> np.ndarray:
    h, w, _ = rows[0][0].shape
    ncol = max(len(r) for r in rows)
    grid = np.ones((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            grid[y:y + h, x:x + w] = np.clip(img, 0.0, 1.0)
    return grid
