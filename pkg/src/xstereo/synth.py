"""Synthetic rectified RGB/LWIR pairs with known per-shape disparities.

Each scene holds a few non-overlapping blob "silhouettes".  In RGB they carry
saturated colours and logo-like texture over a muted, cluttered backdrop; in LWIR the same blobs, shifted by
their disparity, are smooth temperature ramps that are blurred and noised.
Only the silhouette is shared between the two spectra.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import DisparityPoint, RectifiedPair, write_points


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    height: int = 96
    width: int = 128
    n_shapes: int = 3
    max_disparity: int = 8
    d_max: int = 64
    texture_density: float = 0.5
    blur_sigma: float = 1.0
    noise_std: float = 0.02
    points_per_shape: int = 2
    edge_band: int = 4
    shape_scale: float = 1.0
    seed: int = 0

    def validate(self):
        if self.max_disparity > self.d_max // 2:
            raise SynthError(f"max_disparity {self.max_disparity} exceeds d_max/2 = {self.d_max // 2}")
        if self.n_shapes < 1 or self.points_per_shape < 1:
            raise SynthError("n_shapes and points_per_shape must be positive")
        if self.height < 16 or self.width < 16 + 2 * self.max_disparity:
            raise SynthError("image too small for the configured disparity range")
        return self


@dataclass
class Scene:
    pair: RectifiedPair
    points: list[DisparityPoint]
    masks: list[np.ndarray]      # per-shape RGB support
    disparities: list[int]


def _blob(rng, h, w, cx, cy, rx, ry):
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = (xx - cx) / rx, (yy - cy) / ry
    theta = np.arctan2(dy, dx)
    radius = np.ones_like(theta)
    for k in (2, 3, 4):
        radius += rng.uniform(0, 0.08) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return dx ** 2 + dy ** 2 <= radius ** 2


def _shift(mask, d):
    out = np.zeros_like(mask)
    if d >= 0:
        out[:, d:] = mask[:, :mask.shape[1] - d]
    else:
        out[:, :d] = mask[:, -d:]
    return out


def _stripes(rng, h, w):
    period = rng.integers(3, 7)
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx * rng.choice([-1, 1]) + yy) // period) % 2 == 0


def _background(rng, h, w, density):
    """Muted, cluttered backdrop: greyish base, dense small patches, stripes."""
    level = rng.uniform(0.3, 0.7)
    img = np.empty((h, w, 3), np.float32)
    img[:] = level + rng.uniform(-0.08, 0.08, 3)
    for _ in range(int(density * h * w / 60)):
        rh, rw = rng.integers(2, 8, size=2)
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        img[y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.2, 0.8) + rng.uniform(-0.1, 0.1, 3)
    if rng.random() < density:
        mask = _stripes(rng, h, w)
        img[mask] = 0.7 * img[mask] + 0.3 * rng.uniform(0.2, 0.8)
    img += rng.normal(0, 0.04, img.shape).astype(np.float32)
    return img


def _garment(rng, h, w, density):
    """Saturated fill with sparse logo-like patches and fine noise."""
    hue = rng.uniform(0, 1)
    base = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.5, 1.0)), np.float32)
    img = np.empty((h, w, 3), np.float32)
    img[:] = base
    for _ in range(int(density * h * w / 300)):
        rh, rw = rng.integers(2, 6, size=2)
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        img[y0:y0 + rh, x0:x0 + rw] = colorsys.hsv_to_rgb(rng.uniform(0, 1), 1.0, rng.uniform(0.4, 1.0))
    if rng.random() < density / 2:
        mask = _stripes(rng, h, w)
        img[mask] = 0.6 * img[mask] + 0.4 * np.array(colorsys.hsv_to_rgb(rng.uniform(0, 1), 1.0, 1.0))
    img += rng.normal(0, 0.03, img.shape).astype(np.float32)
    return img


def _point_candidates(mask, band):
    """Interior pixels that see a left/right silhouette edge within ``band`` columns."""
    inner = ndimage.distance_transform_edt(mask) >= 2
    near = np.zeros_like(mask)
    for k in range(2, band + 1):
        near |= ~_shift(mask, k) | ~_shift(mask, -k)
    return inner & near


def render_scene(config: SynthConfig, scene_index: int) -> Scene:
    config.validate()
    rng = np.random.default_rng([config.seed, scene_index])
    h, w, D = config.height, config.width, config.max_disparity
    s = config.shape_scale

    occupied = np.zeros((h, w), bool)
    masks, disps = [], []
    attempts = 0
    while len(masks) < config.n_shapes:
        attempts += 1
        if attempts > 500:
            raise SynthError(f"could not place {config.n_shapes} shapes in a {h}x{w} frame")
        shrink = 1.0 if attempts < 200 else 0.7
        rx = rng.uniform(0.08, 0.14) * w * s * shrink
        ry = rng.uniform(0.16, 0.26) * h * s * shrink
        margin_x, margin_y = 1.4 * rx + D + 3, 1.4 * ry + 3
        if 2 * margin_x >= w or 2 * margin_y >= h:
            continue
        cx = rng.uniform(margin_x, w - margin_x)
        cy = rng.uniform(margin_y, h - margin_y)
        d = int(rng.integers(-D, D + 1))
        mask = _blob(rng, h, w, cx, cy, rx, ry)
        footprint = mask | _shift(mask, d)
        if (ndimage.binary_dilation(footprint, iterations=3) & occupied).any():
            continue
        occupied |= footprint
        masks.append(mask)
        disps.append(d)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    rgb = _background(rng, h, w, config.texture_density)
    lwir = (rng.uniform(0.1, 0.3) + rng.uniform(-0.05, 0.05) * (xx / w - 0.5)
            + rng.uniform(-0.05, 0.05) * (yy / h - 0.5)).astype(np.float32)

    points = []
    for k, (mask, d) in enumerate(zip(masks, disps)):
        fill = _garment(rng, h, w, config.texture_density)
        rgb[mask] = fill[mask]

        shifted = _shift(mask, d)
        ys, xs = np.nonzero(shifted)
        cy, cx = ys.mean(), xs.mean()
        spread_y, spread_x = max(np.ptp(ys), 1), max(np.ptp(xs), 1)
        temp = (rng.uniform(0.6, 0.9) + rng.uniform(-0.08, 0.08) * (yy - cy) / spread_y
                + rng.uniform(-0.08, 0.08) * (xx - cx) / spread_x)
        lwir[shifted] = temp[shifted]

        cand_y, cand_x = np.nonzero(_point_candidates(mask, config.edge_band))
        if len(cand_y) == 0:
            cand_y, cand_x = np.nonzero(ndimage.binary_erosion(mask))
        pick = rng.choice(len(cand_y), size=min(config.points_per_shape, len(cand_y)), replace=False)
        for i in sorted(pick):
            points.append(DisparityPoint(_frame_id(scene_index), int(cand_x[i]), int(cand_y[i]), d))

    if config.blur_sigma > 0:
        lwir = ndimage.gaussian_filter(lwir, config.blur_sigma)
    lwir = lwir + rng.normal(0, config.noise_std, lwir.shape)
    rgb = np.clip(rgb, 0, 1).astype(np.float32)
    lwir = np.clip(lwir, 0, 1).astype(np.float32)[:, :, None]
    return Scene(RectifiedPair(_frame_id(scene_index), rgb, lwir), points, masks, disps)


def _frame_id(index):
    return f"synth_{index:05d}"


def generate_scene(config: SynthConfig, scene_index: int):
    """Returns ``(RectifiedPair, points)`` for one deterministic scene."""
    scene = render_scene(config, scene_index)
    return scene.pair, scene.points


def _to_u8(img):
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def generate_dataset(config: SynthConfig, n_frames: int, root, start_index=0):
    """Writes ``n_frames`` scenes under ``root`` in the on-disk dataset layout."""
    root = Path(root)
    try:
        (root / "rgb").mkdir(parents=True, exist_ok=True)
        (root / "lwir").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SynthError(f"cannot write dataset to {root}: {exc}") from None
    points = []
    for i in range(start_index, start_index + n_frames):
        pair, pts = generate_scene(config, i)
        Image.fromarray(_to_u8(pair.rgb), "RGB").save(root / "rgb" / f"{pair.frame_id}.png")
        Image.fromarray(_to_u8(pair.lwir[:, :, 0]), "L").save(root / "lwir" / f"{pair.frame_id}.png")
        points.extend(pts)
    write_points(root / "points.csv", points)
    return root
