"""On-disk dataset format, ground-truth points, augmentation, folds and patches.

Layout::

    root/rgb/<frame_id>.png     8-bit colour
    root/lwir/<frame_id>.png    8-bit single channel
    root/points.csv             header ``frame_id,x,y,d``

Disparity convention: the LWIR match of RGB pixel ``(x, y)`` is ``(x + d, y)``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


class DatasetError(Exception):
    pass


@dataclass
class RectifiedPair:
    frame_id: str
    rgb: np.ndarray   # (H, W, 3) float32 in [0, 1]
    lwir: np.ndarray  # (H, W, 1) float32 in [0, 1]

    def __post_init__(self):
        if self.rgb.shape[:2] != self.lwir.shape[:2]:
            raise DatasetError(f"frame {self.frame_id}: rgb is {self.rgb.shape[:2]} "
                               f"but lwir is {self.lwir.shape[:2]}")

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]


@dataclass(frozen=True)
class DisparityPoint:
    frame_id: str
    x: int
    y: int
    d: int
    mirrored: bool = False


@dataclass
class Stats:
    rgb_mean: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    rgb_std: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    lwir_mean: list[float] = field(default_factory=lambda: [0.0])
    lwir_std: list[float] = field(default_factory=lambda: [1.0])

    def for_modality(self, modality):
        if modality == "rgb":
            return np.asarray(self.rgb_mean, np.float32), np.asarray(self.rgb_std, np.float32)
        return np.asarray(self.lwir_mean, np.float32), np.asarray(self.lwir_std, np.float32)


@dataclass
class FoldSpec:
    fold_id: str
    train: list[str]
    val: list[str]
    test: list[str]

    def validate(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        for (a, b), name in zip([(0, 1), (0, 2), (1, 2)], ["train/val", "train/test", "val/test"]):
            common = sets[a] & sets[b]
            if common:
                raise DatasetError(f"fold {self.fold_id}: {name} overlap on {sorted(common)[:5]}")
        return self


@dataclass
class DatasetManifest:
    root: Path
    pairs: dict[str, RectifiedPair]
    points: list[DisparityPoint]
    stats: Stats = field(default_factory=Stats)
    augmented: bool = False
    rejected: int = 0
    dropped: int = 0

    def __post_init__(self):
        self._cache = {}

    def image(self, frame_id, modality, mirrored=False):
        """Raw ``(H, W, C)`` image, flipped left-right for mirrored frames."""
        key = (frame_id, modality, mirrored)
        if key not in self._cache:
            img = getattr(self.pairs[frame_id], modality)
            self._cache[key] = np.ascontiguousarray(img[:, ::-1]) if mirrored else img
        return self._cache[key]

    def standardized(self, frame_id, modality, mirrored=False):
        """Channels-first standardized image, cached."""
        mean, std = self.stats.for_modality(modality)
        key = (frame_id, modality, mirrored, tuple(mean), tuple(std))
        if key not in self._cache:
            img = (self.image(frame_id, modality, mirrored) - mean) / std
            self._cache[key] = np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)
        return self._cache[key]

    def frame_ids(self):
        return sorted(self.pairs)


def _read_png(path, channels):
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr if channels == 3 else arr[:, :, None]


def read_points(path):
    points = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame_id", "x", "y", "d"]:
            raise DatasetError(f"{path}: line 1: expected header frame_id,x,y,d, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DatasetError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                points.append(DisparityPoint(row[0].strip(), int(row[1]), int(row[2]), int(row[3])))
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from None
    return points


def write_points(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "x", "y", "d"])
        for p in points:
            w.writerow([p.frame_id, p.x, p.y, p.d])


def load_dataset(root, d_max=None, patch_size=36) -> DatasetManifest:
    """Loads every frame and point under ``root`` and computes normalization stats.

    Points with ``|d| > d_max / 2`` are rejected (counted in ``manifest.rejected``).
    """
    root = Path(root)
    rgb_dir, lwir_dir, csv_path = root / "rgb", root / "lwir", root / "points.csv"
    for p in (rgb_dir, lwir_dir):
        if not p.is_dir():
            raise DatasetError(f"missing directory {p}")
    if not csv_path.is_file():
        raise DatasetError(f"missing file {csv_path}")

    pairs = {}
    for rgb_path in sorted(rgb_dir.glob("*.png")):
        fid = rgb_path.stem
        lwir_path = lwir_dir / f"{fid}.png"
        if not lwir_path.is_file():
            raise DatasetError(f"frame {fid}: missing {lwir_path}")
        pairs[fid] = RectifiedPair(fid, _read_png(rgb_path, 3), _read_png(lwir_path, 1))
    for lwir_path in lwir_dir.glob("*.png"):
        if lwir_path.stem not in pairs:
            raise DatasetError(f"frame {lwir_path.stem}: missing rgb image")

    points, rejected = [], 0
    for p in read_points(csv_path):
        pair = pairs.get(p.frame_id)
        if pair is None:
            raise DatasetError(f"point references unknown frame {p.frame_id!r}")
        if not (0 <= p.x < pair.width and 0 <= p.y < pair.height):
            raise DatasetError(f"point {p} lies outside frame {pair.width}x{pair.height}")
        if d_max is not None and abs(p.d) > d_max // 2:
            rejected += 1
            continue
        points.append(p)
    if rejected:
        log.warning("rejected %d points outside the disparity range +-%d", rejected, d_max // 2)

    manifest = DatasetManifest(root, pairs, points, rejected=rejected)
    manifest.stats = compute_stats(manifest, patch_size)
    return manifest


def load_pair(root, frame_id) -> RectifiedPair:
    root = Path(root)
    rgb_path, lwir_path = root / "rgb" / f"{frame_id}.png", root / "lwir" / f"{frame_id}.png"
    for p in (rgb_path, lwir_path):
        if not p.is_file():
            raise DatasetError(f"frame {frame_id}: missing {p}")
    return RectifiedPair(frame_id, _read_png(rgb_path, 3), _read_png(lwir_path, 1))


def compute_stats(manifest, patch_size=36) -> Stats:
    """Per-channel mean/std over the patches centred on the manifest's points.

    RGB patches are centred on ``(x, y)``, LWIR patches on the match ``(x + d, y)``.
    Falls back to whole-image statistics when there are no points.
    """
    rgb_vals, lwir_vals = [], []
    by_frame = _group(manifest.points)
    if by_frame:
        for (fid, mirrored), pts in by_frame.items():
            xs = np.array([p.x for p in pts])
            ys = np.array([p.y for p in pts])
            ds = np.array([p.d for p in pts])
            rgb = manifest.image(fid, "rgb", mirrored).transpose(2, 0, 1)
            lwir = manifest.image(fid, "lwir", mirrored).transpose(2, 0, 1)
            rgb_vals.append(crop_batch(rgb, xs, ys, patch_size, patch_size).transpose(1, 0, 2, 3).reshape(3, -1))
            lwir_vals.append(crop_batch(lwir, xs + ds, ys, patch_size, patch_size).transpose(1, 0, 2, 3).reshape(1, -1))
    else:
        for pair in manifest.pairs.values():
            rgb_vals.append(pair.rgb.reshape(-1, 3).T)
            lwir_vals.append(pair.lwir.reshape(-1, 1).T)
    if not rgb_vals:
        return Stats()
    rgb = np.concatenate(rgb_vals, axis=1).astype(np.float64)
    lwir = np.concatenate(lwir_vals, axis=1).astype(np.float64)
    floor = 1e-6
    return Stats(rgb.mean(1).tolist(), np.maximum(rgb.std(1), floor).tolist(),
                 lwir.mean(1).tolist(), np.maximum(lwir.std(1), floor).tolist())


def _group(points):
    groups = {}
    for p in points:
        groups.setdefault((p.frame_id, p.mirrored), []).append(p)
    return groups


def mirror_points(points, image_width):
    """Reflects points about the vertical image axis (x -> W-1-x, d -> -d)."""
    return [replace(p, x=image_width - 1 - p.x, d=-p.d, mirrored=not p.mirrored) for p in points]


def augment_points(points, image_width, image_height=None):
    """Spreads each point to its 4-neighbourhood, then adds mirrored copies.

    Neighbours falling outside the image are dropped, so the result has at
    most ``10 * len(points)`` entries.
    """
    spread = []
    for p in points:
        for dx, dy in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
            x, y = p.x + dx, p.y + dy
            if not 0 <= x < image_width:
                continue
            if y < 0 or (image_height is not None and y >= image_height):
                continue
            spread.append(replace(p, x=x, y=y))
    dropped = 5 * len(points) - len(spread)
    if dropped:
        log.debug("augmentation dropped %d out-of-bounds neighbours", dropped)
    return spread + mirror_points(spread, image_width)


def _subset(manifest, frame_ids):
    pairs = {f: manifest.pairs[f] for f in frame_ids}
    pts = [p for p in manifest.points if p.frame_id in pairs]
    return DatasetManifest(manifest.root, pairs, pts, stats=manifest.stats)


def split_folds(manifest, spec: FoldSpec, augment=True, patch_size=36):
    """Returns (train, val, test) manifests.

    Statistics come from the (unaugmented) training points and are shared by
    all three parts; augmentation touches the training part only.
    """
    spec.validate()
    listed = set(spec.train) | set(spec.val) | set(spec.test)
    missing = sorted(listed - set(manifest.pairs))
    if missing:
        raise DatasetError(f"fold {spec.fold_id}: frames not in dataset: {missing[:5]}")
    uncovered = sorted({p.frame_id for p in manifest.points} - listed)
    if uncovered:
        raise DatasetError(f"fold {spec.fold_id}: frames with points not assigned to any split: {uncovered[:5]}")

    train, val, test = (_subset(manifest, ids) for ids in (spec.train, spec.val, spec.test))
    stats = compute_stats(train, patch_size)
    for part in (train, val, test):
        part.stats = stats
    if augment:
        out = []
        for (fid, _), pts in _group(train.points).items():
            pair = train.pairs[fid]
            out.extend(augment_points(pts, pair.width, pair.height))
        train.dropped = 10 * len(train.points) - len(out)
        train.points = out
        train.augmented = True
    return train, val, test


def load_folds(path):
    """Reads ``{fold_id: {"train": [...], "val": [...], "test": [...]}}`` from JSON."""
    with open(path) as fh:
        raw = json.load(fh)
    try:
        return {str(k): FoldSpec(str(k), list(v["train"]), list(v["val"]), list(v["test"])).validate()
                for k, v in raw.items()}
    except (KeyError, TypeError, AttributeError) as exc:
        raise DatasetError(f"{path}: malformed fold spec ({exc})") from None


def save_folds(path, folds):
    data = {f.fold_id: {"train": f.train, "val": f.val, "test": f.test} for f in folds}
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def crop_batch(image, cx, cy, height, width):
    """Crops ``(N, C, height, width)`` windows from a channels-first image.

    Window ``k`` spans rows ``cy[k] - height/2 .. cy[k] + height/2 - 1`` (same for
    columns); out-of-bounds pixels replicate the nearest edge.
    """
    _, h, w = image.shape
    cx = np.asarray(cx).reshape(-1)
    cy = np.asarray(cy).reshape(-1)
    rows = np.clip(cy[:, None] - height // 2 + np.arange(height), 0, h - 1)
    cols = np.clip(cx[:, None] - width // 2 + np.arange(width), 0, w - 1)
    out = image[:, rows[:, :, None], cols[:, None, :]]
    return out.transpose(1, 0, 2, 3)


def extract_patch(image, center_x, center_y, height, width, stats=None, modality=None):
    """Standardized ``(C, height, width)`` patch from an ``(H, W, C)`` image.

    ``stats`` may be a Stats (with ``modality``) or a ``(mean, std)`` pair.
    """
    if height <= 0 or width <= 0 or height % 2 or width % 2:
        raise ValueError(f"patch dims must be positive even integers, got {height}x{width}")
    patch = crop_batch(np.asarray(image, np.float32).transpose(2, 0, 1), center_x, center_y, height, width)[0]
    if stats is not None:
        mean, std = stats.for_modality(modality) if isinstance(stats, Stats) else stats
        mean = np.asarray(mean, np.float32).reshape(-1, 1, 1)
        std = np.asarray(std, np.float32).reshape(-1, 1, 1)
        patch = (patch - mean) / std
    return patch.astype(np.float32)


def manifest_summary(manifest, extra=None):
    summary = {
        "root": str(manifest.root),
        "frames": len(manifest.pairs),
        "points": len(manifest.points),
        "rejected_points": manifest.rejected,
        "augmented": manifest.augmented,
        "stats": manifest.stats.__dict__,
    }
    summary.update(extra or {})
    return summary
