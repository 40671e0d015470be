"""Positive/negative pair sampling, the two-head training loop and checkpoints."""
from __future__ import annotations

import copy
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import Stats, crop_batch
from .evaluate import SWEEP_MODES, THRESHOLDS, predict_points, recalls
from .extractor import ConfigError, ExtractorConfig
from .heads import FUSION_MODES, HeadConfig, head_loss
from .model import PatchMatcher

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "xstereo-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalError(FloatingPointError):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class Hyperparams:
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 24
    d_max: int = 64
    seed: int = 0
    fusion_mode: str = "both"
    negative_margin: int = 3
    negatives_per_positive: int = 1
    sweep_mode: str = "windowed"

    def validate(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1 or self.d_max < 2:
            raise ConfigError("learning_rate, epochs, batch_size and d_max must be positive")
        if self.d_max % 2:
            raise ConfigError(f"d_max must be even, got {self.d_max}")
        if self.negative_margin < 1 or self.negatives_per_positive < 1:
            raise ConfigError("negative_margin and negatives_per_positive must be positive")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.sweep_mode not in SWEEP_MODES:
            raise ConfigError(f"unknown sweep mode {self.sweep_mode!r}")
        return self


@dataclass
class TrainHistory:
    loss_corr: list = field(default_factory=list)
    loss_concat: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    val_recall: list = field(default_factory=list)   # list of {n: recall}
    seconds: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss_total)

    def to_dict(self):
        d = {"loss_total": self.loss_total, "seconds": self.seconds,
             "val_recall": [{str(k): v for k, v in r.items()} for r in self.val_recall]}
        if any(v is not None for v in self.loss_corr):
            d["loss_corr"] = self.loss_corr
        if any(v is not None for v in self.loss_concat):
            d["loss_concat"] = self.loss_concat
        return d


@dataclass
class Checkpoint:
    model: PatchMatcher
    extractor_config: ExtractorConfig
    head_config: HeadConfig
    hyper: Hyperparams
    stats: Stats
    fold_id: str | None = None
    epoch: int = 0
    val_recall: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.hyper.seed


def admissible_negatives(d, d_max, margin):
    cand = np.arange(-(d_max // 2), d_max // 2 + 1)
    return cand[np.abs(cand - d) >= margin]


def pair_plan(points, hyper: Hyperparams, epoch_seed):
    """Shuffled ``(point index, lwir disparity, label)`` triples for one epoch.

    Each point yields one positive at its true disparity and
    ``negatives_per_positive`` negatives drawn uniformly from the disparities
    in ``[-d_max/2, d_max/2]`` at least ``negative_margin`` away from it.
    """
    if not points:
        raise ValueError("no points to sample pairs from")
    rng = np.random.default_rng([hyper.seed, epoch_seed])
    k = hyper.negatives_per_positive
    idx, disp, label = [], [], []
    for i, p in enumerate(points):
        neg = admissible_negatives(p.d, hyper.d_max, hyper.negative_margin)
        if len(neg) == 0:
            raise ConfigError(f"no admissible negative disparity for d={p.d} "
                              f"(d_max={hyper.d_max}, margin={hyper.negative_margin})")
        idx += [i] * (k + 1)
        disp += [p.d] + [int(v) for v in rng.choice(neg, size=k)]
        label += [1] + [0] * k
    order = rng.permutation(len(idx))
    return np.asarray(idx)[order], np.asarray(disp)[order], np.asarray(label)[order]


def sample_pairs(manifest, hyper: Hyperparams, epoch_seed, patch_size=36, batch_size=None):
    """Yields batches ``(rgb (B,3,P,P), lwir (B,1,P,P), labels (B,))`` for one epoch."""
    points = manifest.points
    idx, disp, label = pair_plan(points, hyper, epoch_seed)
    bs = batch_size or hyper.batch_size
    p = patch_size
    for start in range(0, len(idx), bs):
        sl = slice(start, start + bs)
        n = len(idx[sl])
        rgb = np.empty((n, 3, p, p), np.float32)
        lwir = np.empty((n, 1, p, p), np.float32)
        for j, (i, d) in enumerate(zip(idx[sl], disp[sl])):
            pt = points[i]
            rgb[j] = crop_batch(manifest.standardized(pt.frame_id, "rgb", pt.mirrored), pt.x, pt.y, p, p)[0]
            lwir[j] = crop_batch(manifest.standardized(pt.frame_id, "lwir", pt.mirrored), pt.x + d, pt.y, p, p)[0]
        yield torch.from_numpy(rgb), torch.from_numpy(lwir), torch.from_numpy(label[sl].copy())


def batch_losses(model, rgb, lwir, labels):
    corr, concat = model(rgb, lwir)
    l_corr = head_loss(torch.softmax(corr, -1), labels) if corr is not None else None
    l_concat = head_loss(torch.softmax(concat, -1), labels) if concat is not None else None
    total = sum(l for l in (l_corr, l_concat) if l is not None)
    return l_corr, l_concat, total


def _log_line(fh, record):
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def train(train_manifest, val_manifest, extractor_config: ExtractorConfig, head_config: HeadConfig,
          hyper: Hyperparams, fold_id=None, log_path=None, progress=None):
    """Optimizes the two-head loss; keeps the epoch with the best validation recall@3."""
    hyper.validate()
    if not train_manifest.points or not val_manifest.points:
        raise ValueError("train and validation manifests must both contain points")
    torch.manual_seed(hyper.seed)
    model = PatchMatcher(extractor_config, head_config, hyper.fusion_mode, seed=hyper.seed)
    opt = torch.optim.Adam(model.parameters(), lr=hyper.learning_rate)
    history = TrainHistory()
    best_state, best_epoch, best_recall = None, 0, {}
    p = extractor_config.patch_size
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, hyper.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            sums = {"corr": 0.0, "concat": 0.0, "total": 0.0}
            count = 0
            for b, (rgb, lwir, labels) in enumerate(sample_pairs(train_manifest, hyper, epoch, p)):
                l_corr, l_concat, total = batch_losses(model, rgb, lwir, labels)
                if not torch.isfinite(total):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, batch {b}: corr={_f(l_corr)} "
                        f"concat={_f(l_concat)} total={_f(total)}")
                opt.zero_grad()
                total.backward()
                opt.step()
                n = len(labels)
                count += n
                sums["total"] += total.item() * n
                if l_corr is not None:
                    sums["corr"] += l_corr.item() * n
                if l_concat is not None:
                    sums["concat"] += l_concat.item() * n

            history.loss_total.append(sums["total"] / count)
            history.loss_corr.append(sums["corr"] / count if model.corr_head is not None else None)
            history.loss_concat.append(sums["concat"] / count if model.concat_head is not None else None)

            est = predict_points(model, val_manifest, val_manifest.points, hyper.d_max, hyper.sweep_mode)
            rec = recalls(est)
            history.val_recall.append(rec)
            history.seconds.append(time.perf_counter() - t0)
            if best_state is None or rec[3] > best_recall[3]:
                best_state = copy.deepcopy(model.state_dict())
                best_epoch, best_recall = epoch, rec

            record = {"epoch": epoch, "loss_total": history.loss_total[-1],
                      "loss_corr": history.loss_corr[-1], "loss_concat": history.loss_concat[-1],
                      **{f"val_recall@{n}": rec[n] for n in THRESHOLDS},
                      "seconds": round(history.seconds[-1], 3)}
            _log_line(fh, record)
            log.info("epoch %d loss %.4f val r@1 %.3f r@3 %.3f", epoch, history.loss_total[-1], rec[1], rec[3])
            if progress is not None:
                progress(record)
    finally:
        if fh is not None:
            fh.close()

    model.load_state_dict(best_state)
    model.eval()
    ckpt = Checkpoint(model, extractor_config, head_config, hyper, train_manifest.stats,
                      fold_id=None if fold_id is None else str(fold_id),
                      epoch=best_epoch, val_recall=best_recall)
    return ckpt, history


def _f(t):
    return None if t is None else float(t.detach())


def save_checkpoint(path, ckpt: Checkpoint):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "extractor_config": asdict(ckpt.extractor_config),
        "head_config": asdict(ckpt.head_config),
        "hyper": asdict(ckpt.hyper),
        "stats": asdict(ckpt.stats),
        "fold_id": ckpt.fold_id,
        "seed": ckpt.hyper.seed,
        "epoch": ckpt.epoch,
        "val_recall": {str(k): v for k, v in ckpt.val_recall.items()},
        "state_dict": ckpt.model.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint archive ({type(exc).__name__}: {exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: missing format tag {CHECKPOINT_FORMAT!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')} "
                              f"is not supported (expected {CHECKPOINT_VERSION})")
    try:
        ext = ExtractorConfig(**payload["extractor_config"])
        head = HeadConfig(**payload["head_config"])
        hyper = Hyperparams(**payload["hyper"])
        stats = Stats(**payload["stats"])
        model = PatchMatcher(ext, head, hyper.fusion_mode, seed=hyper.seed)
        model.load_state_dict(payload["state_dict"])
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint contents ({exc})") from None
    model.eval()
    return Checkpoint(model, ext, head, hyper, stats, payload.get("fold_id"), payload.get("epoch", 0),
                      {int(k): v for k, v in payload.get("val_recall", {}).items()})
