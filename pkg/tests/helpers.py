"""Shared test utilities: finite-difference gradient check and the synthetic training run."""
import time

import numpy as np
import torch

from xstereo.extractor import tiny_config
from xstereo.heads import HeadConfig, head_loss
from xstereo.model import PatchMatcher

# (criterion, passed, detail) tuples recorded by the acceptance suite
ACCEPTANCE = []


def tiny_model(fusion_mode="both", seed=0, hidden=(32, 16)):
    return PatchMatcher(tiny_config(), HeadConfig(list(hidden)), fusion_mode, seed=seed).double()


def grad_check(model, rgb, lwir, labels, n_coords=100, step=1e-5, seed=0):
    """Largest relative error between autograd and central differences."""
    def loss_fn():
        corr, concat = model(rgb, lwir)
        parts = [head_loss(torch.softmax(s, -1), labels) for s in (corr, concat) if s is not None]
        return sum(parts)

    model.zero_grad()
    loss_fn().backward()
    params = list(model.parameters())
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    which = rng.choice(len(params), size=n_coords)
    worst = 0.0
    with torch.no_grad():
        for k in which:
            p = params[k]
            idx = int(rng.integers(sizes[k]))
            flat = p.view(-1)
            analytic = p.grad.view(-1)[idx].item()
            orig = flat[idx].item()
            flat[idx] = orig + step
            up = loss_fn().item()
            flat[idx] = orig - step
            down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * step)
            # floor keeps exactly-zero gradients (dead units) from dividing by zero
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def train_synthetic(cfg, seed, fusion_mode, ckpt_path):
    """One training run on a generated synthetic dataset, scored on its test split.

    ``cfg`` is a RunConfig whose dataset_root already holds the frames.  Safe to
    run in a spawned worker process.
    """
    from xstereo.dataset import load_dataset, split_folds
    from xstereo.evaluate import evaluate_fold
    from xstereo.train import save_checkpoint, train

    torch.set_num_threads(1)
    start = time.perf_counter()
    manifest = load_dataset(cfg.dataset_root, d_max=cfg.d_max, patch_size=cfg.patch_size)
    fold = cfg.default_fold(manifest.pairs)
    tr, va, te = split_folds(manifest, fold, augment=cfg.augment, patch_size=cfg.patch_size)
    hyper = cfg.hyperparams()
    hyper.seed, hyper.fusion_mode = seed, fusion_mode
    ckpt, history = train(tr, va, cfg.extractor_config(), cfg.head_config(), hyper, fold_id=fold.fold_id)
    te.stats = ckpt.stats
    report, _ = evaluate_fold(ckpt.model, te, cfg.d_max, fold.fold_id, cfg.sweep_mode)
    save_checkpoint(ckpt_path, ckpt)
    return {"seed": seed, "fusion_mode": fusion_mode, "recall": report.recall,
            "n_test": report.n_points, "best_epoch": ckpt.epoch,
            "loss_first": history.loss_total[0], "loss_last": history.loss_total[-1],
            "frames": (len(fold.train), len(fold.val), len(fold.test)),
            "seconds": time.perf_counter() - start, "checkpoint": str(ckpt_path)}
