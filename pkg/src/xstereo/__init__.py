"""Patch-based visible/thermal-infrared stereo disparity estimation."""

from .dataset import (DatasetManifest, DisparityPoint, FoldSpec, RectifiedPair, augment_points,
                      extract_patch, load_dataset, split_folds)
from .evaluate import cross_validate, estimate, evaluate_fold, recall, sweep
from .extractor import ExtractorConfig, build_extractor, extract
from .heads import HeadConfig, concatenate, correlate, head_forward, head_loss, total_loss
from .model import PatchMatcher
from .synth import SynthConfig, generate_dataset, generate_scene
from .train import Hyperparams, load_checkpoint, sample_pairs, save_checkpoint

__version__ = "0.1.0"
