"""Arbitrary-resolution prediction and test-time adaptation.

``simplify`` runs a checkpoint on any grayscale image: subtract the stored
training-set input mean, mirror-pad to a multiple of 8, eval-mode forward
with folded batch norm, crop back. ``single_image_optimize`` fine-tunes a
copy of the model on one unlabeled image using only the unsupervised
adversarial term; ``pencil_generate`` is the same pipeline for models
trained with inputs and outputs swapped.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import ConfigError, TrainingConfig
from .data import DatasetPools, threshold_target
from .losses import Regime, safe_log
from .netcore import SpecNet, pad_to_multiple, receptive_field
from .trainer import (TrainState, _draw_batch, _seed_iteration,
                      state_from_checkpoint, state_to_checkpoint, train_step,
                      validate_pools)


@dataclass(frozen=True)
class InferenceOptions:
    apply_threshold: bool = False
    threshold: float = 0.9
    tile_size: int | None = None   # enables tiled evaluation when set
    tile_overlap: int | None = None  # defaults to receptive radius + 8


@dataclass(frozen=True)
class SingleImageOptConfig:
    """Test-time adaptation settings. The adversarial weight on supervised
    pairs is fixed at 0; the input image is the entire rough pool."""

    steps: int = 100
    beta: float = 8e-5
    batch_pairs: int = 4
    batch_size: int = 4
    seed: int = 0


def _eval_net(checkpoint: Checkpoint) -> SpecNet:
    net = (checkpoint.simplifier if checkpoint.folded
           else checkpoint.folded_copy().simplifier)
    net.eval()
    return net


def _run(net: SpecNet, image: np.ndarray, input_mean: float) -> np.ndarray:
    padded, record = pad_to_multiple(
        np.asarray(image, dtype=np.float32) - np.float32(input_mean), 8)
    with torch.no_grad():
        out = net(torch.from_numpy(padded).unsqueeze(0))
    return record.crop(out.squeeze(0).numpy())


def simplify(checkpoint: Checkpoint, image: np.ndarray,
             options: InferenceOptions = InferenceOptions()) -> np.ndarray:
    """Predict a clean drawing for ``image``; output dims equal input dims."""
    if options.tile_size is not None:
        return tiled_forward(checkpoint, image, options)
    net = _eval_net(checkpoint)
    out = _run(net, image, checkpoint.input_mean)
    if options.apply_threshold:
        out = threshold_target(out, options.threshold)
    return out


def pencil_generate(checkpoint: Checkpoint, clean_image: np.ndarray,
                    options: InferenceOptions = InferenceOptions()
                    ) -> np.ndarray:
    """Render a pencil-style drawing from a clean line drawing.

    Thresholding stays off by default: pencil outputs are mid-tone rich and
    snapping them to black would destroy the texture.
    """
    if not checkpoint.pencil_mode:
        raise ConfigError(
            "checkpoint was not trained in pencil mode; use simplify")
    return simplify(checkpoint, clean_image, options)


def midtone_fraction(image: np.ndarray, low: float = 0.1,
                     high: float = 0.9) -> float:
    """Fraction of pixels strictly between ``low`` and ``high``; a proxy for
    blurriness (ink is near 0, paper near 1)."""
    if low >= high:
        raise ValueError("low must be below high")
    arr = np.asarray(image)
    return float(np.mean((arr > low) & (arr < high)))


def tiled_forward(checkpoint: Checkpoint, image: np.ndarray,
                  options: InferenceOptions) -> np.ndarray:
    """Process the image in overlapping tiles and stitch the interiors.

    The overlap must cover the network's receptive-field radius so interior
    pixels match the whole-image forward; smaller images fall back to a
    single whole-image pass.
    """
    net = _eval_net(checkpoint)
    spec = net.spec
    radius = receptive_field(spec, len(spec.layers) - 1) // 2
    overlap = options.tile_overlap
    if overlap is None:
        overlap = radius + 8
    if overlap < radius:
        raise ConfigError(
            f"tile overlap {overlap} is below the receptive-field radius "
            f"{radius}")
    tile = options.tile_size
    h, w = image.shape
    if tile is None or (h <= tile and w <= tile):
        out = _run(net, image, checkpoint.input_mean)
    else:
        overlap = -(-overlap // 8) * 8  # tiles stay 8-divisible
        step = tile - 2 * overlap
        if step <= 0:
            raise ConfigError("tile_size too small for the required overlap")
        out = np.zeros_like(image, dtype=np.float32)
        for top in range(0, h, step):
            for left in range(0, w, step):
                t0 = max(top - overlap, 0)
                l0 = max(left - overlap, 0)
                t1 = min(top + step + overlap, h)
                l1 = min(left + step + overlap, w)
                piece = _run(net, image[t0:t1, l0:l1], checkpoint.input_mean)
                ct0, cl0 = top - t0, left - l0
                ct1 = ct0 + min(step, h - top)
                cl1 = cl0 + min(step, w - left)
                out[top:top + (ct1 - ct0),
                    left:left + (cl1 - cl0)] = piece[ct0:ct1, cl0:cl1]
    if options.apply_threshold:
        out = threshold_target(out, options.threshold)
    return out


def unsup_fake_term(checkpoint: Checkpoint, image: np.ndarray,
                    patch_size: int) -> float:
    """beta-free diagnostic: mean log(1 - D(S(x))) on top-left crops of the
    image, with the checkpoint's discriminator in eval mode."""
    if checkpoint.discriminator is None:
        raise ConfigError("checkpoint has no discriminator")
    S = checkpoint.simplifier
    D = checkpoint.discriminator
    S.eval()
    D.eval()
    x = np.asarray(image[:patch_size, :patch_size], dtype=np.float32)
    x = x - np.float32(checkpoint.input_mean)
    with torch.no_grad():
        pred = S(torch.from_numpy(x)[None, None])
        d = D(pred)
        log1m = torch.log((1.0 - d).clamp(1e-7, 1.0))
    return float(log1m.mean())


def single_image_optimize(checkpoint: Checkpoint, target_image: np.ndarray,
                          pools: DatasetPools,
                          config: SingleImageOptConfig = SingleImageOptConfig()
                          ) -> tuple[np.ndarray, Checkpoint]:
    """Adapt the model to one unlabeled image.

    Runs ``steps`` iterations of the full objective with the pair-term
    adversarial weight at 0, the rough pool replaced by the target image and
    the clean pool drawn from the supervised targets (unless the pools
    already carry clean-only data). The input checkpoint is never mutated.
    """
    clean = pools.clean_only or [y for _, y in pools.supervised]
    if not clean:
        raise ConfigError("single-image optimization needs a clean pool")
    adapted_pools = DatasetPools(
        supervised=list(pools.supervised),
        rough_only=[np.asarray(target_image, dtype=np.float32)],
        clean_only=list(clean),
        input_mean=checkpoint.input_mean)

    patch = _discriminator_patch_size(checkpoint)
    train_config = TrainingConfig(
        regime=Regime.ADVERSARIAL_AUGMENTATION,
        alpha=0.0, beta=config.beta,
        iterations=max(config.steps, 1),
        batch_pairs=config.batch_pairs,
        batch_rough=config.batch_size,
        batch_clean=config.batch_size,
        pretrain_iterations=0,
        seed=config.seed,
        augmentation=replace(
            _default_augmentation(), patch_size=patch))
    validate_pools(adapted_pools, train_config)
    state = state_from_checkpoint(copy.deepcopy(checkpoint), adapted_pools,
                                  train_config)
    state.iteration = 0
    for i in range(config.steps):
        rng = _seed_iteration(train_config, i, "single-image")
        batch = _draw_batch(adapted_pools, train_config, rng)
        train_step(state, batch)
    adapted = state_to_checkpoint(state)
    adapted.input_mean = checkpoint.input_mean
    adapted.pencil_mode = checkpoint.pencil_mode
    return simplify(adapted, target_image), adapted


def _default_augmentation():
    from .data import AugmentationConfig
    return AugmentationConfig()


def _discriminator_patch_size(checkpoint: Checkpoint) -> int:
    """Patch size the checkpoint's discriminator was built for (its final
    fully-connected layer fixes the accepted resolution)."""
    D = checkpoint.discriminator
    if D is None:
        raise ConfigError(
            "single-image optimization needs a checkpoint with a "
            "discriminator (train an adversarial regime first)")
    fc = D.spec.layers[-1]
    last_conv = next(l for l in reversed(D.spec.layers)
                     if l.out_channels and l.kind != "fully-connected")
    spatial = int(round((fc.in_channels / last_conv.out_channels) ** 0.5))
    return spatial * 64
