"""Alternating min-max training loop.

Each iteration draws one mini-batch, updates the discriminator on it
(minimizing the negated classification log-likelihood), then updates the
simplifier on the same mini-batch. Optimization uses ADADELTA for both
networks. All adversarial regimes start from an MSE-pretrained simplifier.

Determinism: (seed, config, pools) fully determine every record and
checkpoint. The data and dropout RNG streams are reseeded per iteration from
(seed, iteration), so interrupted runs resume exactly.
"""

from __future__ import annotations

import copy
import csv
import math
import time
import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import losses
from .checkpoint import Checkpoint, save_checkpoint
from .config import ConfigError, TrainingConfig, save_config
from .data import (Batch, DatasetPools, make_batch, save_image,
                   swap_for_pencil_mode)
from .losses import LossBreakdown, Regime
from .netcore import (SpecNet, build_discriminator,
                      build_simplification_network,
                      default_simplifier_channels, make_net, pad_to_multiple)
from .optim import AdadeltaState, step_module

CSV_COLUMNS = ("iteration", "regime", "model_loss", "adv_real", "adv_fake",
               "unsup_real", "unsup_fake", "total_S", "total_D",
               "grad_norm_S", "grad_norm_D")

BALANCE_LOW, BALANCE_HIGH = 0.1, 10.0


class TrainingDiverged(RuntimeError):
    """A loss term became non-finite; training aborts rather than skipping."""

    def __init__(self, iteration: int, term: str, value: float):
        super().__init__(
            f"non-finite loss at iteration {iteration}: {term} = {value}")
        self.iteration = iteration
        self.term = term


@dataclass
class TrainRecord:
    iteration: int
    regime: str
    breakdown: dict[str, float]
    grad_norm_S: float
    grad_norm_D: float
    wall_time: float

    def as_row(self) -> dict:
        row = {"iteration": self.iteration, "regime": self.regime,
               "grad_norm_S": self.grad_norm_S,
               "grad_norm_D": self.grad_norm_D}
        row.update(self.breakdown)
        return row


@dataclass
class TrainState:
    config: TrainingConfig
    simplifier: SpecNet
    discriminator: SpecNet | None
    opt_S: AdadeltaState
    opt_D: AdadeltaState | None
    input_mean: float
    iteration: int = 0
    balance_window: deque = field(default_factory=lambda: deque(maxlen=50))
    balance_multiplier: float = 1.0


# ---------------------------------------------------------------------------
# Setup and validation

def validate_pools(pools: DatasetPools, config: TrainingConfig) -> None:
    """Reject regime/pool incompatibilities before iteration 1."""
    regime = config.regime
    if regime is not Regime.UNSUPERVISED_ONLY and not pools.supervised:
        raise ConfigError(f"regime {regime.value} needs supervised pairs")
    if regime is Regime.UNSUPERVISED_ONLY and config.beta == 0:
        raise ConfigError("unsupervised_only needs beta > 0")
    if regime.uses_unsupervised:
        if not pools.rough_only or not pools.clean_only:
            if regime is Regime.ADVERSARIAL_AUGMENTATION and config.beta == 0:
                pass  # beta = 0 makes the unsupervised pools unused
            else:
                raise ConfigError(
                    f"regime {regime.value} needs non-empty rough-only and "
                    f"clean-only pools")


def build_state(pools: DatasetPools, config: TrainingConfig) -> TrainState:
    """Seeded network initialization for a fresh run."""
    validate_pools(pools, config)
    torch.manual_seed(config.seed)
    schedule = default_simplifier_channels(config.simplifier_base_channels,
                                           config.simplifier_channel_cap)
    simplifier = SpecNet(build_simplification_network(schedule))
    discriminator = None
    opt_D = None
    if config.regime.uses_discriminator:
        in_ch = 2 if config.regime is Regime.CGAN_BASELINE else 1
        discriminator = SpecNet(build_discriminator(
            input_size=config.augmentation.patch_size,
            base_channels=config.discriminator_base_channels,
            input_channels=in_ch))
        opt_D = AdadeltaState()
    return TrainState(config=config, simplifier=simplifier,
                      discriminator=discriminator,
                      opt_S=AdadeltaState(), opt_D=opt_D,
                      input_mean=pools.input_mean)


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    return Checkpoint(
        simplifier=state.simplifier,
        discriminator=state.discriminator,
        input_mean=state.input_mean,
        config_fingerprint=state.config.fingerprint(),
        iteration=state.iteration,
        pencil_mode=state.config.pencil_mode,
        opt_simplifier=state.opt_S,
        opt_discriminator=state.opt_D)


def state_from_checkpoint(ckpt: Checkpoint, pools: DatasetPools,
                          config: TrainingConfig) -> TrainState:
    """Continue training from a checkpoint's parameters and optimizer state.

    The networks are deep-copied; the source checkpoint is never mutated.
    If the checkpoint lacks a discriminator (or has one of the wrong input
    arity) a fresh one is initialized.
    """
    validate_pools(pools, config)
    torch.manual_seed(config.seed)
    simplifier = copy.deepcopy(ckpt.simplifier)
    discriminator = None
    opt_D = None
    if config.regime.uses_discriminator:
        in_ch = 2 if config.regime is Regime.CGAN_BASELINE else 1
        if (ckpt.discriminator is not None
                and ckpt.discriminator.spec.input_channels == in_ch):
            discriminator = copy.deepcopy(ckpt.discriminator)
            opt_D = (copy.deepcopy(ckpt.opt_discriminator)
                     or AdadeltaState())
        else:
            discriminator = SpecNet(build_discriminator(
                input_size=config.augmentation.patch_size,
                base_channels=config.discriminator_base_channels,
                input_channels=in_ch))
            opt_D = AdadeltaState()
    opt_S = copy.deepcopy(ckpt.opt_simplifier) or AdadeltaState()
    return TrainState(config=config, simplifier=simplifier,
                      discriminator=discriminator,
                      opt_S=opt_S, opt_D=opt_D,
                      input_mean=pools.input_mean,
                      iteration=ckpt.iteration)


# ---------------------------------------------------------------------------
# Single step

def _grad_norm(module: SpecNet) -> float:
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def _check_finite(iteration: int, **terms: torch.Tensor) -> None:
    for name, value in terms.items():
        v = float(value.detach() if isinstance(value, torch.Tensor)
                  else value)
        if not math.isfinite(v):
            raise TrainingDiverged(iteration, name, v)


def balance_gradients(window, enabled: bool = True) -> float:
    """Multiplier on the adversarial terms keeping the running ratio of
    adversarial to model-loss gradient norms inside [0.1, 10].

    ``window`` holds recent (adversarial_norm, model_norm) pairs; degenerate
    zero norms leave the multiplier at 1.
    """
    if not enabled or not window:
        return 1.0
    ratios = [a / m for a, m in window if m > 0 and a > 0]
    if not ratios:
        return 1.0
    ratio = float(np.median(ratios))
    if ratio > BALANCE_HIGH:
        return BALANCE_HIGH / ratio
    if ratio < BALANCE_LOW:
        return BALANCE_LOW / ratio
    return 1.0


def _discriminator_pass(state: TrainState, batch: Batch
                        ) -> tuple[float, dict[str, float]]:
    """Update D on the batch (simplifier outputs detached)."""
    config = state.config
    S, D = state.simplifier, state.discriminator
    regime = config.regime
    D.train()
    S.train()
    with torch.no_grad():
        pred_sup = (S(batch.supervised_x)
                    if regime is not Regime.UNSUPERVISED_ONLY else None)
        pred_unsup = (S(batch.unsup_x)
                      if regime.uses_unsupervised and config.beta != 0
                      and batch.unsup_x.shape[0] else None)
    terms: dict[str, float] = {}
    if regime is Regime.CGAN_BASELINE:
        # real and fake share one forward pass so batch-norm statistics
        # cover both classes; separate passes would let normalization cancel
        # exactly the real/fake differences the classifier needs
        both = D(torch.cat([
            torch.cat([batch.supervised_x, batch.supervised_y], dim=1),
            torch.cat([batch.supervised_x, pred_sup], dim=1)]))
        n = batch.supervised_x.shape[0]
        d_real, d_fake = both[:n], both[n:]
        _, loss_D = losses.cgan_objective(d_real, d_fake)
    else:
        segments = []
        if regime is not Regime.UNSUPERVISED_ONLY:
            segments += [batch.supervised_y, pred_sup]
        if pred_unsup is not None:
            segments += [batch.unsup_y, pred_unsup]
        outputs = torch.split(D(torch.cat(segments)),
                              [s.shape[0] for s in segments])
        if regime is not Regime.UNSUPERVISED_ONLY:
            d_real, d_fake = outputs[0], outputs[1]
            d_real_unsup, d_fake_unsup = (
                (outputs[2], outputs[3]) if pred_unsup is not None
                else (None, None))
        else:
            d_real, d_fake = None, None
            d_real_unsup, d_fake_unsup = outputs[0], outputs[1]
        loss_D = losses.discriminator_objective(
            d_real, d_fake, regime, config.alpha, config.beta,
            d_real_unsup=d_real_unsup, d_fake_unsup=d_fake_unsup)
        if d_real is not None:
            terms["adv_real"] = float(
                config.alpha * losses.safe_log(d_real.detach()).mean())
        if d_real_unsup is not None:
            terms["unsup_real"] = float(
                config.beta * losses.safe_log(d_real_unsup.detach()).mean())
    _check_finite(state.iteration, total_D=loss_D)
    D.zero_grad(set_to_none=True)
    loss_D.backward()
    grad_norm = _grad_norm(D)
    step_module(D, state.opt_D)
    terms["total_D"] = float(loss_D.detach())
    return grad_norm, terms


def _simplifier_pass(state: TrainState, batch: Batch
                     ) -> tuple[float, LossBreakdown]:
    config = state.config
    S, D = state.simplifier, state.discriminator
    regime = config.regime
    S.train()
    if D is not None:
        # running-statistics mode: the simplifier's fake-only batches would
        # otherwise skew D's batch-norm statistics to one class
        D.eval()
    pred_sup = (S(batch.supervised_x)
                if regime is not Regime.UNSUPERVISED_ONLY else None)
    pred_unsup = (S(batch.unsup_x)
                  if regime.uses_unsupervised and config.beta != 0
                  and batch.unsup_x.shape[0] else None)

    if regime is Regime.CGAN_BASELINE:
        d_fake = D(torch.cat([batch.supervised_x, pred_sup], dim=1))
        loss_S, _ = losses.cgan_objective(
            torch.ones_like(d_fake), d_fake,
            saturating=config.saturating_generator_loss)
        breakdown = LossBreakdown(
            model_loss=torch.zeros(()), adv_real=torch.zeros(()),
            adv_fake=loss_S.detach(), unsup_real=torch.zeros(()),
            unsup_fake=torch.zeros(()), total_S=loss_S,
            total_D=torch.zeros(()))
    elif regime is Regime.UNSUPERVISED_ONLY:
        d_fake_unsup = D(pred_unsup)
        loss_S, _ = losses.unsupervised_only_objective(
            d_fake_unsup, torch.ones_like(d_fake_unsup), beta=config.beta,
            saturating=config.saturating_generator_loss)
        breakdown = LossBreakdown(
            model_loss=torch.zeros(()), adv_real=torch.zeros(()),
            adv_fake=torch.zeros(()), unsup_real=torch.zeros(()),
            unsup_fake=loss_S.detach(), total_S=loss_S,
            total_D=torch.zeros(()))
    else:
        mult = state.balance_multiplier
        d_fake_sup = (D(pred_sup)
                      if D is not None and config.alpha != 0
                      and regime is not Regime.MSE_ONLY else None)
        d_fake_unsup_d = D(pred_unsup) if pred_unsup is not None else None
        alpha, beta = ((0.0, 0.0) if regime is Regime.MSE_ONLY
                       else (config.alpha * mult, config.beta * mult))
        breakdown = losses.generator_objective(
            pred_sup, batch.supervised_y, d_fake_sup, d_fake_unsup_d,
            regime, alpha, beta,
            saturating=config.saturating_generator_loss)
        if config.auto_balance and regime is not Regime.MSE_ONLY:
            _update_balance(state, breakdown)
        loss_S = breakdown.total_S
    _check_finite(state.iteration, total_S=loss_S,
                  model_loss=breakdown.model_loss)
    S.zero_grad(set_to_none=True)
    if D is not None:
        D.zero_grad(set_to_none=True)
    loss_S.backward()
    grad_norm = _grad_norm(S)
    step_module(S, state.opt_S)
    if D is not None:
        # gradients flowed through D's parameters; discard them
        D.zero_grad(set_to_none=True)
    return grad_norm, breakdown


def _update_balance(state: TrainState, breakdown: LossBreakdown) -> None:
    """Record gradient norms of the model vs adversarial parts of the loss."""
    S = state.simplifier
    adv = breakdown.adv_fake + breakdown.unsup_fake
    if not adv.requires_grad:
        return
    S.zero_grad(set_to_none=True)
    breakdown.model_loss.backward(retain_graph=True)
    model_norm = _grad_norm(S)
    S.zero_grad(set_to_none=True)
    adv.backward(retain_graph=True)
    adv_norm = _grad_norm(S)
    S.zero_grad(set_to_none=True)
    state.balance_window.append((adv_norm, model_norm))
    state.balance_multiplier = balance_gradients(
        state.balance_window, state.config.auto_balance)


def train_step(state: TrainState, batch: Batch) -> TrainRecord:
    """One alternating update: D first, then S, on the same mini-batch.

    Parameter disjointness holds: the D step leaves S's parameters
    bit-identical and vice versa.
    """
    start = time.perf_counter()
    config = state.config
    d_terms: dict[str, float] = {}
    grad_D = 0.0
    if config.regime.uses_discriminator:
        grad_D, d_terms = _discriminator_pass(state, batch)
    grad_S, breakdown = _simplifier_pass(state, batch)
    row = breakdown.as_row()
    row.update(d_terms)
    state.iteration += 1
    return TrainRecord(iteration=state.iteration, regime=config.regime.value,
                       breakdown=row, grad_norm_S=grad_S, grad_norm_D=grad_D,
                       wall_time=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Loops

def _seed_iteration(config: TrainingConfig, iteration: int, phase: str
                    ) -> np.random.Generator:
    """Per-iteration RNG streams: derive data and dropout seeds from
    (seed, phase, iteration) so runs are reproducible and resumable."""
    ss = np.random.SeedSequence(
        [config.seed, zlib.crc32(phase.encode()), iteration])
    torch.manual_seed(int(ss.generate_state(1)[0]))
    return np.random.default_rng(ss.spawn(1)[0])


def _draw_batch(pools: DatasetPools, config: TrainingConfig,
                rng: np.random.Generator, supervised_only: bool = False
                ) -> Batch:
    regime = config.regime
    if supervised_only:
        counts = (config.batch_pairs, 0, 0)
    else:
        n_pairs = (config.batch_pairs
                   if regime is not Regime.UNSUPERVISED_ONLY else 0)
        use_unsup = regime.uses_unsupervised and config.beta != 0
        counts = (n_pairs,
                  config.batch_rough if use_unsup else 0,
                  config.batch_clean if use_unsup else 0)
    return make_batch(pools, counts, config.augmentation, rng,
                      threshold_targets=not config.pencil_mode)


def pretrain_supervised(pools: DatasetPools, config: TrainingConfig
                        ) -> Checkpoint:
    """Train S with the MSE loss only; D stays at its initialization.

    The resulting checkpoint seeds every adversarial regime. With
    ``pretrain_iterations`` = 0 this returns the raw initialization.
    """
    if not pools.supervised:
        raise ConfigError("pretraining needs a non-empty supervised pool")
    state = build_state(pools, config)
    mse_config = replace(config, regime=Regime.MSE_ONLY)
    mse_state = TrainState(config=mse_config, simplifier=state.simplifier,
                           discriminator=None, opt_S=state.opt_S, opt_D=None,
                           input_mean=pools.input_mean)
    for i in range(config.pretrain_iterations):
        rng = _seed_iteration(config, i, "pretrain")
        batch = _draw_batch(pools, mse_config, rng, supervised_only=True)
        train_step(mse_state, batch)
    # hand back the full state incl. the untouched discriminator
    state.iteration = 0
    ckpt = state_to_checkpoint(state)
    ckpt.opt_simplifier = AdadeltaState()  # adversarial phase starts fresh
    return ckpt


def train(pools: DatasetPools, config: TrainingConfig,
          out_dir: str | Path | None = None,
          init: Checkpoint | None = None
          ) -> tuple[Checkpoint, list[TrainRecord]]:
    """Run the full training loop.

    Pretrains first when no ``init`` checkpoint is given. Writes CSV logs,
    periodic checkpoints and sample grids under ``out_dir`` when provided.
    """
    torch.set_num_threads(config.num_threads)
    if config.pencil_mode:
        pools = swap_for_pencil_mode(pools)
    validate_pools(pools, config)
    if init is None:
        init = pretrain_supervised(pools, config)
    state = state_from_checkpoint(init, pools, config)

    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    csv_file = None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "samples").mkdir(parents=True, exist_ok=True)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        save_config(config, out_dir / "resolved-config.yaml")
        csv_file = open(out_dir / "logs" / "train.csv", "w", newline="")
        writer = csv.DictWriter(csv_file, fieldnames=CSV_COLUMNS,
                                extrasaction="ignore")
        writer.writeheader()

    records = []
    try:
        for i in range(state.iteration, config.iterations):
            rng = _seed_iteration(config, i, "train")
            batch = _draw_batch(pools, config, rng)
            record = train_step(state, batch)
            records.append(record)
            if writer is not None:
                writer.writerow(record.as_row())
            if out_dir is not None and (
                    state.iteration % config.checkpoint_interval == 0
                    or state.iteration == config.iterations):
                save_checkpoint(state_to_checkpoint(state),
                                out_dir / "checkpoints"
                                / f"iter{state.iteration:07d}.ckpt")
                _write_sample_grid(state, pools,
                                   out_dir / "samples"
                                   / f"iter{state.iteration:07d}.png")
    finally:
        if csv_file is not None:
            csv_file.close()
    ckpt = state_to_checkpoint(state)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / "checkpoints" / "final.ckpt")
    return ckpt, records


def _forward_full(net: SpecNet, image: np.ndarray, input_mean: float
                  ) -> np.ndarray:
    """Eval-mode forward of one full image with pad/crop."""
    net.eval()
    padded, record = pad_to_multiple(image.astype(np.float32) - input_mean, 8)
    with torch.no_grad():
        out = net(torch.from_numpy(padded).unsqueeze(0))
    return record.crop(out.squeeze(0).numpy())


def validation_mse(net: SpecNet, pairs, input_mean: float) -> float:
    """Mean per-pixel squared error over full validation pairs."""
    total = 0.0
    for x, y in pairs:
        out = _forward_full(net, x, input_mean)
        total += float(np.mean((out - y) ** 2))
    return total / len(pairs)


def _write_sample_grid(state: TrainState, pools: DatasetPools,
                       path: Path, n: int = 4) -> None:
    rows = []
    for x, y in pools.supervised[:n]:
        out = _forward_full(state.simplifier, x, state.input_mean)
        rows.append(np.concatenate([x, out, y], axis=1))
    if rows:
        height = min(r.shape[0] for r in rows)
        save_image(np.concatenate([r[:height] for r in rows], axis=0), path)


# ---------------------------------------------------------------------------
# Regime comparison harness

def compare_regimes(pools: DatasetPools, base_config: TrainingConfig,
                    regimes, val_pairs,
                    out_dir: str | Path | None = None) -> list[dict]:
    """Train one model per regime from the same pretrained checkpoint and
    seed; report validation MSE, mid-tone fraction and discriminator fool
    rate per regime."""
    from .inference import midtone_fraction  # local import, no cycle at load

    pretrained = pretrain_supervised(pools, base_config)
    rows = []
    for regime in regimes:
        config = replace(base_config, regime=regime)
        ckpt, _ = train(pools, config, init=copy.deepcopy(pretrained),
                        out_dir=None)
        outputs = [_forward_full(ckpt.simplifier, x, ckpt.input_mean)
                   for x, _ in val_pairs]
        mse = float(np.mean([np.mean((o - y) ** 2)
                             for o, (_, y) in zip(outputs, val_pairs)]))
        midtone = float(np.mean([midtone_fraction(o) for o in outputs]))
        fool = float("nan")
        if ckpt.discriminator is not None and regime is not Regime.CGAN_BASELINE:
            ckpt.discriminator.eval()
            patch = config.augmentation.patch_size
            votes = []
            with torch.no_grad():
                for o in outputs:
                    crop = o[:patch, :patch]
                    if crop.shape != (patch, patch):
                        continue
                    votes.append(float(ckpt.discriminator(
                        torch.from_numpy(crop[None]))) > 0.5)
            fool = float(np.mean(votes)) if votes else float("nan")
        rows.append({"regime": regime.value, "val_mse": mse,
                     "midtone_fraction": midtone, "fool_rate": fool,
                     "pure_adversarial": regime is Regime.CGAN_BASELINE})
        if out_dir is not None:
            grid_dir = Path(out_dir)
            grid_dir.mkdir(parents=True, exist_ok=True)
            sample = np.concatenate(
                [np.concatenate([x, o, y], axis=1)
                 for (x, y), o in zip(val_pairs[:3], outputs[:3])], axis=0)
            save_image(sample, grid_dir / f"samples_{regime.value}.png")
    if out_dir is not None:
        with open(Path(out_dir) / "metrics.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows
