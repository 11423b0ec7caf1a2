"""Objective functions for all training regimes.

The simplifier S minimizes a supervised model loss plus (depending on the
regime) adversarial terms; the discriminator D maximizes its classification
log-likelihood, which we realize by minimizing the negated objective. All
logarithms go through :func:`safe_log` so losses stay finite even when the
discriminator saturates.

Sign conventions: real label is 1, fake label is 0. ``alpha`` weights the
adversarial terms on supervised pairs, ``beta`` the terms on unpaired data.
The generator's adversarial term is the saturating ``log(1 - D(S(x)))`` by
default; pass ``saturating=False`` for ``-log D(S(x))``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

LOG_EPS = 1e-7


class RegimeError(ValueError):
    """Objective invoked with pools or discriminator it cannot use."""


class Regime(enum.Enum):
    MSE_ONLY = "mse_only"
    SUPERVISED_ADVERSARIAL = "supervised_adversarial"
    ADVERSARIAL_AUGMENTATION = "adversarial_augmentation"
    CGAN_BASELINE = "cgan_baseline"
    UNSUPERVISED_ONLY = "unsupervised_only"

    @property
    def uses_discriminator(self) -> bool:
        return self is not Regime.MSE_ONLY

    @property
    def uses_unsupervised(self) -> bool:
        return self in (Regime.ADVERSARIAL_AUGMENTATION,
                        Regime.UNSUPERVISED_ONLY)


@dataclass
class LossBreakdown:
    """Per-term decomposition of one batch objective.

    Fields are 0-dim tensors; ``total_S`` is differentiable w.r.t. the
    simplifier output. Terms absent from the regime in force are exactly 0.
    """

    model_loss: torch.Tensor
    adv_real: torch.Tensor
    adv_fake: torch.Tensor
    unsup_real: torch.Tensor
    unsup_fake: torch.Tensor
    total_S: torch.Tensor
    total_D: torch.Tensor

    def as_row(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach())
                for name in ("model_loss", "adv_real", "adv_fake",
                             "unsup_real", "unsup_fake", "total_S", "total_D")}


def mse_loss(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean norm of the difference, normalized by pixel count.

    The normalization keeps alpha/beta meaningful across patch sizes; an
    unnormalized norm would rescale the adversarial weights by the pixel
    count (384x384 = 147456 at the default patch size).
    """
    if prediction.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(prediction.shape)} vs "
            f"{tuple(target.shape)}")
    diff = prediction - target
    return (diff * diff).mean()


def safe_log(p: torch.Tensor) -> torch.Tensor:
    """log(p) with p clamped to [eps, 1-eps]; p must lie in [0, 1]."""
    p = torch.as_tensor(p)
    if torch.any(p < 0) or torch.any(p > 1):
        raise ValueError("probability outside [0, 1]")
    return torch.log(p.clamp(LOG_EPS, 1.0 - LOG_EPS))


def _mean_log(p: torch.Tensor) -> torch.Tensor:
    return safe_log(p).mean()


def _mean_log1m(p: torch.Tensor) -> torch.Tensor:
    p = torch.as_tensor(p)
    if torch.any(p < 0) or torch.any(p > 1):
        raise ValueError("probability outside [0, 1]")
    return torch.log((1.0 - p).clamp(LOG_EPS, 1.0 - LOG_EPS)).mean()


def _require(pool: torch.Tensor | None, name: str) -> torch.Tensor:
    if pool is None or pool.numel() == 0:
        raise RegimeError(f"regime requires a non-empty {name} batch")
    return pool


def discriminator_objective(d_real: torch.Tensor | None,
                            d_fake: torch.Tensor | None,
                            regime: Regime,
                            alpha: float,
                            beta: float,
                            d_real_unsup: torch.Tensor | None = None,
                            d_fake_unsup: torch.Tensor | None = None
                            ) -> torch.Tensor:
    """Negated discriminator objective (a minimization target).

    ``d_real``/``d_fake`` are D's outputs on ground-truth targets and on
    S(x) for supervised pairs; the ``*_unsup`` arguments are D's outputs on
    the unpaired clean pool and on S(x) for the unpaired rough pool. With
    beta = 0 (or a regime without unsupervised terms) the unsup arguments
    are ignored and the result reduces to the supervised objective exactly.
    """
    if regime is Regime.MSE_ONLY:
        raise RegimeError("mse_only does not train a discriminator")
    if regime is Regime.UNSUPERVISED_ONLY:
        gain = beta * (_mean_log(_require(d_real_unsup, "clean-only"))
                       + _mean_log1m(_require(d_fake_unsup, "rough-only")))
        return -gain
    gain = alpha * (_mean_log(_require(d_real, "supervised real"))
                    + _mean_log1m(_require(d_fake, "supervised fake")))
    if regime is Regime.ADVERSARIAL_AUGMENTATION and beta != 0.0:
        gain = gain + beta * _mean_log(_require(d_real_unsup, "clean-only"))
        gain = gain + beta * _mean_log1m(_require(d_fake_unsup, "rough-only"))
    return -gain


def generator_objective(prediction: torch.Tensor | None,
                        target: torch.Tensor | None,
                        d_fake_sup: torch.Tensor | None,
                        d_fake_unsup: torch.Tensor | None,
                        regime: Regime,
                        alpha: float,
                        beta: float,
                        saturating: bool = True) -> LossBreakdown:
    """Simplifier loss and its term decomposition.

    ``total_S`` is the model loss plus alpha-weighted adversarial terms over
    supervised predictions plus beta-weighted terms over unsupervised
    predictions. Accumulation order is fixed (model, then alpha term, then
    beta term) so that beta = 0 reduces bitwise to the supervised regime and
    alpha = beta = 0 to the plain model loss.
    """
    if regime is Regime.MSE_ONLY and (alpha != 0.0 or beta != 0.0):
        raise RegimeError("mse_only has no adversarial terms; "
                          "alpha and beta must be 0")
    zero = torch.zeros(())
    model = zero
    adv_fake = zero
    unsup_fake = zero
    if regime is not Regime.UNSUPERVISED_ONLY:
        model = mse_loss(_require(prediction, "supervised prediction"),
                         _require(target, "supervised target"))
    total = model
    use_alpha = regime in (Regime.SUPERVISED_ADVERSARIAL,
                           Regime.ADVERSARIAL_AUGMENTATION)
    if use_alpha and alpha != 0.0:
        adv_fake = alpha * _gen_term(
            _require(d_fake_sup, "supervised fake"), saturating)
        total = total + adv_fake
    if regime.uses_unsupervised and beta != 0.0:
        unsup_fake = beta * _gen_term(
            _require(d_fake_unsup, "unsupervised fake"), saturating)
        total = total + unsup_fake
    return LossBreakdown(model_loss=model, adv_real=zero, adv_fake=adv_fake,
                         unsup_real=zero, unsup_fake=unsup_fake,
                         total_S=total, total_D=zero)


def _gen_term(d_fake: torch.Tensor, saturating: bool) -> torch.Tensor:
    if saturating:
        return _mean_log1m(d_fake)
    return -_mean_log(d_fake)


def cgan_objective(d_real_cond: torch.Tensor,
                   d_fake_cond: torch.Tensor,
                   saturating: bool = True
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """Conditional-GAN baseline losses (S loss, D loss).

    ``d_real_cond``/``d_fake_cond`` are the conditional discriminator's
    outputs on (x, y*) and (x, S(x)). There is no model-loss term; the
    baseline trains with the adversarial loss alone, which is why it is
    markedly less stable. Unsupervised pools are not applicable: the
    discriminator needs the paired input.
    """
    d_loss = -(_mean_log(_require(d_real_cond, "conditional real"))
               + _mean_log1m(_require(d_fake_cond, "conditional fake")))
    s_loss = _gen_term(d_fake_cond, saturating)
    return s_loss, d_loss


def unsupervised_only_objective(prediction_unsup_d: torch.Tensor,
                                d_real_unsup: torch.Tensor,
                                beta: float = 1.0,
                                saturating: bool = True
                                ) -> tuple[torch.Tensor, torch.Tensor]:
    """Ablation without any supervised term (S loss, D loss).

    ``prediction_unsup_d`` is D's output on S(x) over the rough-only pool,
    ``d_real_unsup`` D's output on the clean-only pool. Equivalent to the
    full objective with the supervised expectation removed; outputs lose
    coherency with the inputs, which is the point of the ablation.
    """
    d_loss = discriminator_objective(
        None, None, Regime.UNSUPERVISED_ONLY, 0.0, beta,
        d_real_unsup=d_real_unsup, d_fake_unsup=prediction_unsup_d)
    s_loss = beta * _gen_term(_require(prediction_unsup_d, "rough-only"),
                              saturating)
    return s_loss, d_loss
