import math

import pytest
import torch

from sketchsimp import losses
from sketchsimp.losses import (LOG_EPS, LossBreakdown, Regime, RegimeError,
                               discriminator_objective, generator_objective,
                               mse_loss, safe_log)


def t(value):
    return torch.tensor(value, dtype=torch.float32)


class TestMseLoss:
    def test_half_everywhere(self):
        # |0.5 - 1.0|^2 averaged over every pixel
        pred = torch.full((1, 1, 4, 4), 0.5)
        target = torch.ones(1, 1, 4, 4)
        assert float(mse_loss(pred, target)) == pytest.approx(0.25)

    def test_opposite_corners(self):
        pred = torch.zeros(1, 1, 2, 2)
        target = torch.ones(1, 1, 2, 2)
        assert float(mse_loss(pred, target)) == pytest.approx(1.0)

    def test_exact_match_is_zero(self):
        x = torch.rand(2, 1, 8, 8)
        assert float(mse_loss(x, x)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


class TestSafeLog:
    def test_half(self):
        assert float(safe_log(t(0.5))) == pytest.approx(math.log(0.5),
                                                        abs=1e-6)

    def test_zero_clamps_to_eps(self):
        assert float(safe_log(t(0.0))) == pytest.approx(math.log(LOG_EPS),
                                                        rel=1e-6)

    def test_one_clamps_below_one(self):
        # clamp bound 1 - eps rounds in float32, so allow one float32 ulp
        # around log(1 - eps)
        assert float(safe_log(t(1.0))) == pytest.approx(
            math.log(1.0 - LOG_EPS), abs=5e-8)
        assert float(safe_log(t(1.0))) < 0.0

    def test_always_finite_on_unit_interval(self):
        p = torch.linspace(0.0, 1.0, 1001)
        assert torch.isfinite(safe_log(p)).all()

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            safe_log(t(-0.1))
        with pytest.raises(ValueError):
            safe_log(t(1.1))


class TestDiscriminatorObjective:
    def test_uninformative_half(self):
        # log(0.5) + log(1 - 0.5) = -1.3863; minimization target is the
        # negation scaled by alpha
        val = discriminator_objective(t([0.5]), t([0.5]),
                                      Regime.SUPERVISED_ADVERSARIAL,
                                      alpha=1.0, beta=0.0)
        assert float(val) == pytest.approx(2 * math.log(2), abs=1e-5)

    def test_perfect_discriminator_near_zero(self):
        val = discriminator_objective(t([1.0]), t([0.0]),
                                      Regime.SUPERVISED_ADVERSARIAL,
                                      alpha=1.0, beta=0.0)
        assert float(val) == pytest.approx(-2 * math.log(1 - LOG_EPS),
                                           abs=1e-6)

    def test_monotone_in_real_score(self):
        lo = discriminator_objective(t([0.3]), t([0.5]),
                                     Regime.SUPERVISED_ADVERSARIAL, 1.0, 0.0)
        hi = discriminator_objective(t([0.7]), t([0.5]),
                                     Regime.SUPERVISED_ADVERSARIAL, 1.0, 0.0)
        assert float(hi) < float(lo)

    def test_beta_terms_included(self):
        base = discriminator_objective(
            t([0.5]), t([0.5]), Regime.ADVERSARIAL_AUGMENTATION,
            alpha=1.0, beta=0.0, d_real_unsup=t([0.5]),
            d_fake_unsup=t([0.5]))
        full = discriminator_objective(
            t([0.5]), t([0.5]), Regime.ADVERSARIAL_AUGMENTATION,
            alpha=1.0, beta=1.0, d_real_unsup=t([0.5]),
            d_fake_unsup=t([0.5]))
        assert float(full) == pytest.approx(float(base) + 2 * math.log(2),
                                            abs=1e-5)


class TestGeneratorObjective:
    def test_hand_value(self):
        # model loss 0.01, D(fake)=0.5, alpha=8e-5:
        # 0.01 + 8e-5 * log(1 - 0.5) = 0.00994455...
        pred = torch.full((1, 1, 10, 10), 0.9)
        target = torch.ones(1, 1, 10, 10)
        bd = generator_objective(pred, target, d_fake_sup=t([0.5]),
                                 d_fake_unsup=None,
                                 regime=Regime.SUPERVISED_ADVERSARIAL,
                                 alpha=8e-5, beta=0.0)
        assert float(bd.model_loss) == pytest.approx(0.01, abs=1e-6)
        expected = 0.01 + 8e-5 * math.log(0.5)
        assert float(bd.total_S) == pytest.approx(expected, abs=1e-7)

    def test_mse_only_reduction_is_exact(self):
        # with alpha = beta = 0 the adversarial terms are skipped entirely,
        # so the total is bitwise equal to the bare model loss
        torch.manual_seed(0)
        pred = torch.rand(2, 1, 16, 16)
        target = torch.rand(2, 1, 16, 16)
        bd = generator_objective(pred, target, d_fake_sup=t([0.3]),
                                 d_fake_unsup=t([0.7]),
                                 regime=Regime.ADVERSARIAL_AUGMENTATION,
                                 alpha=0.0, beta=0.0)
        assert torch.equal(bd.total_S, mse_loss(pred, target))

    def test_beta_zero_reduces_to_supervised(self):
        torch.manual_seed(1)
        pred = torch.rand(2, 1, 16, 16)
        target = torch.rand(2, 1, 16, 16)
        aug = generator_objective(pred, target, d_fake_sup=t([0.4]),
                                  d_fake_unsup=t([0.6]),
                                  regime=Regime.ADVERSARIAL_AUGMENTATION,
                                  alpha=8e-5, beta=0.0)
        sup = generator_objective(pred, target, d_fake_sup=t([0.4]),
                                  d_fake_unsup=None,
                                  regime=Regime.SUPERVISED_ADVERSARIAL,
                                  alpha=8e-5, beta=0.0)
        assert torch.equal(aug.total_S, sup.total_S)

    def test_saturating_vs_nonsaturating_direction(self):
        pred = torch.full((1, 1, 4, 4), 0.5)
        target = torch.full((1, 1, 4, 4), 0.5)
        sat = generator_objective(pred, target, t([0.2]), None,
                                  Regime.SUPERVISED_ADVERSARIAL,
                                  alpha=1.0, beta=0.0, saturating=True)
        non = generator_objective(pred, target, t([0.2]), None,
                                  Regime.SUPERVISED_ADVERSARIAL,
                                  alpha=1.0, beta=0.0, saturating=False)
        # saturating adds alpha*log(1-d); non-saturating subtracts
        # alpha*log(d): both decrease as d rises, but differ in value
        assert float(sat.total_S) == pytest.approx(math.log(0.8), abs=1e-5)
        assert float(non.total_S) == pytest.approx(-math.log(0.2), abs=1e-5)

    def test_fooling_discriminator_lowers_loss(self):
        pred = torch.full((1, 1, 4, 4), 0.5)
        target = torch.full((1, 1, 4, 4), 0.5)
        vals = []
        for d in (0.1, 0.5, 0.9):
            bd = generator_objective(pred, target, t([d]), None,
                                     Regime.SUPERVISED_ADVERSARIAL,
                                     alpha=1.0, beta=0.0)
            vals.append(float(bd.total_S))
        assert vals[0] > vals[1] > vals[2]

    def test_breakdown_row_has_all_terms(self):
        pred = torch.rand(1, 1, 8, 8)
        target = torch.rand(1, 1, 8, 8)
        bd = generator_objective(pred, target, t([0.5]), t([0.5]),
                                 Regime.ADVERSARIAL_AUGMENTATION,
                                 alpha=1e-4, beta=1e-4)
        row = bd.as_row()
        for key in ("model_loss", "adv_fake", "unsup_fake", "total_S"):
            assert key in row and math.isfinite(row[key])


class TestRegimes:
    def test_values(self):
        assert {r.value for r in Regime} == {
            "mse_only", "supervised_adversarial", "adversarial_augmentation",
            "cgan_baseline", "unsupervised_only"}

    def test_discriminator_usage(self):
        assert not Regime.MSE_ONLY.uses_discriminator
        assert Regime.SUPERVISED_ADVERSARIAL.uses_discriminator
        assert Regime.CGAN_BASELINE.uses_discriminator

    def test_unsupervised_usage(self):
        assert Regime.ADVERSARIAL_AUGMENTATION.uses_unsupervised
        assert Regime.UNSUPERVISED_ONLY.uses_unsupervised
        assert not Regime.SUPERVISED_ADVERSARIAL.uses_unsupervised
        assert not Regime.CGAN_BASELINE.uses_unsupervised

    def test_mse_only_rejects_adversarial_terms(self):
        pred = torch.rand(1, 1, 4, 4)
        with pytest.raises(RegimeError):
            generator_objective(pred, pred, t([0.5]), None,
                                Regime.MSE_ONLY, alpha=1.0, beta=0.0)

    def test_augmentation_requires_unsup_scores_when_beta_positive(self):
        pred = torch.rand(1, 1, 4, 4)
        with pytest.raises(RegimeError):
            generator_objective(pred, pred, t([0.5]), None,
                                Regime.ADVERSARIAL_AUGMENTATION,
                                alpha=1e-4, beta=1e-4)


class TestCgan:
    def test_no_model_loss_term(self):
        s_loss, d_loss = losses.cgan_objective(t([0.5]), t([0.5]),
                                               saturating=True)
        assert float(s_loss) == pytest.approx(math.log(0.5), abs=1e-5)
        assert float(d_loss) == pytest.approx(2 * math.log(2), abs=1e-5)


class TestUnsupervisedOnly:
    def test_terms(self):
        s_loss, d_loss = losses.unsupervised_only_objective(
            t([0.5]), t([0.5]), beta=1.0, saturating=True)
        assert float(s_loss) == pytest.approx(math.log(0.5), abs=1e-5)
        assert float(d_loss) == pytest.approx(2 * math.log(2), abs=1e-5)

    def test_beta_scales(self):
        s1, d1 = losses.unsupervised_only_objective(t([0.4]), t([0.6]),
                                                    beta=1.0)
        s2, d2 = losses.unsupervised_only_objective(t([0.4]), t([0.6]),
                                                    beta=0.5)
        assert float(s2) == pytest.approx(0.5 * float(s1), rel=1e-6)
        assert float(d2) == pytest.approx(0.5 * float(d1), rel=1e-6)
