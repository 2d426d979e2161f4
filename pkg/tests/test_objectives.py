"""Loss-function oracles and combination laws."""

import math

import numpy as np
import pytest

from convssp.autodiff import Tensor
from convssp.objectives import (
    LossReport,
    LossWeights,
    loss_ci,
    loss_final,
    loss_kd,
    loss_ts,
    loss_wr,
)

ALL_ON = {"topic": True, "coref": True, "wr": True, "kd": True}


class TestTopicLoss:
    def test_perfect_prediction_near_zero(self):
        labels = np.array([1.0, 0.0, 1.0])
        assert loss_ts(labels, labels).item() < 1e-6

    def test_uniform_prediction_is_ln2(self):
        p = np.full(4, 0.5)
        y = np.array([1.0, 0.0, 1.0, 0.0])
        np.testing.assert_allclose(loss_ts(p, y).item(), math.log(2), atol=1e-12)

    def test_hand_value(self):
        loss = loss_ts(np.array([0.9, 0.2]), np.array([1.0, 0.0]))
        expected = -(math.log(0.9) + math.log(0.8)) / 2
        np.testing.assert_allclose(loss.item(), expected, atol=1e-12)
        assert abs(loss.item() - 0.1643) < 5e-5

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            loss_ts(np.array([0.5, 0.5]), np.array([1.0]))


class TestCorefLoss:
    def test_matched_one_hot_near_zero(self):
        p = np.array([1.0, 0.0, 0.0])
        y = np.array([1.0, 0.0, 0.0])
        assert loss_ci(p, y).item() < 1e-6

    def test_uniform_is_ln2(self):
        p = np.full(5, 0.5)
        y = np.eye(5)[2]
        np.testing.assert_allclose(loss_ci(p, y).item(), math.log(2), atol=1e-12)

    def test_hand_value(self):
        loss = loss_ci(np.array([0.7, 0.1, 0.1]), np.array([1.0, 0.0, 0.0]))
        expected = -(math.log(0.7) + math.log(0.9) + math.log(0.9)) / 3
        np.testing.assert_allclose(loss.item(), expected, atol=1e-12)
        assert abs(loss.item() - 0.1891) < 5e-5


class TestNormLosses:
    def test_identity_is_zero(self):
        y = np.array([1.0, 0.0, 1.0, 0.0])
        assert loss_wr(y, y).item() == 0.0
        assert loss_kd(y, y).item() == 0.0

    def test_three_four_five(self):
        y = np.zeros(6)
        y_hat = y.copy()
        y_hat[0] += 0.3
        y_hat[1] += 0.4
        np.testing.assert_allclose(loss_wr(y_hat, y).item(), 0.5, atol=1e-12)

    def test_uniform_half_against_binary(self):
        for size in (4, 9, 25):
            y = (np.arange(size) % 2).astype(float)
            p = np.full(size, 0.5)
            np.testing.assert_allclose(
                loss_wr(p, y).item(), 0.5 * math.sqrt(size), atol=1e-12
            )

    def test_kd_hand_value(self):
        a = np.zeros(8)
        b = np.zeros(8)
        b[0], b[1] = 3.0, 4.0
        np.testing.assert_allclose(loss_kd(a, b).item(), 5.0, atol=1e-12)

    def test_kd_symmetry(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(16), rng.standard_normal(16)
        np.testing.assert_allclose(loss_kd(a, b).item(), loss_kd(b, a).item())

    def test_squared_reading_is_mse(self):
        a = np.array([1.0, 2.0, 3.0])
        b = np.array([0.0, 0.0, 0.0])
        np.testing.assert_allclose(
            loss_wr(a, b, squared=True).item(), (1 + 4 + 9) / 3, atol=1e-12
        )

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            loss_kd(np.zeros(3), np.zeros(4))


class TestCombination:
    def test_hand_value(self):
        total, report = loss_final(
            Tensor(2.0),
            Tensor(3.0),
            Tensor(4.0),
            Tensor(1.0),
            LossWeights(alpha=0.01, beta=0.001, gamma=0.01),
            ALL_ON,
        )
        np.testing.assert_allclose(total.item(), 1.063, atol=1e-12)
        assert report.l_final == total.item()
        assert report.l_kd == 1.0 and report.l_ts == 2.0

    def test_zero_weights_reduce_to_kd(self):
        total, _ = loss_final(
            Tensor(7.0), Tensor(8.0), Tensor(9.0), Tensor(1.5),
            LossWeights(alpha=0.0, beta=0.0, gamma=0.0), ALL_ON,
        )
        np.testing.assert_allclose(total.item(), 1.5)

    def test_masked_terms_are_exact_zero(self):
        masks = {"topic": False, "coref": False, "wr": False, "kd": True}
        total, report = loss_final(
            Tensor(7.0), Tensor(8.0), Tensor(9.0), Tensor(1.5),
            LossWeights(alpha=5.0, beta=5.0, gamma=5.0), masks,
        )
        assert report.l_ts == 0.0 and report.l_ci == 0.0 and report.l_wr == 0.0
        np.testing.assert_allclose(total.item(), 1.5)

    def test_affine_in_each_weight(self):
        values = (Tensor(2.0), Tensor(3.0), Tensor(4.0), Tensor(1.0))
        for name in ("alpha", "beta", "gamma"):
            totals = []
            for w in (0.0, 0.5, 1.0):
                weights = LossWeights(**{name: w})
                total, _ = loss_final(*values, weights, ALL_ON)
                totals.append(total.item())
            # affine: midpoint value is the average of the endpoints
            np.testing.assert_allclose(totals[1], (totals[0] + totals[2]) / 2, atol=1e-12)

    def test_report_identity(self):
        weights = LossWeights()
        total, report = loss_final(
            Tensor(0.3), Tensor(0.4), Tensor(0.5), Tensor(0.6), weights, ALL_ON
        )
        recomputed = (
            report.l_kd
            + weights.alpha * report.l_ts
            + weights.beta * report.l_ci
            + weights.gamma * report.l_wr
        )
        np.testing.assert_allclose(report.l_final, recomputed, atol=1e-15)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-0.1)

    def test_csv_row_round_trips_floats(self):
        report = LossReport(0.1, 0.2, 0.3, 0.4, 0.5004, ALL_ON)
        row = report.csv_row(7)
        fields = row.split(",")
        assert fields[0] == "7"
        assert float(fields[5]) == 0.5004


class TestGradients:
    def test_bce_gradient_flows(self):
        p = Tensor(np.array([0.7, 0.2]))
        p.requires_grad = True
        loss = loss_ts(p, np.array([1.0, 0.0]))
        loss.backward()
        # d/dp of mean BCE: (-y/p + (1-y)/(1-p)) / n
        expected = np.array([-1 / 0.7, 1 / 0.8]) / 2
        np.testing.assert_allclose(p.grad, expected, rtol=1e-10)

    def test_norm_gradient_is_unit_direction(self):
        a = Tensor(np.array([3.0, 4.0]))
        a.requires_grad = True
        b = Tensor(np.zeros(2))
        loss = loss_kd(a, b)
        loss.backward()
        np.testing.assert_allclose(a.grad, np.array([0.6, 0.8]), rtol=1e-12)
