import math

import numpy as np
import pytest

from dsta import numgrad as ng
from dsta.objective import LossConfig, batch_loss, frame_loss, loss_coefficients, total_loss, video_loss

from oracles import central_diff, max_rel_err


class TestCoefficients:
    @pytest.mark.parametrize("fps", [10, 20])
    def test_shape_of_ramp(self, fps):
        T, tau = 100, 91
        c = loss_coefficients(T, tau, fps)
        assert np.all(np.diff(c) >= 0)
        assert np.all(c[tau - 1 :] == 1.0)
        for t in range(1, tau):
            assert c[t - 1] == math.exp(-(tau - t) / fps)

    def test_tau_at_first_frame(self):
        np.testing.assert_array_equal(loss_coefficients(5, 1, 10), np.ones(5))


class TestFrameLoss:
    def test_negative_video_is_plain_cross_entropy(self):
        p = np.array([0.1, 0.2, 0.7])
        got = frame_loss(p, 0, 0, 20).item()
        assert got == pytest.approx(-np.sum(np.log(1 - p)), rel=1e-14)

    def test_positive_video_weighted(self):
        p = np.array([0.3, 0.6, 0.9, 0.8])
        c = loss_coefficients(4, 3, 2)
        assert frame_loss(p, 1, 3, 2).item() == pytest.approx(-np.sum(c * np.log(p)), rel=1e-14)

    def test_clamping_keeps_loss_finite(self):
        cfg = LossConfig(epsilon=1e-7)
        loss = frame_loss(np.array([0.0, 1.0]), 0, 0, 10, cfg).item()
        assert loss == pytest.approx(-math.log(1 - 1e-7) - math.log(1 - (1 - 1e-7)), rel=1e-12)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        P = rng.uniform(0.05, 0.95, (3, 6))
        labels, taus, fps = [1, 0, 1], [4, 0, 6], [10, 10, 5]
        batch = frame_loss(P, labels, taus, fps).data
        for b in range(3):
            assert batch[b] == pytest.approx(frame_loss(P[b], labels[b], taus[b], fps[b]).item(), rel=1e-14)

    def test_gradient(self):
        P = np.random.default_rng(1).uniform(0.05, 0.95, (2, 5))
        x = ng.Tensor(P, requires_grad=True)
        with ng.Graph() as g:
            loss = ng.sum(frame_loss(x, [1, 0], [3, 0], [4, 4]))
        g.backward(loss)
        (num,) = central_diff(lambda: float(np.sum(frame_loss(P, [1, 0], [3, 0], [4, 4]).data)), [P])
        assert max_rel_err(x.grad, num) < 1e-7


class TestVideoAndTotal:
    def test_video_loss(self):
        got = video_loss(np.array([0.8, 0.3]), [1, 0]).data
        np.testing.assert_allclose(got, [-math.log(0.8), -math.log(0.7)], rtol=1e-14)

    def test_total_weighting(self):
        assert total_loss(ng.Tensor(2.0), ng.Tensor(0.5), LossConfig(w_a=15)).item() == 9.5
        assert total_loss(ng.Tensor(2.0), None).item() == 2.0

    def test_batch_loss_is_mean(self):
        class Out:
            probs = ng.Tensor(np.array([[0.2, 0.9], [0.4, 0.1]]))
            video_probs = ng.Tensor(np.array([0.7, 0.2]))

        got = batch_loss(Out, [1, 0], [2, 0], [10, 10], LossConfig(w_a=2)).item()
        per = [
            -(math.exp(-0.1) * math.log(0.2) + math.log(0.9)) - 2 * math.log(0.7),
            -(math.log(0.6) + math.log(0.9)) - 2 * math.log(0.8),
        ]
        assert got == pytest.approx(sum(per) / 2, rel=1e-13)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(w_a=-1)
        with pytest.raises(ValueError):
            LossConfig(epsilon=0)
