import itertools

import numpy as np
import pytest

from dsta import fusion as fu
from dsta.metrics import MetricError, ScoreTrace, evaluate

import oracles


def branch_table():
    """(a1, a2, thr1, thr2, expected) for every below/equal/above combination."""
    cases = []
    for thr1, thr2 in itertools.product([0.3, 0.6], [0.4, 0.7]):
        for off1, off2 in itertools.product([-0.1, 0.0, 0.2], repeat=2):
            a1, a2 = thr1 + off1, thr2 + off2
            if off1 >= 0 and off2 >= 0:
                want = max(a1, a2)
            elif off1 < 0 and off2 < 0:
                want = min(a1, a2)
            else:
                want = (a1 + a2) / 2
            cases.append((a1, a2, thr1, thr2, want))
    return cases


def _traces(raw, prefix="v"):
    return [ScoreTrace(f"{prefix}{i}", lab, tau, fps, sc) for i, (lab, tau, fps, sc) in enumerate(raw)]


class TestBranches:
    @pytest.mark.parametrize("a1,a2,thr1,thr2,want", branch_table())
    def test_frame_rule(self, a1, a2, thr1, thr2, want):
        got = fu.fuse_frame(a1, a2, thr1, thr2)
        assert got == want
        assert min(a1, a2) <= got <= max(a1, a2)

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(0)
        a1, a2 = rng.uniform(size=200), rng.uniform(size=200)
        got = fu.fuse_scores(a1, a2, 0.4, 0.55)
        want = [fu.fuse_frame(x, y, 0.4, 0.55) for x, y in zip(a1, a2)]
        np.testing.assert_array_equal(got, want)


class TestSearch:
    def _pair(self, seed):
        rng = np.random.default_rng(seed)
        raw = oracles.random_traces(rng, max_videos=8, max_frames=6, levels=20)
        noisy = [(lab, tau, fps, np.clip(np.array(sc) + rng.normal(0, 0.2, len(sc)), 0, 1).tolist())
                 for lab, tau, fps, sc in raw]
        return _traces(raw), _traces(noisy)

    def test_search_picks_best_grid_point(self):
        t1, t2 = self._pair(3)
        thr1, thr2, rep = fu.optimize_thresholds(t1, t2, grid_step=0.1)
        grid = [round(0.1 * i, 10) for i in range(11)]
        best = max(evaluate(fu.fuse_traces(t1, t2, a, b)).ap for a in grid for b in grid)
        assert rep.ap == pytest.approx(best, abs=1e-12)
        # smallest pair reaching the best value
        first = next((a, b) for a in grid for b in grid
                     if evaluate(fu.fuse_traces(t1, t2, a, b)).ap >= best - 1e-12)
        assert (thr1, thr2) == first

    def test_usually_at_least_as_good_as_inputs(self):
        wins = 0
        for seed in range(10):
            t1, t2 = self._pair(seed)
            _, _, rep = fu.optimize_thresholds(t1, t2, grid_step=0.05)
            wins += rep.ap >= max(evaluate(t1).ap, evaluate(t2).ap) - 1e-12
        assert wins >= 8

    def test_not_bounded_below_by_best_input(self):
        # the mixed branch averages instead of deferring to one model, so a
        # weak partner can pull the best grid point below the stronger input
        t1, t2 = self._pair(4)
        _, _, rep = fu.optimize_thresholds(t1, t2, grid_step=0.05)
        assert rep.ap < evaluate(t1).ap

    def test_p80r_objective(self):
        t1, t2 = self._pair(5)
        _, _, rep = fu.optimize_thresholds(t1, t2, objective="P80R", grid_step=0.1)
        assert 0 <= rep.p80r <= 1

    def test_order_of_second_set_does_not_matter(self):
        t1, t2 = self._pair(1)
        a = fu.fuse_traces(t1, t2, 0.3, 0.6)
        b = fu.fuse_traces(t1, t2[::-1], 0.3, 0.6)
        assert [x.scores.tolist() for x in a] == [x.scores.tolist() for x in b]


class TestValidation:
    def test_mismatched_ids(self):
        a = _traces([(1, 1, 10, [0.5]), (0, None, 10, [0.2])])
        b = _traces([(1, 1, 10, [0.5]), (0, None, 10, [0.2])], prefix="w")
        with pytest.raises(MetricError):
            fu.fuse_traces(a, b, 0.5, 0.5)

    def test_mismatched_lengths_or_labels(self):
        a = _traces([(1, 1, 10, [0.5, 0.1])])
        with pytest.raises(MetricError):
            fu.fuse_traces(a, _traces([(1, 1, 10, [0.5])]), 0.5, 0.5)
        with pytest.raises(MetricError):
            fu.fuse_traces(a, _traces([(1, 2, 10, [0.5, 0.1])]), 0.5, 0.5)

    def test_config(self):
        with pytest.raises(ValueError):
            fu.FusionConfig(thr1=1.5)
        with pytest.raises(ValueError):
            fu.FusionConfig(objective="F1")
        with pytest.raises(ValueError):
            fu.FusionConfig(grid_step=0)
