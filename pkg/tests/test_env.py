"""MDP mechanics: noise, actions, rewards, returns, sampling."""

import numpy as np
import numpy.testing as npt
import pytest

from r3denoise import env


class TestActionSet:
    def test_default_set(self):
        a = env.ActionSet()
        assert len(a) == 27
        npt.assert_array_equal(a.values, np.arange(-13, 14))
        assert a.zero_index == 13

    def test_decode_endpoints(self):
        a = env.ActionSet()
        assert a.decode(0) == -13.0
        assert a.decode(13) == 0.0
        assert a.decode(26) == 13.0

    def test_decode_out_of_range(self):
        a = env.ActionSet()
        with pytest.raises(RuntimeError):
            a.decode(27)
        with pytest.raises(RuntimeError):
            a.decode(-1)
        with pytest.raises(RuntimeError):
            a.decode_map(np.array([[0, 40]]))

    def test_decode_map(self):
        a = env.ActionSet()
        npt.assert_array_equal(a.decode_map(np.array([0, 13, 26])), [-13.0, 0.0, 13.0])

    def test_custom_set(self):
        a = env.ActionSet([-2, -1, 0, 1, 2])
        assert len(a) == 5 and a.zero_index == 2

    @pytest.mark.parametrize("bad", [
        [0, 1, 1, 2],          # not strictly increasing
        [-2, 0, 1],            # not symmetric
        [-2, -1, 1, 2],        # missing zero
        [],                    # empty
    ])
    def test_invalid_sets(self, bad):
        with pytest.raises(ValueError):
            env.ActionSet(bad)

    def test_values_read_only(self):
        a = env.ActionSet()
        with pytest.raises(ValueError):
            a.values[0] = 5


class TestAwgn:
    def test_sigma_zero_identity(self, rng):
        x = rng.random((1, 1, 8, 8)) * 255
        npt.assert_array_equal(env.add_awgn(x, 0.0, rng), x)

    def test_sigma25_statistics(self):
        clean = np.full((1, 1, 512, 512), 128.0)
        noisy = env.add_awgn(clean, 25.0, np.random.default_rng(71))
        mse = float(((noisy - clean) ** 2).mean())
        assert abs(mse - 625.0) / 625.0 < 0.03
        psnr = 10.0 * np.log10(255.0 ** 2 / mse)
        assert abs(psnr - 20.17) < 0.15

    def test_same_seed_bitwise(self):
        x = np.zeros((2, 1, 16, 16))
        a = env.add_awgn(x, 25.0, 1234)
        b = env.add_awgn(x, 25.0, 1234)
        npt.assert_array_equal(a, b)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            env.add_awgn(np.zeros((1, 1, 2, 2)), -1.0, 0)

    def test_unclipped(self):
        # extreme noise must be allowed to exit [0, 255]
        noisy = env.add_awgn(np.zeros((1, 1, 64, 64)), 100.0, 3)
        assert noisy.min() < 0.0


class TestTransition:
    def _state(self, est, t=0, T=5):
        est = np.asarray(est, dtype=np.float64)
        return env.EnvState(est, np.zeros_like(est), t, T)

    def test_additive_step(self):
        s = self._state(np.full((1, 1, 2, 2), 128.0))
        res = np.full((1, 1, 2, 2), 13.0)
        s2 = env.apply_actions(s, res)
        npt.assert_array_equal(s2.estimate, 141.0)
        assert s2.t == 1 and s.t == 0

    def test_zero_residual_noop(self):
        s = self._state(np.full((1, 1, 3, 3), 77.5))
        s2 = env.apply_actions(s, np.zeros((1, 1, 3, 3)))
        npt.assert_array_equal(s2.estimate, s.estimate)
        assert s2.t == s.t + 1

    def test_inverse_pair_restores_exactly(self, rng):
        # exact for pixel-valued estimates, where x + 13 is representable;
        # full-mantissa doubles can lose the low bit crossing a binade
        est = rng.integers(0, 256, (1, 1, 4, 4)).astype(np.float64)
        s = self._state(est.copy())
        s = env.apply_actions(s, np.full_like(est, 13.0))
        s = env.apply_actions(s, np.full_like(est, -13.0))
        npt.assert_array_equal(s.estimate, est)

    def test_terminal_state_rejects_step(self):
        s = self._state(np.zeros((1, 1, 2, 2)), t=5, T=5)
        with pytest.raises(RuntimeError):
            env.apply_actions(s, np.zeros((1, 1, 2, 2)))

    def test_shape_mismatch(self):
        s = self._state(np.zeros((1, 1, 2, 2)))
        with pytest.raises(ValueError):
            env.apply_actions(s, np.zeros((1, 1, 3, 3)))

    def test_state_validation(self):
        with pytest.raises(ValueError):
            env.EnvState(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)), 0, 5)
        with pytest.raises(ValueError):
            env.EnvState(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)), 6, 5)


class TestReward:
    def test_improvement_positive(self):
        r = env.reward(np.array([[[[100.0]]]]), np.array([[[[110.0]]]]),
                       np.array([[[[105.0]]]]))
        assert r[0, 0, 0, 0] == 75.0

    def test_no_move_zero(self, rng):
        x = rng.random((1, 1, 3, 3))
        prev = rng.random((1, 1, 3, 3))
        npt.assert_array_equal(env.reward(x, prev, prev), 0.0)

    def test_overshoot_negative(self):
        r = env.reward(np.array([[[[100.0]]]]), np.array([[[[102.0]]]]),
                       np.array([[[[95.0]]]]))
        assert r[0, 0, 0, 0] == -21.0

    def test_shape_check(self):
        with pytest.raises(ValueError):
            env.reward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)),
                       np.zeros((1, 1, 2, 3)))


class TestReturns:
    def test_geometric_sum(self):
        ones = [np.ones((1, 1, 1, 1))] * 3
        out = env.discounted_return(ones, 0.5)
        assert out[0][0, 0, 0, 0] == 1.75
        assert out[1][0, 0, 0, 0] == 1.5
        assert out[2][0, 0, 0, 0] == 1.0

    def test_single_stage_identity(self, rng):
        r = rng.normal(size=(1, 1, 2, 2))
        out = env.discounted_return([r], 0.9)
        npt.assert_array_equal(out[0], r)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            env.discounted_return([], 0.9)

    @pytest.mark.parametrize("gamma", [0.0, -0.5, 1.5])
    def test_gamma_range(self, gamma):
        with pytest.raises(ValueError):
            env.discounted_return([np.ones((1, 1, 1, 1))], gamma)

    def test_telescoping_identity(self, rng):
        # gamma=1 total reward telescopes to the squared-error reduction
        clean = rng.random((2, 1, 5, 5)) * 255
        states = [clean + rng.normal(0, 25, clean.shape)]
        rewards = []
        for _ in range(6):
            step = rng.integers(-13, 14, clean.shape).astype(np.float64)
            states.append(states[-1] + step)
            rewards.append(env.reward(clean, states[-2], states[-1]))
        total = env.discounted_return(rewards, 1.0)[0]
        direct = (clean - states[0]) ** 2 - (clean - states[-1]) ** 2
        npt.assert_allclose(total, direct, atol=1e-9)


class TestSampling:
    def test_one_hot_deterministic(self):
        p = np.zeros((1, 5, 2, 2))
        p[:, 3] = 1.0
        idx, logp = env.sample_actions(p, np.random.default_rng(0))
        npt.assert_array_equal(idx, 3)
        npt.assert_array_equal(logp, 0.0)

    def test_uniform_frequencies_within_3_sigma(self):
        n_actions, n = 27, 100_000
        p = np.full((1, n_actions, 1, n), 1.0 / n_actions)
        idx, _ = env.sample_actions(p, np.random.default_rng(2718))
        counts = np.bincount(idx.ravel(), minlength=n_actions)
        expect = n / n_actions
        sigma = np.sqrt(n * (1 / n_actions) * (1 - 1 / n_actions))
        assert np.abs(counts - expect).max() < 3 * sigma

    def test_same_stream_identical(self, rng):
        p = np.full((2, 27, 4, 4), 1.0 / 27)
        a, la = env.sample_actions(p, np.random.default_rng(55))
        b, lb = env.sample_actions(p, np.random.default_rng(55))
        npt.assert_array_equal(a, b)
        npt.assert_array_equal(la, lb)

    def test_log_prob_matches_distribution(self, rng):
        raw = rng.random((1, 6, 3, 3)) + 0.1
        p = raw / raw.sum(axis=1, keepdims=True)
        idx, logp = env.sample_actions(p, np.random.default_rng(7))
        gathered = np.take_along_axis(p, idx[:, None], axis=1)[:, 0]
        npt.assert_allclose(logp, np.log(gathered), rtol=1e-15)

    def test_unnormalized_rejected(self, rng):
        p = np.full((1, 4, 2, 2), 0.3)
        with pytest.raises(ValueError):
            env.sample_actions(p, np.random.default_rng(0))

    def test_skewed_distribution_frequency(self):
        # binomial check on a non-uniform distribution as well
        probs = np.array([0.7, 0.2, 0.1])
        n = 100_000
        p = np.tile(probs[None, :, None, None], (1, 1, 1, n))
        idx, _ = env.sample_actions(p, np.random.default_rng(99))
        counts = np.bincount(idx.ravel(), minlength=3)
        for k in range(3):
            sigma = np.sqrt(n * probs[k] * (1 - probs[k]))
            assert abs(counts[k] - n * probs[k]) < 3 * sigma


class TestGreedy:
    def test_uniform_tie_breaks_low(self):
        p = np.full((1, 27, 3, 3), 1.0 / 27)
        npt.assert_array_equal(env.greedy_actions(p), 0)

    def test_one_hot(self):
        p = np.zeros((1, 27, 2, 2))
        p[:, 20] = 1.0
        npt.assert_array_equal(env.greedy_actions(p), 20)

    def test_argmax_invariance_to_non_maximal(self, rng):
        raw = rng.random((1, 8, 4, 4))
        base = env.greedy_actions(raw)
        perturbed = raw * 0.5  # uniform positive scaling keeps the argmax
        npt.assert_array_equal(env.greedy_actions(perturbed), base)
        # shrink strictly non-maximal entries only
        raw2 = raw.copy()
        mx = raw2.max(axis=1, keepdims=True)
        raw2[raw2 < mx] *= 0.9
        npt.assert_array_equal(env.greedy_actions(raw2), base)


class TestTrajectoryBatch:
    def test_shape_validation(self, rng):
        shape = (3, 2, 4, 4)
        ok = dict(
            action_indices=np.zeros(shape, dtype=np.int64),
            log_probs=np.zeros(shape),
            rewards=np.zeros(shape),
            values=np.zeros(shape),
            returns=np.zeros(shape),
        )
        env.TrajectoryBatch(**ok)
        bad = dict(ok, values=np.zeros((3, 2, 4, 5)))
        with pytest.raises(ValueError):
            env.TrajectoryBatch(**bad)

    def test_n_stages(self):
        shape = (4, 1, 2, 2)
        tb = env.TrajectoryBatch(*(np.zeros(shape) for _ in range(5)))
        assert tb.n_stages == 4
