import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adtransfer.dataset import generate
from adtransfer.env import (
    DIVERGENT,
    REGULAR,
    Action,
    ConfigError,
    EntranceProfile,
    EnvState,
    feature_dim,
    featurize,
    is_divergent_feature,
    load_profiles,
    reset,
    step,
)


def small_profile(**kw):
    base = dict(entrance_id="e", K=2, T_max=1, n_ad_cand=2, n_org_cand=2,
                click_base=0.5, buy_base=0.25, fatigue=0.0, depth_decay=0.0)
    base.update(kw)
    return EntranceProfile(**base)


class TestProfile:
    def test_probability_out_of_range_after_deltas(self):
        with pytest.raises(ConfigError):
            EntranceProfile(entrance_id="bad", click_base=0.9, deltas=(0.2, 0.0, 0.0))

    def test_queue_too_short(self):
        with pytest.raises(ConfigError):
            EntranceProfile(entrance_id="bad", K=3, T_max=8, n_ad_cand=20)

    def test_negative_fatigue_after_deltas(self):
        with pytest.raises(ConfigError):
            EntranceProfile(entrance_id="bad", fatigue=0.05, deltas=(0.0, 0.0, -0.1))

    def test_load_profiles(self, tmp_path, profiles):
        path = tmp_path / "p.json"
        path.write_text(json.dumps({"entrances": {k: p.to_dict() for k, p in profiles.items()}}))
        assert load_profiles(path) == profiles


class TestReset:
    def test_no_divergent_users(self, profiles):
        p = profiles["target"].with_(divergent_user_frac=0.0)
        assert {reset(p, s).user_type for s in range(200)} == {REGULAR}

    def test_all_divergent_users(self, profiles):
        p = profiles["target"].with_(divergent_user_frac=1.0)
        assert {reset(p, s).user_type for s in range(200)} == {DIVERGENT}

    def test_fixed_seed_is_deterministic(self, profiles):
        assert reset(profiles["source"], 7) == reset(profiles["source"], 7)

    def test_queue_lengths(self, profiles):
        p = profiles["source"]
        s = reset(p, 0)
        assert len(s.ad_queue) == p.n_ad_cand and len(s.org_queue) == p.n_org_cand
        assert s.screen_idx == 0 and not s.terminated


class TestAction:
    @pytest.mark.parametrize("K", [1, 2, 3, 5])
    def test_index_bits_bijection(self, K):
        seen = set()
        for i in range(2 ** K):
            a = Action.from_index(i, K)
            assert a.index == i
            assert a.n_ads == bin(i).count("1")
            seen.add(a.bits)
        assert len(seen) == 2 ** K

    def test_bit_order(self):
        assert Action.from_index(1, 3).bits == (1, 0, 0)
        assert Action.from_index(4, 3).bits == (0, 0, 1)


class TestStep:
    def test_no_ads_no_ad_revenue(self, profiles):
        p = profiles["target"]
        rng = np.random.default_rng(0)
        for seed in range(50):
            out = step(p, reset(p, seed), 0, rng)
            assert out.r_ad == 0.0

    def test_expected_reward_hand_evaluation(self):
        p = small_profile()
        state = EnvState(REGULAR, 0, (1.0, 3.0), (2.0, 5.0))
        out = step(p, state, Action((1, 0)), np.random.default_rng(0), expected=True)
        assert out.r_ad == 0.5
        assert out.r_fee == 0.5
        assert out.r == 1.0

    def test_divergent_deltas_apply(self):
        p = small_profile(deltas=(0.25, 0.0, 0.0))
        state = EnvState(DIVERGENT, 0, (1.0, 3.0), (2.0, 5.0))
        out = step(p, state, Action((1, 0)), np.random.default_rng(0), expected=True)
        assert out.r_ad == 0.75

    def test_full_fatigue_terminates(self, profiles):
        p = profiles["source"].with_(fatigue=0.5, deltas=(0.0, 0.0, 0.0))
        for seed in range(100):
            out = step(p, reset(p, seed), 7, np.random.default_rng(seed))
            assert out.terminal

    def test_last_screen_terminates(self, profiles):
        p = profiles["source"].with_(fatigue=0.0, depth_decay=0.0)
        state = reset(p, 0)
        rng = np.random.default_rng(0)
        for t in range(p.T_max):
            out = step(p, state, 3, rng)
            assert out.terminal == (t == p.T_max - 1)
            state = out.next_state

    def test_step_on_terminated_raises(self, profiles):
        p = profiles["source"]
        state = reset(p, 0)
        done = EnvState(state.user_type, 1, state.ad_queue, state.org_queue, terminated=True)
        with pytest.raises(RuntimeError):
            step(p, done, 0, np.random.default_rng(0))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), action=st.integers(0, 7), expected=st.booleans())
    def test_reward_split_and_queue_consumption(self, seed, action, expected):
        p = EntranceProfile(entrance_id="h", divergent_user_frac=0.5, deltas=(0.2, -0.05, 0.02))
        state = reset(p, seed)
        out = step(p, state, action, np.random.default_rng(seed), expected=expected)
        n_ads = bin(action).count("1")
        assert out.r == out.r_ad + out.r_fee
        assert out.r_ad >= 0 and out.r_fee >= 0
        assert out.next_state.ad_queue == state.ad_queue[n_ads:]
        assert out.next_state.org_queue == state.org_queue[p.K - n_ads:]

    def test_expected_mode_pure_in_seed(self, profiles):
        p = profiles["target"]
        state = reset(p, 3)
        a = step(p, state, 5, np.random.default_rng(11), expected=True)
        b = step(p, state, 5, np.random.default_rng(11), expected=True)
        assert a == b


class TestFeaturize:
    def test_layout_dimension(self, profiles):
        p = profiles["source"]
        L = 2 * p.K
        assert featurize(reset(p, 0), p).shape == (2 * L + 1 + 2 + 2,)
        assert feature_dim(p.K) == 2 * L + 5

    def test_empty_queues_pad_zero(self, profiles):
        p = profiles["source"]
        f = featurize(EnvState(REGULAR, 2, (), ()), p)
        L = 2 * p.K
        assert np.all(f[: 2 * L] == 0.0)
        assert f[2 * L + 1] == 0.0 and f[2 * L + 2] == 0.0

    def test_equal_states_equal_vectors(self, profiles):
        p = profiles["source"]
        s1 = EnvState(DIVERGENT, 1, (0.5, 0.7), (0.1,))
        s2 = EnvState(DIVERGENT, 1, (0.5, 0.7), (0.1,))
        assert np.array_equal(featurize(s1, p), featurize(s2, p))

    def test_user_type_one_hot(self, profiles):
        p = profiles["source"]
        reg = featurize(EnvState(REGULAR, 0, (1.0,), (1.0,)), p)
        div = featurize(EnvState(DIVERGENT, 0, (1.0,), (1.0,)), p)
        assert list(reg[-2:]) == [1.0, 0.0] and list(div[-2:]) == [0.0, 1.0]
        assert not is_divergent_feature(reg) and is_divergent_feature(div)


def test_zero_deltas_match_across_entrances(profiles):
    """Same base parameters and no deltas: matched-seed rollouts coincide."""
    a = profiles["source"]
    b = a.with_(entrance_id="other")
    da = generate(a, None, 30, seed=5)
    db = generate(b, None, 30, seed=5)
    for col in ("state_feat", "action_index", "r", "r_ad", "r_fee", "next_state_feat", "terminal"):
        assert np.array_equal(getattr(da, col), getattr(db, col))


def test_no_divergent_users_make_deltas_irrelevant(profiles):
    a = profiles["source"].with_(divergent_user_frac=0.0)
    b = profiles["target"].with_(divergent_user_frac=0.0, entrance_id="source")
    assert generate(a, None, 30, seed=2).equals(generate(b, None, 30, seed=2))
