import numpy as np
import pytest

from adtransfer.dataset import (
    Dataset,
    DatasetParseError,
    annotate_nsr,
    concat,
    generate,
    load,
    save,
)
from adtransfer.env import EntranceProfile

from oracles import brute_force_nsr


def hand_dataset(rewards_per_episode):
    ep, t, r = [], [], []
    for e, rewards in enumerate(rewards_per_episode):
        for i, x in enumerate(rewards):
            ep.append(e)
            t.append(i)
            r.append(x)
    n = len(r)
    terminal = [i == len(rw) - 1 for rw in rewards_per_episode for i in range(len(rw))]
    return Dataset(
        entrance_id=["x"] * n, episode_id=ep, t=t, state_feat=np.zeros((n, 3)),
        action_index=[0] * n, r=r, r_ad=r, r_fee=[0.0] * n,
        next_state_feat=np.zeros((n, 3)), terminal=terminal,
    )


class TestGenerate:
    def test_single_request_single_screen(self):
        p = EntranceProfile(entrance_id="e", T_max=1, n_ad_cand=3, n_org_cand=3)
        assert len(generate(p, None, 1, seed=0)) == 1

    def test_uniform_policy_frequencies(self):
        p = EntranceProfile(entrance_id="e", T_max=1, n_ad_cand=3, n_org_cand=3)
        n = 16000
        d = generate(p, None, n, seed=3)
        counts = np.bincount(d.action_index, minlength=8)
        sigma = np.sqrt(n * (1 / 8) * (7 / 8))
        assert np.all(np.abs(counts - n / 8) < 3 * sigma)

    def test_same_seed_byte_identical(self, tmp_path, profiles):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save(generate(profiles["target"], None, 25, seed=9), a)
        save(generate(profiles["target"], None, 25, seed=9), b)
        assert a.read_bytes() == b.read_bytes()

    def test_different_seed_differs(self, profiles):
        a = generate(profiles["target"], None, 25, seed=1)
        b = generate(profiles["target"], None, 25, seed=2)
        assert not a.equals(b)

    def test_reward_split_and_action_range(self, profiles):
        d = generate(profiles["target"], None, 200, seed=0)
        assert np.array_equal(d.r, d.r_ad + d.r_fee)
        assert d.action_index.min() >= 0 and d.action_index.max() < 8

    def test_episodes_contiguous_and_terminal_last(self, profiles):
        d = generate(profiles["source"], None, 50, seed=4)
        bounds = d.episode_bounds()
        for s, e in zip(bounds[:-1], bounds[1:]):
            assert list(d.t[s:e]) == list(range(e - s))
            assert d.terminal[e - 1] and not d.terminal[s : e - 1].any()

    def test_epsilon_greedy_policy(self, profiles):
        from adtransfer.agent import QAgent
        from adtransfer.dataset import epsilon_greedy_policy

        d0 = generate(profiles["source"], None, 1, seed=0)
        agent = QAgent(d0.feat_dim, 8)
        d = generate(profiles["source"], epsilon_greedy_policy(agent, 0.0), 20, seed=0)
        assert np.array_equal(d.action_index, agent.greedy(d.state_feat))


class TestAnnotateNsr:
    def test_one_step_is_reward(self, profiles):
        d = annotate_nsr(generate(profiles["target"], None, 40, seed=0), 1, 0.9)
        assert np.array_equal(d.r_N, d.r)

    def test_hand_example(self):
        d = annotate_nsr(hand_dataset([[1.0, 2.0, 4.0]]), 3, 0.5)
        assert d.r_N[0] == 3.0

    def test_truncates_at_episode_end(self):
        d = annotate_nsr(hand_dataset([[1.5, 2.25], [7.0]]), 5, 1.0)
        assert d.r_N[0] == 1.5 + 2.25
        assert d.r_N[1] == 2.25
        assert d.r_N[2] == 7.0

    @pytest.mark.parametrize("N,gamma", [(1, 0.9), (3, 0.9), (5, 0.5), (12, 1.0), (4, 0.0)])
    def test_matches_brute_force(self, profiles, N, gamma):
        d = generate(profiles["target"], None, 80, seed=N)
        assert np.array_equal(annotate_nsr(d, N, gamma).r_N, brute_force_nsr(d, N, gamma))

    def test_idempotent(self, profiles):
        d = annotate_nsr(generate(profiles["source"], None, 30, seed=1), 3, 0.9)
        assert np.array_equal(annotate_nsr(d, 3, 0.9).r_N, d.r_N)

    def test_merged_entrances_do_not_leak(self, profiles):
        a = generate(profiles["source"], None, 5, seed=1)
        b = generate(profiles["target"], None, 5, seed=1)
        m = concat([a, b])
        assert np.array_equal(annotate_nsr(m, 4, 0.9).r_N, brute_force_nsr(m, 4, 0.9))

    def test_rejects_bad_arguments(self):
        d = hand_dataset([[1.0]])
        with pytest.raises(ValueError):
            annotate_nsr(d, 0, 0.9)
        with pytest.raises(ValueError):
            annotate_nsr(d, 2, 1.5)


class TestSerialization:
    def test_round_trip(self, tmp_path, profiles):
        d = annotate_nsr(generate(profiles["target"], None, 30, seed=0), 3, 0.9)
        d = d.copy(w=np.linspace(0, 1, len(d)))
        save(d, tmp_path / "d.jsonl")
        assert load(tmp_path / "d.jsonl").equals(d)

    def test_round_trip_unannotated(self, tmp_path, profiles):
        d = generate(profiles["source"], None, 10, seed=0)
        save(d, tmp_path / "d.jsonl")
        back = load(tmp_path / "d.jsonl")
        assert back.equals(d) and not back.has_nsr and not back.has_weights

    def test_gzip_round_trip_is_byte_stable(self, tmp_path, profiles):
        d = generate(profiles["source"], None, 10, seed=0)
        save(d, tmp_path / "a.jsonl.gz")
        save(d, tmp_path / "b.jsonl.gz")
        assert (tmp_path / "a.jsonl.gz").read_bytes() == (tmp_path / "b.jsonl.gz").read_bytes()
        assert load(tmp_path / "a.jsonl.gz").equals(d)

    def test_empty_dataset_empty_file(self, tmp_path):
        empty = hand_dataset([]).subset(slice(0, 0))
        save(empty, tmp_path / "e.jsonl")
        assert (tmp_path / "e.jsonl").read_bytes() == b""
        assert len(load(tmp_path / "e.jsonl")) == 0

    def test_field_names(self, tmp_path, profiles):
        import json

        save(generate(profiles["source"], None, 1, seed=0), tmp_path / "d.jsonl")
        lines = (tmp_path / "d.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["schema"] == "adtransfer.transitions"
        assert list(json.loads(lines[1])) == [
            "entrance_id", "episode_id", "t", "state_feat", "action_index",
            "r", "r_ad", "r_fee", "r_N", "next_state_feat", "w",
        ]

    def test_truncated_final_line_names_line(self, tmp_path, profiles):
        path = tmp_path / "d.jsonl"
        save(generate(profiles["source"], None, 3, seed=0), path)
        text = path.read_text()
        n_lines = len(text.splitlines())
        path.write_text(text[: len(text) - 40])
        with pytest.raises(DatasetParseError) as err:
            load(path)
        assert err.value.lineno == n_lines
        assert f"line {n_lines}" in str(err.value)
