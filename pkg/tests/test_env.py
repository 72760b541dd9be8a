import math

import numpy as np
import pytest

from keyframe_rl import env as E


def make_episode(events, n_frames=32, vocab=8, episode_id=0, pass_rate=None):
    evs = [E.Event(*e) for e in events]
    return E.EpisodeSpec(episode_id, n_frames, len(evs), evs, vocab, np.zeros(vocab), 0, pass_rate)


def test_generated_events_fit_and_do_not_overlap():
    cfg = E.EnvConfig(seed=1)
    for i in range(200):
        ep = E.generate_episode(cfg, i)
        spans = sorted((e.start, e.end) for e in ep.events)
        assert all(0 <= s < t <= 128 for s, t in spans)
        assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
        assert len(set(ep.relevant_concepts)) == ep.hop_count


def test_two_hop_episode_example():
    cfg = E.EnvConfig(seed=1, hop_probs=(0.0, 1.0, 0.0))
    ep = E.generate_episode(cfg, 0)
    assert ep.hop_count == 2 and len(ep.events) == 2


def test_generation_is_deterministic():
    cfg = E.EnvConfig(seed=7)
    a, b = E.generate_episode(cfg, 3), E.generate_episode(cfg, 3)
    assert a.to_record() == b.to_record()
    assert a.hint.tobytes() == b.hint.tobytes()
    assert E.generate_episode(cfg, 4).to_record() != a.to_record()


def test_events_that_cannot_fit_are_rejected():
    cfg = E.EnvConfig(n_frames=16, hop_probs=(0.0, 0.0, 1.0), event_width=(8, 8))
    with pytest.raises(ValueError, match="cannot fit"):
        E.generate_episode(cfg, 0)


def test_hint_marks_relevant_concepts():
    cfg = E.EnvConfig(seed=2, hint_noise=0.0)
    ep = E.generate_episode(cfg, 5)
    expected = np.zeros(cfg.vocab_size)
    expected[ep.relevant_concepts] = 1.0
    np.testing.assert_array_equal(ep.hint, expected)


def test_episode_validation():
    with pytest.raises(ValueError):
        make_episode([(0, 4, 10), (1, 8, 12)])  # overlap
    with pytest.raises(ValueError):
        make_episode([(9, 0, 2)])  # concept outside vocabulary
    with pytest.raises(ValueError):
        make_episode([(0, 30, 40)])


def test_noise_free_similarity_rows():
    ep = make_episode([(3, 4, 8)])
    S = E.synthesize_similarity(ep, [3, 5])
    on = np.zeros(32, dtype=bool)
    on[4:8] = True
    np.testing.assert_array_equal(S.values[0, on], 0.9)
    np.testing.assert_array_equal(S.values[0, ~on], 0.1)
    np.testing.assert_array_equal(S.values[1], 0.1)
    assert S.values[1].max() / S.values[1].min() == 1.0


def test_similarity_is_bounded_under_heavy_noise():
    ep = E.generate_episode(E.EnvConfig(seed=3), 0)
    S = E.synthesize_similarity(ep, ep.relevant_concepts, noise=3.0, height_jitter=0.5, spike_rate=0.2, spike_height=0.4)
    assert S.values.min() >= E.S_MIN and S.values.max() <= E.S_MAX


def test_similarity_query_count_limits():
    ep = make_episode([(0, 0, 4)])
    with pytest.raises(ValueError):
        E.synthesize_similarity(ep, [])
    with pytest.raises(ValueError):
        E.synthesize_similarity(ep, [0, 1, 2, 3, 4])


def test_generic_frames_are_shared_across_rows():
    ep = make_episode([(0, 0, 4)], n_frames=64)
    S = E.synthesize_similarity(ep, [1, 2], spike_rate=0.3, spike_height=0.4, seed=5)
    np.testing.assert_array_equal(S.values[0] == 0.4, S.values[1] == 0.4)
    assert np.any(S.values[0] == 0.4)


def test_similarity_row_depends_only_on_concept():
    ep = E.generate_episode(E.EnvConfig(seed=4), 1)
    q = ep.relevant_concepts[0]
    a = E.synthesize_similarity(ep, [q, 7 if q != 7 else 6], noise=0.2, seed=9)
    b = E.synthesize_similarity(ep, [q], noise=0.2, seed=9)
    np.testing.assert_array_equal(a.values[0], b.values[0])


def test_from_cosine_maps_and_clamps():
    S = E.SimilarityMatrix.from_cosine([[-1.0, 0.0, 1.0]])
    np.testing.assert_array_equal(S.values, [[E.S_MIN, 0.5, 1.0]])


@pytest.mark.parametrize("f_events,expected", [(0, 0.25), (2, 0.9), (1, 0.575)])
def test_correct_probability_interpolates(f_events, expected):
    ep = make_episode([(0, 0, 4), (1, 10, 14)])
    sel = [0, 10][:f_events] + [20, 21]
    assert E.correct_probability(ep, sel, E.OracleConfig()) == pytest.approx(expected, abs=1e-15)


def test_oracle_monte_carlo_half_coverage():
    ep = make_episode([(0, 0, 4), (1, 10, 14)])
    cfg = E.OracleConfig(p_hit=0.9)
    rng = np.random.default_rng(0)
    freq = np.mean([E.answer_oracle(ep, [1, 20], cfg, rng=rng) for _ in range(10_000)])
    assert abs(freq - 0.575) <= 0.02


def test_oracle_shared_stream_is_monotone_in_coverage():
    # with the default per-episode stream, more coverage can never turn a hit into a miss
    cfg = E.OracleConfig(rng_seed=3)
    for i in range(200):
        ep = make_episode([(0, 0, 4), (1, 10, 14)], episode_id=i)
        none, half, full = (E.answer_oracle(ep, s, cfg) for s in ([20], [0, 20], [0, 10]))
        assert none <= half <= full


def test_oracle_rejects_bad_selection():
    ep = make_episode([(0, 0, 4)])
    with pytest.raises(ValueError):
        E.answer_oracle(ep, [1, 1], E.OracleConfig())
    with pytest.raises(ValueError):
        E.answer_oracle(ep, [32], E.OracleConfig())


def exact_uniform_success(ep, k, cfg):
    # P(a uniform k-subset touches a window of width w) = 1 - C(n-w, k) / C(n, k)
    n = ep.n_frames
    hits = [1 - math.comb(n - e.width, k) / math.comb(n, k) for e in ep.events]
    return cfg.chance_floor + np.mean(hits) * (cfg.p_hit - cfg.chance_floor)


def test_pass_rate_estimator_is_unbiased():
    ep = make_episode([(0, 3, 7), (1, 20, 22)], n_frames=40)
    truth = exact_uniform_success(ep, 4, E.OracleConfig())
    est = [E.estimate_pass_rate(ep, 4, 8, E.OracleConfig(rng_seed=s)) for s in range(2000)]
    se = math.sqrt(truth * (1 - truth) / (8 * 2000))
    assert abs(np.mean(est) - truth) < 4 * se


def test_pass_rate_without_coverable_events_is_chance():
    # events sit where k=1 draws rarely land; a one-frame window in 400 frames
    eps = [make_episode([(0, 0, 1)], n_frames=400, episode_id=i) for i in range(500)]
    rates = [E.estimate_pass_rate(ep, 1, 8, E.OracleConfig()) for ep in eps]
    assert abs(np.mean(rates) - 0.25) < 0.03


def test_pass_rate_ratio_and_exclusion():
    assert E.estimate_pass_rate(make_episode([(0, 0, 32)]), 1, 8, E.OracleConfig(p_hit=1.0)) == 1.0
    assert make_episode([(0, 0, 4)], pass_rate=1.0).excluded
    assert not make_episode([(0, 0, 4)], pass_rate=0.75).excluded


def test_hard_subset_takes_lowest_pass_rate_per_group():
    eps = [make_episode([(0, 0, 4)], episode_id=i, pass_rate=c) for i, c in enumerate([0.5, 0.25, 0.75, 0.0, 1.0, 0.125])]
    for i, ep in enumerate(eps):
        ep.group_id = i // 3
    hard = E.hard_subset(eps)
    assert [ep.episode_id for ep in hard] == [1, 3]


def test_matrix_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    S = E.SimilarityMatrix(rng.uniform(E.S_MIN, E.S_MAX, size=(3, 17)))
    E.write_matrix(tmp_path / "m.txt", S)
    back = E.read_matrix(tmp_path / "m.txt")
    assert back.values.tobytes() == S.values.tobytes()
    assert (tmp_path / "m.txt").read_text().splitlines()[:2] == ["SIMMAT 1", "3 17"]


@pytest.mark.parametrize(
    "text,match",
    [
        ("SIMMAT 2\n1 2\n0.1 0.2\n", "header"),
        ("SIMMAT 1\n2 8\n" + "0.5 " * 8 + "\n" + ("0.5 " * 8 + "\n") * 2, "dimension mismatch"),
        ("SIMMAT 1\n1 3\n0.5 0.5\n", "dimension mismatch"),
        ("SIMMAT 1\n1 2\n0.5 nan\n", "non-finite"),
        ("SIMMAT 1\n1 2\n0.5 abc\n", "unparseable"),
    ],
)
def test_matrix_format_errors(tmp_path, text, match):
    p = tmp_path / "bad.txt"
    p.write_text(text)
    with pytest.raises(E.FormatError, match=match):
        E.read_matrix(p)


def test_episode_file_round_trip(tmp_path):
    cfg = E.EnvConfig(seed=11)
    eps = E.generate_dataset(cfg, 12)
    E.label_pass_rates(eps, 8, 8)
    E.write_episodes(tmp_path / "e.jsonl", eps)
    back = E.read_episodes(tmp_path / "e.jsonl")
    assert [b.to_record() for b in back] == [e.to_record() for e in eps]


def test_episode_file_errors(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text('{"episode_id": 0}\n')
    with pytest.raises(E.FormatError):
        E.read_episodes(p)
