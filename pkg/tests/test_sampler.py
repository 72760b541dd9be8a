import itertools
import math

import numpy as np
import pytest
from scipy import stats

from keyframe_rl import env as E
from keyframe_rl import nn
from keyframe_rl import sampler as U


def enumerate_draws(scores, k, temperature=1.0):
    """Brute-force ordered-draw probabilities, written without the library's helpers."""
    z = np.asarray(scores, dtype=np.float64) / temperature
    out = {}
    for perm in itertools.permutations(range(len(z)), k):
        left = list(range(len(z)))
        p = 1.0
        for i in perm:
            w = np.exp(z[left] - z[left].max())
            p *= w[left.index(i)] / w.sum()
            left.remove(i)
        out[perm] = p
    return out


@pytest.fixture(scope="module")
def params():
    return U.init_sampler(0)


def test_architecture_shapes_and_size(params):
    a = params.arrays
    assert a["enc0.w"].shape == (32, 4, 3)
    assert a["enc3.w"].shape == (256, 128, 3)
    assert a["dec0.w"].shape == (256, 256 + 256, 3)
    assert a["dec3.w"].shape == (32, 64 + 32, 3)
    assert a["head.w"].shape == (1, 32, 1)
    # 4*32*3+32 + 32*64*3+64 + 64*128*3+128 + 128*256*3+256
    # + 512*256*3+256 + 384*128*3+128 + 192*64*3+64 + 96*32*3+32 + 32+1
    assert params.n_params == 717_153


def test_pad_queries():
    S = np.full((2, 16), 0.5)
    x = U.pad_queries(S)
    assert x.shape == (4, 16)
    np.testing.assert_array_equal(x[:2], S)
    np.testing.assert_array_equal(x[2:], 0.0)
    full = np.random.default_rng(0).random((4, 16))
    np.testing.assert_array_equal(U.pad_queries(full), full)
    with pytest.raises(ValueError):
        U.pad_queries(np.ones((5, 16)))


@pytest.mark.parametrize("n_frames", [16, 48, 100])
def test_output_length_matches_input(params, n_frames):
    S = E.SimilarityMatrix(np.random.default_rng(n_frames).uniform(0.1, 1.0, size=(3, n_frames)))
    scores, _ = U.sampler_forward(params, S)
    assert scores.shape == (n_frames,)


def test_zero_input_gives_equal_scores(params):
    scores, _ = U.forward_batch(params, np.zeros((1, 4, 32)))
    assert np.all(scores == scores[0, 0])


def test_forward_is_deterministic(params):
    x = np.random.default_rng(1).random((2, 4, 32))
    a, _ = U.forward_batch(params, x)
    b, _ = U.forward_batch(params, x)
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_bad_input(params):
    with pytest.raises(ValueError):
        U.forward_batch(params, np.full((1, 4, 16), np.nan))
    with pytest.raises(ValueError):
        U.forward_batch(params, np.zeros((1, 3, 16)))
    with pytest.raises(ValueError):
        U.forward_batch(params, np.zeros((1, 4, 8)))


def test_padding_does_not_leak_past_crop(params):
    # frames beyond N_f are sentinels; they must never be returned or sampled
    x = np.random.default_rng(2).random((1, 4, 20))
    scores, cache = U.forward_batch(params, x)
    assert scores.shape == (1, 20)
    assert cache.conv_inputs[0].shape[2] == 32
    draw = U.sample_without_replacement(scores[0], 20, rng=0)
    assert sorted(draw.indices) == list(range(20))


def test_checkpoint_round_trip(tmp_path, params):
    params.save(tmp_path / "s.ckpt")
    back = U.SamplerParams.load(tmp_path / "s.ckpt")
    for k, v in params.arrays.items():
        assert back.arrays[k].tobytes() == v.tobytes()
    nn.save_checkpoint(tmp_path / "other.ckpt", {"a": np.zeros(2)}, {"kind": "policy"})
    with pytest.raises(nn.CheckpointError):
        U.SamplerParams.load(tmp_path / "other.ckpt")


def test_equal_scores_draw_logprob():
    draw = U.sample_without_replacement(np.zeros(4), 2, rng=0)
    assert draw.total_logprob == pytest.approx(math.log(1 / 4) + math.log(1 / 3), abs=1e-15)
    assert draw.total_logprob == pytest.approx(sum(draw.step_logprobs), abs=0)


@pytest.mark.parametrize("seed", range(20))
def test_enumerated_probabilities_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    k = int(rng.integers(1, min(3, n) + 1))
    scores = rng.normal(0, 2, size=n)
    probs = enumerate_draws(scores, k)
    assert abs(sum(probs.values()) - 1.0) < 1e-9
    lib = sum(math.exp(U.draw_logprob(scores, list(p))) for p in probs)
    assert abs(lib - 1.0) < 1e-9
    for perm, p in list(probs.items())[:20]:
        assert U.draw_logprob(scores, list(perm)) == pytest.approx(math.log(p), abs=1e-12)


def test_peaked_softmax_monte_carlo():
    rng = np.random.default_rng(0)
    scores = np.array([10.0, 0.0, 0.0, 0.0])
    hits = sum(U.sample_without_replacement(scores, 1, rng=rng).indices[0] == 0 for _ in range(100_000))
    expected = math.exp(10) / (math.exp(10) + 3)
    assert expected == pytest.approx(0.99986, abs=1e-5)
    assert abs(hits / 100_000 - expected) <= 0.001


def test_equal_scores_are_uniform_without_replacement():
    rng = np.random.default_rng(1)
    perms = list(itertools.permutations(range(6), 2))
    counts = dict.fromkeys(perms, 0)
    for _ in range(100_000):
        counts[tuple(U.sample_without_replacement(np.zeros(6), 2, rng=rng).indices)] += 1
    _, p = stats.chisquare(list(counts.values()))
    assert p > 0.001


def test_draws_are_distinct():
    rng = np.random.default_rng(2)
    for _ in range(200):
        scores = rng.normal(0, 3, size=10)
        draw = U.sample_without_replacement(scores, 6, rng=rng)
        assert len(set(draw.indices)) == 6
        assert draw.total_logprob <= 0


def test_draw_argument_errors():
    with pytest.raises(ValueError):
        U.sample_without_replacement(np.zeros(3), 4)
    with pytest.raises(ValueError):
        U.sample_without_replacement(np.zeros(3), 1, temperature=0.0)
    with pytest.raises(ValueError):
        U.greedy_select(np.zeros(3), 4)


def test_greedy_examples():
    assert U.greedy_select(np.array([5.0, 4.0, 3.0, 2.0, 1.0]), 3).indices == [0, 1, 2]
    assert U.greedy_select(np.zeros(6), 4).indices == [0, 1, 2, 3]


@pytest.mark.parametrize("seed", range(5))
def test_greedy_is_the_mode(seed):
    rng = np.random.default_rng(seed)
    scores = rng.permutation(7) + rng.uniform(0, 0.1, size=7)
    probs = enumerate_draws(scores, 3)
    mode = max(probs, key=probs.get)
    assert tuple(U.greedy_select(scores, 3).indices) == mode


def test_sequential_logprob_differs_from_single_pass():
    # scoring every pick against the first softmax over-counts mass already taken
    scores = np.array([2.0, 1.0, 0.0, -1.0])
    idx = [0, 1]
    naive = float(np.sum(scores[idx] - np.log(np.exp(scores).sum())))
    assert U.draw_logprob(scores, idx) != pytest.approx(naive, abs=1e-6)
    assert U.draw_logprob(np.zeros(4), idx) != pytest.approx(2 * math.log(0.25), abs=1e-6)


def test_temperature_flattens_step_distribution():
    scores = np.array([3.0, 1.0, 0.0, -2.0])
    spreads = []
    for t in (0.5, 1.0, 4.0, 100.0, 1e6):
        p = np.exp([U.draw_logprob(scores, [i], temperature=t) for i in range(4)])
        spreads.append(p.max() - p.min())
    assert all(a > b for a, b in zip(spreads, spreads[1:]))
    assert spreads[-1] < 1e-5


def test_top_p_restricts_support():
    scores = np.array([5.0, 4.9, 0.0, 0.0, 0.0])
    rng = np.random.default_rng(3)
    for _ in range(50):
        assert U.sample_without_replacement(scores, 1, rng=rng, top_p=0.9).indices[0] in (0, 1)


def test_draw_logprob_grad_finite_differences():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=7)
    idx = [3, 0, 5]
    g = U.draw_logprob_grad(scores, idx, temperature=0.7)
    num = np.zeros(7)
    for i in range(7):
        e = np.zeros(7)
        e[i] = 1e-6
        num[i] = (U.draw_logprob(scores + e, idx, 0.7) - U.draw_logprob(scores - e, idx, 0.7)) / 2e-6
    np.testing.assert_allclose(g, num, atol=1e-8)


def test_reinforce_zero_advantage_gives_zero_gradient(params):
    x = np.random.default_rng(5).random((2, 4, 16))
    scores, cache = U.forward_batch(params, x)
    draws = [U.sample_without_replacement(s, 3, rng=0) for s in scores]
    grads = U.reinforce_backward(params, cache, scores, draws, [0.0, 0.0])
    assert all(not np.any(g) for g in grads.values())


def test_reinforce_matches_finite_differences():
    from keyframe_rl.gradcheck import check_reinforce

    for seed in range(3):
        for r in check_reinforce(seed):
            assert r.passed(1e-4), (seed, r.name, r.max_rel_error)


def test_reinforce_sign_raises_drawn_scores():
    # one descent step on -A log p with A > 0 must raise the drawn frames' scores relative to the rest
    p = U.init_sampler(6, head_scale=0.0)
    x = np.zeros((1, 4, 16))
    x[0, 0] = np.random.default_rng(6).random(16)
    scores, cache = U.forward_batch(p, x)
    assert np.all(scores == 0.0)
    draw = U.sample_without_replacement(scores[0], 2, rng=0)
    grads = U.reinforce_backward(p, cache, scores, [draw], [1.0])
    # with the head at zero, the head gradient is -A * sum_t dlogp/ds_t * h_t
    dz = U.draw_logprob_grad(scores[0], draw.indices)
    assert dz[draw.indices].min() > 0 and dz[np.setdiff1d(range(16), draw.indices)].max() < 0
    expected = -np.einsum("t,ct->c", dz, cache.head_input[0])
    np.testing.assert_allclose(grads["head.w"][0, :, 0], expected, atol=1e-12)
    U.adam_update(p, grads, nn.AdamState(lr=1e-3))
    new, _ = U.forward_batch(p, x)
    assert U.draw_logprob(new[0], draw.indices) > U.draw_logprob(scores[0], draw.indices)


def test_stale_cache_is_rejected():
    p = U.init_sampler(7)
    x = np.random.default_rng(7).random((1, 4, 16))
    scores, cache = U.forward_batch(p, x)
    draw = U.sample_without_replacement(scores[0], 2, rng=0)
    grads = U.reinforce_backward(p, cache, scores, [draw], [1.0])
    U.adam_update(p, grads, nn.AdamState())
    with pytest.raises(U.StaleCacheError):
        U.reinforce_backward(p, cache, scores, [draw], [1.0])


def test_sample_many_replays_single_draws():
    # one draw per call consumes the stream exactly like the scalar sampler
    rng = np.random.default_rng(8)
    for seed in range(50):
        scores = rng.normal(0, 2, size=9)
        single = U.sample_without_replacement(scores, 4, temperature=0.8, rng=seed)
        idx, lp = U.sample_many(scores, 4, 1, temperature=0.8, rng=seed)
        assert idx[0].tolist() == single.indices
        assert lp[0] == pytest.approx(single.total_logprob, abs=1e-12)


def test_sample_many_rows_are_valid_draws():
    scores = np.array([1.0, -0.5, 0.3, 2.0, 0.0, -1.0])
    idx, lp = U.sample_many(scores, 3, 500, rng=9)
    assert idx.shape == (500, 3)
    assert all(len(set(row)) == 3 for row in idx.tolist())
    np.testing.assert_allclose(lp, [U.draw_logprob(scores, list(r)) for r in idx], atol=1e-12)
