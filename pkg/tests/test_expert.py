import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2t.channel import (
    DegenerateChannelError,
    EnvConfig,
    achievable_rate,
    channel_gain,
    complex_normal,
    roll_channels,
)
from d2t.expert import (
    ExpertConfig,
    canonical_phases,
    coherent_phases,
    collect_trajectories,
    exhaustive_phase_oracle,
    make_fewshot_buffer,
    optimize_phases,
    optimize_phases_batch,
    random_policy_rates,
)

CFG = EnvConfig(N=4, M=2, T=5)
FAST = ExpertConfig(restarts=4, max_iter=100)


def rand_H(rng, N, M, scale=1e-4):
    return scale * complex_normal(rng, (N, M))


def test_config_guards():
    for kw in ({"restarts": 0}, {"Q": 1}, {"L": 0}):
        with pytest.raises(ValueError):
            ExpertConfig(**kw)
    sub = ExpertConfig().suboptimal()
    assert (sub.restarts, sub.max_iter) == (1, 10)


def test_single_element_takes_no_steps():
    rng = np.random.default_rng(0)
    H = rand_H(rng, 1, 3)
    res = optimize_phases_batch(H[None], ExpertConfig(), rng)
    assert res.accepted_steps[0] == 0
    # every angle gives the same gain
    grid = np.linspace(-np.pi, np.pi, 7)[:, None]
    assert np.allclose(channel_gain(grid, H), channel_gain(grid[:1], H), rtol=1e-12)


def test_zero_channel_errors():
    with pytest.raises(DegenerateChannelError):
        optimize_phases(np.zeros((3, 2), dtype=complex), ExpertConfig(), np.random.default_rng(0))


def test_single_antenna_matches_coherent_combining():
    rng = np.random.default_rng(1)
    cfg = EnvConfig(N=6, M=1)
    Hs = np.stack([rand_H(rng, 6, 1) for _ in range(50)])
    ours = optimize_phases_batch(Hs, FAST, rng).phases
    # closed form: every reflected path aligned, gain = (sum |H_n|)^2
    closed = coherent_phases(Hs)
    np.testing.assert_allclose(channel_gain(closed, Hs), np.abs(Hs[..., 0]).sum(-1) ** 2, rtol=1e-12)
    diff = np.abs(achievable_rate(ours, Hs, cfg) - achievable_rate(closed, Hs, cfg))
    assert diff.max() < 1e-3


def test_exhaustive_oracle_examples():
    rng = np.random.default_rng(2)
    cfg = EnvConfig(N=1, M=2)
    H = rand_H(rng, 1, 2)
    phases, rate = exhaustive_phase_oracle(H, 16, cfg)
    assert phases.tolist() == [0.0]
    assert rate == pytest.approx(achievable_rate(np.array([1.0]), H, cfg), rel=1e-12)
    with pytest.raises(ValueError, match="1e7"):
        exhaustive_phase_oracle(rand_H(rng, 6, 2), 16, cfg)


def test_exhaustive_oracle_counts_every_candidate(monkeypatch):
    import d2t.expert as ex

    seen = []
    real = ex.channel_gain

    def counting(phases, H):
        seen.append(len(phases))
        return real(phases, H)

    monkeypatch.setattr(ex, "channel_gain", counting)
    exhaustive_phase_oracle(rand_H(np.random.default_rng(3), 2, 2), 16, EnvConfig(N=2, M=2))
    assert sum(seen) == 256


def test_oracle_refines_with_q_doubling():
    rng = np.random.default_rng(4)
    cfg = EnvConfig(N=2, M=2)
    for _ in range(10):
        H = rand_H(rng, 2, 2)
        rates = [exhaustive_phase_oracle(H, Q, cfg)[1] for Q in (2, 4, 8, 16, 32)]
        # nested grids: a finer grid contains every coarse candidate (equal up to rounding)
        assert all(a <= b * (1 + 1e-12) for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("N", [2, 3])
def test_optimizer_reaches_oracle(N):
    rng = np.random.default_rng(10 + N)
    cfg = EnvConfig(N=N, M=2)
    Hs = np.stack([rand_H(rng, N, 2) for _ in range(100)])
    ours = achievable_rate(optimize_phases_batch(Hs, ExpertConfig(), rng).phases, Hs, cfg)
    oracle = np.array([exhaustive_phase_oracle(H, 16, cfg)[1] for H in Hs])
    assert np.all(ours >= 0.99 * oracle)


def test_ascent_is_monotone():
    rng = np.random.default_rng(5)
    Hs = np.stack([rand_H(rng, 8, 4) for _ in range(5)])
    res = optimize_phases_batch(Hs, ExpertConfig(restarts=3, max_iter=60), rng, trace=True)
    assert np.all(np.diff(res.history, axis=0) >= 0)


@given(st.floats(-np.pi, np.pi), st.integers(0, 500))
@settings(max_examples=20, deadline=None)
def test_global_phase_invariance(shift, seed):
    rng = np.random.default_rng(seed)
    H = rand_H(rng, 5, 3)
    phi = optimize_phases(H, FAST, rng)
    cfg = EnvConfig(N=5, M=3)
    assert achievable_rate(phi + shift, H, cfg) == pytest.approx(achievable_rate(phi, H, cfg), rel=1e-12)
    np.testing.assert_allclose(canonical_phases(phi + shift), canonical_phases(phi), atol=1e-12)


def test_canonical_first_element_zero():
    c = canonical_phases(np.array([[1.0, 2.0, -3.0], [0.5, 0.0, 3.0]]))
    assert np.all(c[:, 0] == 0) and np.all(np.abs(c) <= np.pi)


# -- collection ----------------------------------------------------------------


def test_collection_counts_and_tags():
    envs = [CFG.with_(seed=1), CFG.with_(seed=2, d1=70.0), CFG.with_(seed=3, kappa2=2.0)]
    buf = collect_trajectories(envs, FAST, 4)
    assert len(buf) == 3 * 4
    assert buf.env_ids == [0, 1, 2]
    assert all(t.telescopes() for t in buf)
    Hs, ys = roll_channels(envs[1], 2)
    tr = [t for t in buf if t.env_id == 1][2]
    np.testing.assert_array_equal(tr.pilots, ys)
    np.testing.assert_allclose(tr.rewards, achievable_rate(tr.actions, Hs, envs[1]), atol=2**-31)


def test_collection_guards():
    with pytest.raises(ValueError):
        collect_trajectories([], FAST, 1)
    with pytest.raises(ValueError, match="share"):
        collect_trajectories([CFG, CFG.with_(N=5)], FAST, 1)


def test_collection_deterministic():
    a = collect_trajectories([CFG], FAST, 3)
    b = collect_trajectories([CFG], FAST, 3)
    assert a.to_bytes() == b.to_bytes()


def test_expert_doubles_random_rate_at_n16():
    env = EnvConfig(N=16, M=4, T=10, seed=7)
    buf = collect_trajectories([env], ExpertConfig(), 10)
    random = random_policy_rates(env, 10, seed=1)
    assert buf.mean_reward() >= 2 * random.mean()


def test_fewshot_buffer():
    env = EnvConfig(N=8, M=4, T=10, seed=9)
    few = make_fewshot_buffer(env, ExpertConfig(), 6, env_id=3, first_episode=100)
    assert len(few) == 6 and few.env_ids == [3]
    assert len(make_fewshot_buffer(env, ExpertConfig(), 0)) == 0
    full = collect_trajectories([env], ExpertConfig(), 6, first_episode=100)
    random = random_policy_rates(env, 6, first_episode=100, seed=2)
    assert random.mean() < few.mean_reward() <= full.mean_reward()
