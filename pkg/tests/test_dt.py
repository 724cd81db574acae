import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from d2t.channel import EnvConfig, IRSEnv, quantize_reward
from d2t.dt import (
    CachedStates,
    DecisionTransformer,
    DTConfig,
    Trajectory,
    TrajectoryBuffer,
    angular_mse,
    compute_returns_to_go,
    dt_loss,
    dt_train_step,
    fit_scales,
    make_batch,
    perfect_csi,
    predict_action,
    rollout,
    wrapped_angle_error,
)
from d2t.nn import AdamW, NamedTensorStore

TINY = DTConfig(n_layer=2, width=32, heads=4, dropout=0.0, context=5, max_timestep=5)


def tiny_model(state_dim=4, n=3, config=TINY, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return DecisionTransformer(state_dim, n, config).to(dtype)


def random_window(rng, b=2, w=5, state_dim=4, n=3):
    return (
        rng.normal(size=(b, w)),
        rng.normal(size=(b, w, state_dim)),
        rng.uniform(-np.pi, np.pi, size=(b, w, n)),
        np.tile(np.arange(w), (b, 1)),
    )


def random_trajectory(rng, T=5, N=2, M=1, n_pilots=3, env_id=0):
    rewards = quantize_reward(rng.uniform(0, 3, size=T))
    return Trajectory.from_rollout(
        rng.normal(size=(T, 2 * N * M)),
        rng.uniform(-np.pi, np.pi, size=(T, N)),
        rewards,
        rng.normal(size=(T, 2 * n_pilots)),
        env_id,
    )


# -- returns-to-go -------------------------------------------------------------


def test_returns_to_go_examples():
    assert compute_returns_to_go([1, 2, 3]).tolist() == [6, 5, 3]
    assert compute_returns_to_go([0, 0, 0]).tolist() == [0, 0, 0]
    assert compute_returns_to_go([2.5]).tolist() == [2.5]
    with pytest.raises(ValueError):
        compute_returns_to_go([])


@given(st.lists(st.floats(0, 20, allow_nan=False), min_size=1, max_size=30))
def test_quantised_returns_telescope_exactly(raw):
    r = quantize_reward(np.array(raw))
    R = compute_returns_to_go(r)
    assert np.all(R[:-1] - R[1:] == r[:-1]) and R[-1] == r[-1]
    assert np.array_equal(R, np.cumsum(r[::-1])[::-1])


def test_trajectory_rejects_inconsistent_lengths():
    rng = np.random.default_rng(0)
    tr = random_trajectory(rng)
    with pytest.raises(ValueError, match="actions"):
        Trajectory(tr.returns_to_go, tr.states, tr.actions[:-1], tr.rewards, tr.pilots)


def test_buffer_rejects_broken_telescoping():
    rng = np.random.default_rng(0)
    tr = random_trajectory(rng)
    buf = TrajectoryBuffer(2, 1, 5, 3)
    buf.add(tr)
    bad = Trajectory(tr.returns_to_go + 1.0, tr.states, tr.actions, tr.rewards, tr.pilots)
    with pytest.raises(ValueError, match="telescope"):
        buf.add(bad)


# -- buffer persistence --------------------------------------------------------


def test_buffer_round_trip_and_layout(tmp_path):
    rng = np.random.default_rng(1)
    buf = TrajectoryBuffer(2, 1, 5, 3)
    for i in range(4):
        buf.add(random_trajectory(rng, env_id=i % 2))
    path = tmp_path / "b.d2tb"
    buf.save(path)
    data = path.read_bytes()
    assert data[:8] == b"D2TTRAJ\0"
    header = np.frombuffer(data[8:28], dtype="<u4")
    assert header.tolist() == [1, 2, 1, 5, 3]
    assert int(np.frombuffer(data[28:36], dtype="<u8")[0]) == 4
    per_traj = 8 + 8 * (5 + 5 + 5 * 4 + 5 * 2 + 5 * 6)
    assert len(data) == 36 + 4 * per_traj
    back = TrajectoryBuffer.load(path)
    assert back.to_bytes() == data
    assert back.env_ids == [0, 1]
    for a, b in zip(buf, back):
        assert np.array_equal(a.states, b.states) and a.env_id == b.env_id
    with pytest.raises(ValueError, match="trailing"):
        TrajectoryBuffer.from_bytes(data + b"\0")
    with pytest.raises(ValueError, match="not a trajectory"):
        TrajectoryBuffer.from_bytes(b"XXXXXXXX" + data[8:])


def test_jsonl_export(tmp_path):
    import json

    rng = np.random.default_rng(2)
    buf = TrajectoryBuffer(2, 1, 5, 3)
    buf.add(random_trajectory(rng))
    buf.export_jsonl(tmp_path / "b.jsonl")
    rows = [json.loads(line) for line in open(tmp_path / "b.jsonl")]
    assert len(rows) == 1 and rows[0]["rewards"] == buf[0].rewards.tolist()


def test_buffer_capacity_evicts_oldest():
    rng = np.random.default_rng(3)
    buf = TrajectoryBuffer(2, 1, 5, 3, capacity=2)
    trs = [random_trajectory(rng, env_id=i) for i in range(3)]
    for tr in trs:
        buf.add(tr)
    assert [t.env_id for t in buf] == [1, 2]


# -- tokenisation and forward --------------------------------------------------


def test_config_invariants():
    with pytest.raises(ValueError):
        DTConfig(width=30, heads=4)
    with pytest.raises(ValueError):
        DTConfig(context=21, max_timestep=20)


def test_tokens_shape_and_order():
    model = tiny_model()
    rtg, s, a, ts = (torch.as_tensor(x) for x in random_window(np.random.default_rng(0), w=4))
    tok = model.tokenize(rtg, s, a, ts)
    assert tok.shape == (2, 12, 32)
    pos = model.embed_timestep(ts)
    r_tok = model.embed_return(rtg[..., None]) + pos
    s_tok = model.embed_state(s) + pos
    a_tok = model.embed_action(torch.cat([a.cos(), a.sin()], -1)) + pos
    assert torch.equal(tok[:, 0::3], r_tok)
    assert torch.equal(tok[:, 1::3], s_tok)
    assert torch.equal(tok[:, 2::3], a_tok)


def test_zero_state_token_is_position_plus_bias():
    model = tiny_model()
    ts = torch.tensor([[0, 3]])
    tok = model.tokenize(torch.zeros(1, 2, dtype=torch.float64), torch.zeros(1, 2, 4, dtype=torch.float64),
                         torch.zeros(1, 2, 3, dtype=torch.float64), ts)
    expected = model.embed_timestep(ts) + model.embed_state.bias
    assert torch.allclose(tok[:, 1::3], expected, atol=1e-15)


def test_window_longer_than_context_rejected():
    model = tiny_model()
    rtg, s, a, ts = (torch.as_tensor(x) for x in random_window(np.random.default_rng(0), w=5))
    rtg6 = torch.cat([rtg, rtg[:, :1]], 1)
    with pytest.raises(ValueError, match="context"):
        model.tokenize(rtg6, torch.cat([s, s[:, :1]], 1), torch.cat([a, a[:, :1]], 1), torch.cat([ts, ts[:, :1]], 1))


def test_tokens_before_a_change_are_identical():
    model = tiny_model()
    rtg, s, a, ts = (torch.as_tensor(np.array(x)) for x in random_window(np.random.default_rng(0)))
    s2 = s.clone()
    s2[:, 3] += 1.0
    t1, t2 = model.tokenize(rtg, s, a, ts), model.tokenize(rtg, s2, a, ts)
    assert torch.equal(t1[:, :10], t2[:, :10]) and not torch.equal(t1[:, 10], t2[:, 10])


@given(st.integers(0, 4), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_prediction_ignores_current_and_future_actions(t, seed):
    model = tiny_model()
    rng = np.random.default_rng(seed)
    rtg, s, a, ts = (torch.as_tensor(np.array(x)) for x in random_window(rng))
    base = model(rtg, s, a, ts)
    a2 = a.clone()
    a2[:, t:] = torch.as_tensor(rng.uniform(-np.pi, np.pi, size=a2[:, t:].shape))
    out = model(rtg, s, a2, ts)
    assert torch.allclose(out[:, : t + 1], base[:, : t + 1], atol=1e-12)
    if t < 4:
        assert not torch.allclose(out[:, t + 1 :], base[:, t + 1 :], atol=1e-9)


def test_return_conditioning_is_live():
    model = tiny_model()
    rtg, s, a, ts = (torch.as_tensor(np.array(x)) for x in random_window(np.random.default_rng(4)))
    out1 = model(rtg, s, a, ts)
    out2 = model(rtg + 0.5, s, a, ts)
    assert out1.shape == (2, 5, 3)
    assert not torch.allclose(out1, out2, atol=1e-6)


def test_predicted_angles_are_bounded():
    model = tiny_model()
    rng = np.random.default_rng(0)
    rtg, s, a, ts = (torch.as_tensor(np.array(x)) for x in random_window(rng))
    with torch.no_grad():
        for p in model.action_head.parameters():
            p.mul_(50.0)
    out = model(rtg * 100, s * 100, a, ts)
    assert torch.all(out.abs() <= math.pi)


# -- loss ----------------------------------------------------------------------


def test_angular_loss_examples():
    a = torch.tensor([0.1, -3.0, 2.0], dtype=torch.float64)
    assert float(angular_mse(a, a)) == 0.0
    assert float(angular_mse(a, a + 2 * math.pi)) < 1e-28
    # 3.1 and -3.1 are 0.083 apart across the wrap, not 6.2
    err = wrapped_angle_error(torch.tensor([3.1]), torch.tensor([-3.1]))
    assert float(err.abs()) == pytest.approx(2 * math.pi - 6.2, abs=1e-6)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_wrapped_error_is_min_distance(p, q):
    d = abs(float(wrapped_angle_error(torch.tensor(p, dtype=torch.float64), torch.tensor(q, dtype=torch.float64))))
    raw = abs(p - q) % (2 * math.pi)
    assert d == pytest.approx(min(raw, 2 * math.pi - raw), abs=1e-9)


def test_memorises_single_trajectory():
    rng = np.random.default_rng(0)
    buf = TrajectoryBuffer(2, 1, 5, 3)
    buf.add(random_trajectory(rng))
    model = tiny_model(n=2, dtype=torch.float32, config=DTConfig(n_layer=2, width=64, heads=4, dropout=0.0, context=5, max_timestep=5))
    fit_scales(model, buf)
    opt = AdamW(model.parameters(), lr=1e-3, weight_decay=1e-4)
    g = np.random.default_rng(1)
    tr = buf[0]
    full = make_batch(model, tr.returns_to_go[None], tr.states[None], tr.actions[None], np.arange(5)[None])
    with torch.no_grad():
        model.eval()
        initial = float(dt_loss(model, full))
    for _ in range(500):
        dt_train_step(model, buf, opt, 4, g)
    with torch.no_grad():
        model.eval()
        final = float(dt_loss(model, full))
    assert final < 0.01 * initial


def test_fit_scales():
    rng = np.random.default_rng(0)
    buf = TrajectoryBuffer(2, 1, 5, 3)
    for _ in range(3):
        buf.add(random_trajectory(rng))
    model = tiny_model()
    fit_scales(model, buf)
    assert float(model.rtg_scale) == 5 * buf.stacked("rewards").max()
    assert float(model.state_scale) == pytest.approx(np.sqrt(np.mean(buf.stacked("states") ** 2)))


def test_dt_store_round_trip(tmp_path):
    model = tiny_model()
    model.state_scale.fill_(3.5)
    model.to_store({"note": 1}).save(tmp_path / "dt.d2ts")
    back = DecisionTransformer.from_store(NamedTensorStore.load(tmp_path / "dt.d2ts"))
    assert float(back.state_scale) == 3.5 and back.config == model.config
    rtg, s, a, ts = (torch.as_tensor(np.array(x)) for x in random_window(np.random.default_rng(0)))
    assert torch.equal(model(rtg, s, a, ts), back(rtg, s, a, ts))


# -- rollout -------------------------------------------------------------------

ENV = EnvConfig(N=3, M=2, T=7, seed=11)


def rollout_model(context=7):
    cfg = DTConfig(n_layer=1, width=16, heads=2, dropout=0.1, context=context, max_timestep=7)
    return tiny_model(state_dim=2 * ENV.N * ENV.M, n=ENV.N, config=cfg)


def test_rollout_return_to_go_decrements():
    model = rollout_model()
    rec = rollout(model, ENV, [0, 1], target_return=1.0)
    assert rec.returns_to_go[:, 0].tolist() == [1.0, 1.0]
    assert np.all(rec.returns_to_go[:, :-1] - rec.returns_to_go[:, 1:] == rec.rewards)
    assert rec.rewards.shape == (2, 7) and np.all(rec.rewards > 0)
    # first-reward example: R_2 = target - r_1
    np.testing.assert_array_equal(rec.returns_to_go[:, 1], 1.0 - rec.rewards[:, 0])


def test_rollout_rewards_match_environment():
    model = rollout_model()
    rec = rollout(model, ENV, [3], target_return=20.0)
    env = IRSEnv(ENV, 3)
    env.reset()
    for t in range(ENV.T):
        assert env.step(rec.actions[0, t]).reward == rec.rewards[0, t]


def test_rollout_with_perfect_csi_sees_true_channel():
    from d2t.channel import roll_channels
    from d2t.diffusion import channel_to_vector

    model = rollout_model()
    rec = rollout(model, ENV, [5], target_return=10.0, states_from=perfect_csi)
    Hs, _ = roll_channels(ENV, 5)
    np.testing.assert_array_equal(rec.states[0], channel_to_vector(Hs))


def test_stub_provider_code_path():
    """D2T and DT-PC share one rollout; a stub returning the truth reproduces DT-PC exactly."""
    model = rollout_model()
    calls = []

    def stub(H, pilots, episodes, t):
        calls.append(t)
        return H.copy()

    a = rollout(model, ENV, [0, 2], 10.0, states_from=stub)
    b = rollout(model, ENV, [0, 2], 10.0)
    assert calls == list(range(ENV.T))
    assert np.array_equal(a.rewards, b.rewards) and np.array_equal(a.actions, b.actions)


def test_context_window_truncates_history():
    model = rollout_model(context=3)
    rng = np.random.default_rng(0)
    rtg = rng.normal(size=(1, 6))
    s = rng.normal(size=(1, 6, 12))
    a = rng.uniform(-3, 3, size=(1, 6, 3))
    full = predict_action(model, rtg, s, a)
    short = predict_action(model, rtg[:, 3:], s[:, 3:], a[:, 3:])
    # same tokens except the timestep ids: re-run the truncated window with its true positions
    b = make_batch(model, rtg[:, 3:], s[:, 3:], a[:, 3:], np.arange(3, 6)[None])
    with torch.no_grad():
        ref = model(b.returns_to_go, b.states, b.actions, b.timesteps)[:, -1].numpy()
    np.testing.assert_array_equal(full, ref)
    assert not np.array_equal(full, short)
    # perturbing history outside the window leaves the action unchanged
    rtg2, s2 = rtg.copy(), s.copy()
    rtg2[:, :3] += 5
    s2[:, :3] += 5
    np.testing.assert_array_equal(predict_action(model, rtg2, s2, a), full)


def test_cached_states_reuse():
    seen = []

    def provider(H, pilots, episodes, t):
        seen.append(list(episodes))
        return H * 2

    cache = CachedStates(provider)
    cache.prefill(ENV, [0, 1])
    assert len(seen) == 1 and len(cache.cache) == 2 * ENV.T
    model = rollout_model()
    a = rollout(model, ENV, [0, 1], 5.0, states_from=cache)
    assert len(seen) == 1
    b = rollout(model, ENV, [0, 1], 5.0, states_from=lambda H, y, e, t: H * 2)
    assert np.array_equal(a.states, b.states)
