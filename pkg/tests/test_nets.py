import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperedit.checkpoint import CorruptCheckpoint, load_checkpoint, save_checkpoint
from hyperedit.env import GenConfig, TaskBatch, generate_task
from hyperedit.nets import (AdamState, Net, NetDims, StaleCacheError, adam_step, policy_forward, policy_net,
                            softmax, time_embed, value_forward, value_net)
from hyperedit.space import p2p_space
from oracles import gradient_check


@pytest.fixture
def task():
    return generate_task(GenConfig(), 0)


def zero_net(sizes):
    d = NetDims(16, sizes)
    return Net(d, {k: np.zeros(s) for k, s in d.shapes().items()})


def test_time_embed_examples():
    e = time_embed(0, 32)
    assert e.shape == (32,)
    np.testing.assert_array_equal(e[:16], 0.0)
    np.testing.assert_array_equal(e[16:], 1.0)
    big = time_embed(np.arange(0, 1000, 7), 32)
    assert np.all(np.abs(big) <= 1.0)
    assert time_embed(3, 4)[1] == pytest.approx(np.sin(3 / 100.0))
    with pytest.raises(ValueError):
        time_embed(1, 7)


def test_zero_weights_give_uniform_and_zero_value(task):
    out = policy_forward(zero_net((2, 2, 6)), task.i_src, 5, task)
    np.testing.assert_array_equal(out.probs[0], [[0.5, 0.5]])
    np.testing.assert_allclose(out.probs[2], np.full((1, 6), 1 / 6))
    assert value_forward(zero_net((1,)), task.i_src, 5, task)[0] == 0.0


def test_softmax_arithmetic():
    np.testing.assert_allclose(softmax(np.array([0.0, np.log(2.0)])), [1 / 3, 2 / 3], rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_normalised_for_random_inputs(seed):
    rng = np.random.default_rng(seed)
    net = policy_net(16, (2, 2, 6), seed=seed)
    tasks = TaskBatch.stack([generate_task(GenConfig(), seed + i) for i in range(4)])
    x = rng.standard_normal((4, 16)) * 5
    out = policy_forward(net, x, rng.integers(1, 51, 4), tasks)
    for p, lp in zip(out.probs, out.logp):
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(np.exp(lp), p, rtol=1e-12)


def test_forward_is_pure(task):
    net = policy_net(16, (2, 2, 6), seed=3)
    a = policy_forward(net, task.i_src, 4, task)
    b = policy_forward(net, task.i_src, 4, task)
    for p, q in zip(a.probs, b.probs):
        np.testing.assert_array_equal(p, q)
    v = value_net(16, seed=1)
    assert value_forward(v, task.i_src, 4, task)[0] == value_forward(v, task.i_src, 4, task)[0]
    assert np.isfinite(value_forward(v, np.full(16, 1e3), 4, task)[0])


def test_forward_rejects_shape_mismatch(task):
    net = policy_net(16, (2, 2, 6), seed=0)
    with pytest.raises(ValueError):
        net.forward(np.zeros(15), [1], np.zeros(15), np.zeros(15))
    with pytest.raises(ValueError):
        net.forward(np.zeros((2, 16)), [1], np.zeros((2, 16)), np.zeros((2, 16)))


def test_policy_and_value_do_not_share_parameters():
    p, v = policy_net(16, (2, 2, 6), seed=0), value_net(16, seed=0)
    assert all(p.params[k] is not v.params[k] for k in v.params if k in p.params)


@pytest.mark.parametrize("draw", range(5))
def test_gradient_matches_finite_differences(draw):
    assert gradient_check(draw) <= 1e-4


def test_zero_upstream_gives_zero_gradients():
    net = policy_net(4, (2, 2, 6), seed=0, F=8, Fc=8, E=8, Ft=8, H=12)
    net.forward(np.ones((2, 4)), [1, 2], np.zeros((2, 4)), np.ones((2, 4)))
    g = net.backward([np.zeros((2, n)) for n in (2, 2, 6)])
    assert all(np.all(v == 0) for v in g.values())


def test_untouched_head_gets_zero_gradient():
    net = policy_net(4, (2, 2, 6), seed=0, F=8, Fc=8, E=8, Ft=8, H=12)
    net.forward(np.ones((2, 4)), [1, 2], np.zeros((2, 4)), np.ones((2, 4)))
    g = net.backward([np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 6))])
    assert np.all(g["head1.W"] == 0) and np.all(g["head2.b"] == 0)
    assert np.any(g["head0.W"] != 0)


def test_stale_cache_rejected():
    net = policy_net(4, (2,), seed=0, F=8, Fc=8, E=8, Ft=8, H=12)
    with pytest.raises(StaleCacheError):
        net.backward([np.ones((1, 2))])
    net.forward(np.ones(4), [1], np.zeros(4), np.ones(4))
    g = net.backward([np.ones((1, 2))])
    adam_step(net, g, AdamState())
    with pytest.raises(StaleCacheError):
        net.backward([np.ones((1, 2))])


def test_adam_first_step_is_lr_times_sign():
    net = policy_net(4, (2,), seed=0, F=8, Fc=8, E=8, Ft=8, H=12)
    before = {k: v.copy() for k, v in net.params.items()}
    rng = np.random.default_rng(0)
    g = {k: rng.standard_normal(v.shape) for k, v in net.params.items()}
    adam_step(net, g, AdamState(), lr=1e-3)
    for k in g:
        np.testing.assert_allclose(net.params[k] - before[k], -1e-3 * np.sign(g[k]), rtol=1e-4)


def test_adam_zero_gradient_leaves_params():
    net = policy_net(4, (2,), seed=0, F=8, Fc=8, E=8, Ft=8, H=12)
    before = {k: v.copy() for k, v in net.params.items()}
    st_ = AdamState()
    for _ in range(10):
        adam_step(net, net.zeros_like(), st_)
    for k in before:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_adam_default_lr_and_shape_check():
    import inspect
    assert inspect.signature(adam_step).parameters["lr"].default == 5e-5
    net = policy_net(4, (2,), seed=0, F=8, Fc=8, E=8, Ft=8, H=12)
    bad = net.zeros_like()
    bad["fc1.W"] = np.zeros((1, 1))
    with pytest.raises(ValueError):
        adam_step(net, bad, AdamState())


def test_checkpoint_round_trip_is_bit_exact(tmp_path, task):
    space = p2p_space()
    pol, val = policy_net(16, space.sizes, seed=7), value_net(16, seed=8)
    path = tmp_path / "ck.json"
    save_checkpoint(path, {"policy": pol, "value": val}, space, "abc123", 7)
    meta, nets, sp = load_checkpoint(path)
    assert meta["config_hash"] == "abc123" and meta["seed"] == 7 and sp == space
    for a, b in zip(policy_forward(pol, task.i_src, 3, task).logp, policy_forward(nets["policy"], task.i_src, 3, task).logp):
        np.testing.assert_array_equal(a, b)
    assert value_forward(val, task.i_src, 3, task)[0] == value_forward(nets["value"], task.i_src, 3, task)[0]


def test_checkpoint_corruption_detected(tmp_path):
    space = p2p_space()
    path = tmp_path / "ck.json"
    save_checkpoint(path, {"policy": policy_net(16, space.sizes, seed=0)}, space, "h", 0)
    text = path.read_text()
    (tmp_path / "trunc.json").write_text(text[: len(text) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "trunc.json")
    (tmp_path / "other.json").write_text('{"format": "x"}')
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "other.json")
    save_checkpoint(path, {"policy": policy_net(16, (2, 2, 5), seed=0)}, space, "h", 0)
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
