import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recurrent_octomap.errors import ArgumentError, ConfigurationError
from recurrent_octomap.fusion import (FusionBackend, FusionEngine, bayes_update, format_mntd, fuse_stream,
                                      nap_gate, nap_keep, parse_mntd, recurrent_update, uniform,
                                      write_prob_history)
from recurrent_octomap.neural import init_lstm, lstm_forward_sequence, lstm_step, decode
from recurrent_octomap.voxel_map import MapConfig, pool_by_cell

from oracles import mp_bayes_product


def _params(seed=0, d=5, h=6, layers=2, c=4):
    return init_lstm(d, h, layers, c, np.random.default_rng(seed))


def _gapped_frames(rng, n):
    return np.cumsum(rng.integers(1, 5, size=n)) + int(rng.integers(0, 100))


def _plain_chain(params, xs, reset_before):
    """Reference: explicit lstm_step loop, zeroing state where reset_before[t]."""
    L, H = params.num_layers, params.hidden_dim
    S, h = np.zeros((L, H)), np.zeros((L, H))
    out = []
    for t, x in enumerate(xs):
        if reset_before[t]:
            S, h = np.zeros((L, H)), np.zeros((L, H))
        S, h = lstm_step(params, x, S, h)
        out.append(decode(params, h[-1]))
    return np.array(out)


# ------------------------------------------------------------------ MNTD parsing

@pytest.mark.parametrize("text,frames", [("0", 0.0), (7, 7.0), ("inf", math.inf), ("day", 864000.0),
                                         ("30s", 300.0), ("1.5s", 15.0)])
def test_parse_mntd(text, frames):
    assert parse_mntd(text) == frames


@pytest.mark.parametrize("bad", ["-1", -3, "soon", "xs"])
def test_parse_mntd_rejects_garbage(bad):
    with pytest.raises(ArgumentError):
        parse_mntd(bad)


def test_format_mntd_round_trips_named_values():
    for v in ("inf", "day", "100"):
        assert format_mntd(parse_mntd(v)) == v


# ------------------------------------------------------------------ Bayesian update

def test_uniform_prior_returns_normalized_likelihood():
    np.testing.assert_allclose(bayes_update(uniform(4), [0.2, 0.2, 0.4, 0.2]), [0.2, 0.2, 0.4, 0.2], atol=1e-15)


def test_two_agreeing_observations_sharpen():
    p = bayes_update(bayes_update(uniform(2), [0.8, 0.2]), [0.8, 0.2])
    np.testing.assert_allclose(p, [16 / 17, 1 / 17], atol=1e-15)


def test_zero_likelihood_is_floored_not_fatal():
    p = bayes_update(uniform(2), [0.0, 1.0])
    assert np.isfinite(p).all() and p[0] > 0 and p.sum() == pytest.approx(1.0)


def test_bayes_shape_mismatch():
    with pytest.raises(ArgumentError):
        bayes_update(uniform(3), [0.5, 0.5])


@pytest.mark.parametrize("seed", range(40))
def test_bayes_chain_matches_extended_precision_product(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 21))
    liks = rng.dirichlet(np.full(4, 0.7), size=n)
    liks[rng.random(liks.shape) < 0.05] = 0.0
    liks[liks.sum(axis=1) == 0, 0] = 1.0
    got = fuse_stream(np.arange(n), liks, FusionBackend.bayes(4))[-1]
    assert np.abs(got - np.array(mp_bayes_product(liks))).max() < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_bayes_is_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.dirichlet(np.ones(4), size=3)
    left = bayes_update(bayes_update(a, b), c)
    right = bayes_update(a, bayes_update(uniform(4), b * c / (b * c).sum()))
    assert np.abs(left - right).max() < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 15))
def test_repeating_one_likelihood_keeps_its_argmax(seed, n):
    rng = np.random.default_rng(seed)
    lik = rng.dirichlet(np.ones(4))
    if np.sort(lik)[-1] - np.sort(lik)[-2] < 1e-6:
        return
    out = fuse_stream(np.arange(n), np.tile(lik, (n, 1)), FusionBackend.bayes())
    assert (out.argmax(axis=1) == lik.argmax()).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


# ------------------------------------------------------------------ nap gating

def test_nap_keep_counts_missed_frames():
    assert nap_keep(1, 2, 0)          # consecutive
    assert not nap_keep(1, 3, 0)      # one missed
    assert nap_keep(1, 3, 1)
    assert nap_keep(1, 4, 2) and not nap_keep(1, 4, 1)
    assert nap_keep(0, 10**9, math.inf)


def test_nap_keep_rejects_time_travel():
    with pytest.raises(ArgumentError):
        nap_keep(5, 4, 10)


def _fig4_states(mntd):
    """Observations at t1 and t4; returns (state carried into t4, state after t1)."""
    p = _params(3)
    x = np.random.default_rng(1).normal(size=(2, 5))
    s1, _ = recurrent_update(p, np.zeros((2, 2, 6)), x[0])
    return nap_gate(s1, 1, 4, mntd), s1


def test_two_missed_frames_retained_at_mntd_2():
    carried, s1 = _fig4_states(2)
    assert np.array_equal(carried, s1)


def test_two_missed_frames_reset_at_mntd_1():
    carried, _ = _fig4_states(1)
    assert np.array_equal(carried, np.zeros_like(carried))


def test_two_missed_frames_retained_at_infinite_mntd():
    carried, s1 = _fig4_states(math.inf)
    assert np.array_equal(carried, s1)


def test_fig4_sequence_outputs():
    p = _params(3)
    x = np.random.default_rng(1).normal(size=(2, 5))
    frames = [1, 4]
    kept = fuse_stream(frames, x, FusionBackend.nap(p, 2))
    reset = fuse_stream(frames, x, FusionBackend.nap(p, 1))
    np.testing.assert_array_equal(kept, _plain_chain(p, x, [True, False]))
    np.testing.assert_array_equal(reset, _plain_chain(p, x, [True, True]))


def test_nap_zero_equals_standard_lstm_on_1000_gapped_sequences():
    p = _params(11, d=4, h=5)
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        frames = _gapped_frames(rng, n)
        xs = rng.normal(size=(n, 4))
        nap0 = fuse_stream(frames, xs, FusionBackend.nap(p, 0))
        std = fuse_stream(frames, xs, FusionBackend.standard(p))
        assert np.array_equal(nap0, std)


@pytest.mark.parametrize("seed", range(5))
def test_standard_lstm_resets_on_every_missed_frame(seed):
    p = _params(seed)
    rng = np.random.default_rng(seed)
    frames = _gapped_frames(rng, 30)
    xs = rng.normal(size=(30, 5))
    resets = np.concatenate([[True], np.diff(frames) > 1])
    np.testing.assert_array_equal(fuse_stream(frames, xs, FusionBackend.standard(p)), _plain_chain(p, xs, resets))


@pytest.mark.parametrize("seed", range(5))
def test_infinite_mntd_is_one_unbroken_trajectory(seed):
    p = _params(seed)
    rng = np.random.default_rng(seed + 10)
    frames = _gapped_frames(rng, 40)
    xs = rng.normal(size=(40, 5))
    got = fuse_stream(frames, xs, FusionBackend.nap(p, math.inf))
    np.testing.assert_array_equal(got, _plain_chain(p, xs, [True] + [False] * 39))
    batched = lstm_forward_sequence(p, xs[:, None, :]).probs[:, 0]
    assert np.abs(got - batched).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 6))
def test_nap_output_matches_reset_reference(seed, mntd):
    p = _params(seed % 7)
    rng = np.random.default_rng(seed)
    frames = _gapped_frames(rng, 15)
    xs = rng.normal(size=(15, 5))
    resets = np.concatenate([[True], np.diff(frames) - 1 > mntd])
    np.testing.assert_array_equal(fuse_stream(frames, xs, FusionBackend.nap(p, mntd)), _plain_chain(p, xs, resets))


def test_recurrent_probabilities_are_distributions():
    p = _params(0)
    rng = np.random.default_rng(0)
    out = fuse_stream(np.arange(50), rng.normal(size=(50, 5)) * 3, FusionBackend.nap(p, math.inf))
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_cells_share_weights():
    p = _params(0)
    xs = np.random.default_rng(0).normal(size=(2, 5))
    state = np.zeros((2, 2, 2, 6))
    new, prob = recurrent_update(p, state, xs)
    single0, p0 = recurrent_update(p, np.zeros((2, 2, 6)), xs[0])
    single1, p1 = recurrent_update(p, np.zeros((2, 2, 6)), xs[1])
    np.testing.assert_allclose(new[0], single0, atol=1e-15)
    np.testing.assert_allclose(prob[1], p1, atol=1e-15)


def test_event_order_is_enforced():
    with pytest.raises(ArgumentError):
        fuse_stream([3, 2], np.zeros((2, 4)), FusionBackend.bayes())


def test_backend_configuration_errors():
    with pytest.raises(ConfigurationError):
        FusionBackend("kalman")
    with pytest.raises(ConfigurationError):
        FusionBackend("lstm")
    with pytest.raises(ConfigurationError):
        recurrent_update(_params(0), np.zeros((2, 2, 6)), np.zeros(3))


def test_backend_labels():
    p = _params(0)
    assert FusionBackend.bayes().label() == "bayes"
    assert FusionBackend.standard(p).label() == "lstm"
    assert FusionBackend.nap(p, parse_mntd("day")).label() == "naplstm[day]"


# ------------------------------------------------------------------ engine on a map

def _drive(engine, vmap, events, frame_rate=10.0):
    """events: list of (frame, points, features, probs)."""
    for frame, pts, feats, probs in events:
        t = frame / frame_rate
        engine.prune(vmap, t)
        obs = pool_by_cell(pts, feats, vmap.config.resolution, probs)
        rows, prev = vmap.observe(obs, t, frame)
        engine.update(vmap, obs, rows, prev, frame)


def _single_cell_events(frames, xs, probs):
    pt = np.array([[0.1, 0.1, 0.1]])
    return [(int(f), pt, x[None], pr[None]) for f, x, pr in zip(frames, xs, probs)]


@pytest.mark.parametrize("mntd", [0, 2, math.inf])
def test_engine_matches_stream_fusion(mntd):
    p = _params(4)
    rng = np.random.default_rng(4)
    frames = _gapped_frames(rng, 20)
    xs = rng.normal(size=(20, 5))
    probs = rng.dirichlet(np.ones(4), size=20)
    backend = FusionBackend.nap(p, mntd)
    engine = FusionEngine(backend)
    vmap = engine.new_map(MapConfig(), 5)
    _drive(engine, vmap, _single_cell_events(frames, xs, probs))
    np.testing.assert_array_equal(vmap.cell((0, 0, 0)).prob, fuse_stream(frames, xs, backend)[-1])

    bayes = FusionEngine(FusionBackend.bayes())
    bmap = bayes.new_map(MapConfig(), 5)
    _drive(bayes, bmap, _single_cell_events(frames, xs, probs))
    np.testing.assert_allclose(bmap.cell((0, 0, 0)).prob, fuse_stream(frames, probs, FusionBackend.bayes())[-1],
                               atol=1e-15)


def test_pruned_state_is_parked_and_restored():
    p = _params(5)
    rng = np.random.default_rng(5)
    xs = rng.normal(size=(3, 5))
    probs = rng.dirichlet(np.ones(4), size=3)
    frames = [0, 1, 5000]  # 500 s gap: the cell is pruned in between
    backend = FusionBackend.nap(p, math.inf)

    keep = FusionEngine(backend, keep_pruned_state=True)
    kmap = keep.new_map(MapConfig(retention_window=300.0), 5)
    _drive(keep, kmap, _single_cell_events(frames, xs, probs))
    np.testing.assert_array_equal(kmap.cell((0, 0, 0)).prob, fuse_stream(frames, xs, backend)[-1])

    drop = FusionEngine(backend, keep_pruned_state=False)
    dmap = drop.new_map(MapConfig(retention_window=300.0), 5)
    _drive(drop, dmap, _single_cell_events(frames, xs, probs))
    np.testing.assert_array_equal(dmap.cell((0, 0, 0)).prob, fuse_stream(frames[2:], xs[2:], backend)[-1])


def test_parked_state_still_obeys_the_nap_limit():
    p = _params(5)
    rng = np.random.default_rng(6)
    xs = rng.normal(size=(2, 5))
    probs = rng.dirichlet(np.ones(4), size=2)
    frames = [0, 5000]
    backend = FusionBackend.nap(p, 100)
    engine = FusionEngine(backend)
    vmap = engine.new_map(MapConfig(retention_window=300.0), 5)
    _drive(engine, vmap, _single_cell_events(frames, xs, probs))
    np.testing.assert_array_equal(vmap.cell((0, 0, 0)).prob, fuse_stream(frames[1:], xs[1:], backend)[-1])


def test_bayes_engine_requires_probabilities():
    engine = FusionEngine(FusionBackend.bayes())
    vmap = engine.new_map(MapConfig(), 2)
    obs = pool_by_cell(np.zeros((1, 3)), np.zeros((1, 2)), 0.4)
    rows, prev = vmap.observe(obs, 0.0, 0)
    with pytest.raises(ConfigurationError):
        engine.update(vmap, obs, rows, prev, 0)


def test_prob_history_csv(tmp_path):
    path = tmp_path / "h.csv"
    write_prob_history(path, [((1, 2, 3), 10, np.array([0.1, 0.6, 0.2, 0.1]))])
    lines = path.read_text().splitlines()
    assert lines[0].startswith("cell_ix,cell_iy,cell_iz,frame,prob_0")
    assert lines[1].split(",")[-1] == "1"
