"""Fictitious-play deep Q-iteration trainer: batch sampling, Bellman targets,
inner optimization, outer averaging, and emitted artifacts."""

import csv
import json

import numpy as np
import pytest

from bankmfg.market import BankState, CentralBankChain, MarketParams, reward_major
from bankmfg.measures import GridSpec
from bankmfg.nets import NeuronMeasure, forward
from bankmfg.trainer import (
    FictitiousPlayTrainer,
    InitialCondition,
    TrainConfig,
    TrainingDiverged,
    TrainSample,
    bellman_target_major,
    bellman_target_minor,
    sample_batch,
)

P = MarketParams()
GRID = GridSpec.default()
CHAIN = CentralBankChain()
ACTIONS = np.linspace(P.rate_min, P.rate_max, 11)


def tiny_config(**kw):
    base = dict(
        outer_n=2,
        inner_m=4,
        batch_b=8,
        width=8,
        action_count=5,
        replay_capacity=64,
        averaging_mode="exact-concat",
        seed=7,
    )
    base.update(kw)
    return TrainConfig(**base)


def make_trainer(**kw):
    return FictitiousPlayTrainer(P, CHAIN, GRID, tiny_config(**kw), InitialCondition())


def unit_mass_at(i, j):
    w = np.zeros(GRID.n_nodes)
    w[GRID.index(i, j)] = 1.0
    return w


def keep_minor_policy(t, p0, r0, r_c, mu):
    return GRID.node_r.copy()


# ---------------------------------------------------------------------------
# sample_batch


def test_sample_batch_ranges_and_measure_normalization():
    cfg = tiny_config(batch_b=64)
    rng = np.random.default_rng(0)
    replay = [np.full(GRID.n_nodes, 1.0 / GRID.n_nodes)]
    batch = sample_batch(rng, cfg, replay, P, GRID, ACTIONS, CHAIN.rates)
    assert batch.t.shape == (64,)
    assert set(np.unique(batch.t)) <= set(range(P.horizon_T))
    assert np.all((batch.p0 >= P.prop_min) & (batch.p0 <= P.prop_max))
    assert np.all((batch.p >= P.prop_min) & (batch.p <= P.prop_max))
    for idx in (batch.r0_idx, batch.r_idx, batch.u0_idx, batch.u_idx):
        assert idx.min() >= 0 and idx.max() < len(ACTIONS)
    assert set(np.unique(batch.rc_idx)) <= {0, 1, 2}
    assert np.max(np.abs(batch.mu.sum(axis=1) - 1.0)) < 1e-12
    assert np.all(batch.mu >= 0)


def test_sample_batch_pure_replay_of_single_element():
    cfg = tiny_config(batch_b=16, replay_mix=1.0)
    rng = np.random.default_rng(1)
    w = np.zeros(GRID.n_nodes)
    w[5] = 0.25
    w[17] = 0.75
    batch = sample_batch(rng, cfg, [w], P, GRID, ACTIONS, CHAIN.rates)
    assert np.all(batch.mu == w)


def test_sample_batch_empty_replay_falls_back_to_exploration():
    cfg = tiny_config(batch_b=16, replay_mix=0.5)
    rng = np.random.default_rng(2)
    batch = sample_batch(rng, cfg, [], P, GRID, ACTIONS, CHAIN.rates)
    assert np.max(np.abs(batch.mu.sum(axis=1) - 1.0)) < 1e-12


def test_sample_batch_view_as_samples():
    cfg = tiny_config(batch_b=4)
    rng = np.random.default_rng(3)
    batch = sample_batch(rng, cfg, [], P, GRID, ACTIONS, CHAIN.rates)
    s = batch.sample(2)
    assert isinstance(s, TrainSample)
    assert s.t == batch.t[2]
    assert s.x0.p == batch.p0[2]
    assert s.x0.r == ACTIONS[batch.r0_idx[2]]
    assert s.u == ACTIONS[batch.u_idx[2]]
    assert s.r_c == CHAIN.rates[batch.rc_idx[2]]
    assert np.array_equal(s.mu_weights, batch.mu[2])


# ---------------------------------------------------------------------------
# Bellman targets (reference, per-sample)


def _two_neuron_major_net(q_u0=10.0, q_p0=4.0):
    # f(z) = q_u0 * z[u0] + q_p0 * z[p0] on nonnegative inputs
    d = 5 + GRID.n_nodes
    alpha = np.zeros((2, d))
    alpha[0, 3] = q_u0  # scaled u0 column
    alpha[1, 1] = q_p0  # scaled p0 column
    return NeuronMeasure(alpha, np.zeros(2), np.array([2.0, 2.0]), "relu")


def _two_neuron_minor_net(q_u=10.0, q_p=4.0):
    d = 7 + GRID.n_nodes
    alpha = np.zeros((2, d))
    alpha[0, 5] = q_u   # scaled own-action column
    alpha[1, 3] = q_p   # scaled own-share column
    return NeuronMeasure(alpha, np.zeros(2), np.array([2.0, 2.0]), "relu")


def _constant_net(value, input_dim):
    # relu(0*z + 1) = 1 on every neuron, output weight = value
    return NeuronMeasure(np.zeros((1, input_dim)), np.ones(1), np.array([value]), "relu")


def test_bellman_target_major_terminal_is_discounted_reward():
    sample = TrainSample(
        t=P.horizon_T - 1,
        x0=BankState(0.52, 0.03),
        u0=0.025,
        x=BankState(0.4, 0.03),
        u=0.03,
        r_c=0.03,
        mu_weights=unit_mass_at(7, 2),
    )
    net = _two_neuron_major_net()
    got = bellman_target_major(sample, net, keep_minor_policy, CHAIN, GRID, P, ACTIONS)
    want = P.gamma ** 4 * reward_major(sample.x0, 0.025, 0.03, P)
    assert got == pytest.approx(want, rel=1e-14)


def test_bellman_target_major_constant_q_collapses():
    # rows sum to one and the max of a constant is the constant
    sample = TrainSample(
        t=1,
        x0=BankState(0.52, 0.03),
        u0=0.03,
        x=BankState(0.4, 0.03),
        u=0.03,
        r_c=0.03,
        mu_weights=unit_mass_at(7, 2),
    )
    net = _constant_net(0.007, 5 + GRID.n_nodes)
    got = bellman_target_major(sample, net, keep_minor_policy, CHAIN, GRID, P, ACTIONS)
    want = P.gamma * reward_major(sample.x0, 0.03, 0.03, P) + 0.007
    assert got == pytest.approx(want, rel=1e-13)


def test_bellman_target_major_hand_enumerated_toy():
    # One cb rate (no noise), a unit atom at lattice node (p=0.48, r=0.029)
    # playing "keep", major at p0=0.52 posting u0=0.025.
    #   node drift  = kappa_major*(0.029-0.025-0.001)*0.52 = 5*0.003*0.52 = 0.0078
    #   major drift = -0.0078 -> p0' = 0.5122
    #   reward      = 0.52*(0.03-0.025) - (0.1*0.005+0.001) = 0.0011
    #   Q0(z) = 10*z_u0 + 4*z_p0 (scaled cols) -> max over {0.025, 0.035} at 0.035:
    #   continuation = 10*1 + 4*(0.5122-0.2)/0.6
    chain1 = CentralBankChain(rates=(0.03,), matrix=[[1.0]])
    sample = TrainSample(
        t=0,
        x0=BankState(0.52, 0.03),
        u0=0.025,
        x=BankState(0.4, 0.03),
        u=0.03,
        r_c=0.03,
        mu_weights=unit_mass_at(7, 2),
    )
    net = _two_neuron_major_net(10.0, 4.0)
    got = bellman_target_major(
        sample, net, keep_minor_policy, chain1, GRID, P, np.array([0.025, 0.035])
    )
    p0_next = 0.52 - 5 * (0.029 - 0.025 - 0.001) * 0.52
    want = (0.52 * 0.005 - 0.0015) + 10.0 + 4.0 * (p0_next - 0.2) / 0.6
    assert got == pytest.approx(want, rel=1e-12)


def test_bellman_target_minor_terminal_and_constant():
    sample = TrainSample(
        t=P.horizon_T - 1,
        x0=BankState(0.52, 0.03),
        u0=0.03,
        x=BankState(0.4, 0.03),
        u=0.026,
        r_c=0.03,
        mu_weights=unit_mass_at(7, 2),
    )

    def major_keep(t, p0, r0, r_c, mu):
        return 0.029

    net = _constant_net(0.003, 7 + GRID.n_nodes)
    got = bellman_target_minor(
        sample, net, major_keep, keep_minor_policy, CHAIN, GRID, P, ACTIONS
    )
    want = P.gamma ** 4 * (P.W * 0.4 * (P.l_minor + 0.03 - 0.026)
                           - (P.cost_lin * 0.004 + P.cost_fix))
    assert got == pytest.approx(want, rel=1e-12)

    sample2 = TrainSample(**{**sample.__dict__, "t": 2})
    got2 = bellman_target_minor(
        sample2, net, major_keep, keep_minor_policy, CHAIN, GRID, P, ACTIONS
    )
    want2 = P.gamma ** 2 * (P.W * 0.4 * (P.l_minor + 0.03 - 0.026)
                            - (P.cost_lin * 0.004 + P.cost_fix)) + 0.003
    assert got2 == pytest.approx(want2, rel=1e-12)


def test_bellman_target_minor_hand_enumerated_toy():
    # Frozen major keeps 0.029; unit atom at (0.48, 0.029) keeps its rate, so
    # the measure is a fixed point and the major share does not move.  The
    # tagged minor posts 0.026 and bleeds share to both competitors:
    #   own drift = -0.4*(5*0.002 + 5*0.002) = -0.008 -> p' = 0.392
    #   reward    = 0.4*(0.001+0.03-0.026) - (0.1*0.004+0.001) = 0.0006
    #   Q(z) = 10*z_u + 4*z_p -> max at u=0.035: 10 + 4*(0.392-0.2)/0.6
    chain1 = CentralBankChain(rates=(0.03,), matrix=[[1.0]])
    mu = np.zeros(GRID.n_nodes)
    mu[GRID.index(7, 2)] = 1.0

    def minor_keep(t, p0, r0, r_c, mu_w):
        return GRID.node_r.copy()

    def major_029(t, p0, r0, r_c, mu_w):
        return 0.029

    sample = TrainSample(
        t=0,
        x0=BankState(0.52, 0.03),
        u0=0.035,  # ignored: the frozen major policy drives the next state
        x=BankState(0.4, 0.03),
        u=0.026,
        r_c=0.03,
        mu_weights=mu,
    )
    net = _two_neuron_minor_net(10.0, 4.0)
    got = bellman_target_minor(
        sample, net, major_029, minor_keep, chain1, GRID, P, np.array([0.025, 0.035])
    )
    p_next = 0.4 - 0.4 * (5 * 0.002 + 5 * 0.002)
    want = (0.4 * (0.001 + 0.03 - 0.026) - (0.1 * 0.004 + 0.001)) \
        + 10.0 + 4.0 * (p_next - 0.2) / 0.6
    assert got == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# batched targets match the per-sample reference


def test_batched_targets_match_reference():
    trainer = make_trainer(batch_b=16, width=16, action_count=11)
    frozen = trainer.freeze_policies()
    batch = trainer.sample_training_batch()
    got = trainer.bellman_targets(batch, frozen)

    minor_ref_policy = trainer.reference_minor_node_policy()
    major_ref_policy = trainer.reference_major_policy()
    for i in range(16):
        s = batch.sample(i)
        want_major = bellman_target_major(
            s, trainer.response_major, minor_ref_policy, CHAIN, GRID, P,
            trainer.action_grid,
        )
        want_minor = bellman_target_minor(
            s, trainer.response_minor, major_ref_policy, minor_ref_policy,
            CHAIN, GRID, P, trainer.action_grid,
        )
        assert got["major"][i] == pytest.approx(want_major, abs=5e-5)
        assert got["minor"][i] == pytest.approx(want_minor, abs=5e-5)


def test_batched_targets_terminal_rows_are_pure_reward():
    trainer = make_trainer(batch_b=12)
    frozen = trainer.freeze_policies()
    batch = trainer.sample_training_batch()
    batch.t[:] = P.horizon_T - 1
    got = trainer.bellman_targets(batch, frozen)
    g = P.gamma ** (P.horizon_T - 1)
    u0 = trainer.action_grid[batch.u0_idx]
    r0 = trainer.action_grid[batch.r0_idx]
    rc = np.asarray(CHAIN.rates)[batch.rc_idx]
    want = g * (P.W * batch.p0 * (P.l_major + rc - u0)
                - (P.cost_lin * np.abs(u0 - r0)
                   + P.cost_fix * (np.abs(u0 - r0) > 1e-12)))
    assert np.allclose(got["major"], want, atol=1e-7)
    assert np.all(np.isfinite(got["minor"]))


# ---------------------------------------------------------------------------
# inner loop


def test_inner_loop_zero_learning_rate_leaves_networks_unchanged():
    trainer = make_trainer(learning_rate=0.0, outer_n=1, inner_m=3)
    before = {
        "maj": trainer.response_major.copy(),
        "min": trainer.response_minor.copy(),
    }
    result = trainer.train()
    assert np.array_equal(result.response_major.alpha, before["maj"].alpha)
    assert np.array_equal(result.response_major.beta, before["maj"].beta)
    assert np.array_equal(result.response_minor.alpha, before["min"].alpha)
    assert len(result.records) == 3
    assert all(r.loss_major >= 0 and r.loss_minor >= 0 for r in result.records)


def test_training_is_deterministic_under_fixed_seed():
    r1 = make_trainer(seed=11).train()
    r2 = make_trainer(seed=11).train()
    assert [(t.loss_major, t.loss_minor) for t in r1.records] == [
        (t.loss_major, t.loss_minor) for t in r2.records
    ]
    assert np.array_equal(r1.avg_minor.alpha, r2.avg_minor.alpha)
    assert np.array_equal(r1.avg_major.beta, r2.avg_major.beta)


def test_divergence_guard_trips():
    trainer = make_trainer()
    trainer.response_minor.beta[:] = 1e6
    with pytest.raises(TrainingDiverged):
        trainer.train()


def test_frozen_policies_immune_to_response_updates():
    trainer = make_trainer(batch_b=8)
    frozen = trainer.freeze_policies()
    batch = trainer.sample_training_batch()
    before_actions = frozen.minor_node_actions(batch)
    before_hash = frozen.probe_hash()
    trainer.response_minor.alpha += 10.0  # the response nets keep training...
    trainer.avg_minor.alpha += 10.0       # ...and even mutating the source
    after_actions = frozen.minor_node_actions(batch)
    assert np.array_equal(before_actions, after_actions)
    assert frozen.probe_hash() == before_hash


# ---------------------------------------------------------------------------
# outer loop


def test_outer_loop_n1_reduces_to_plain_training():
    trainer = make_trainer(outer_n=1, inner_m=6, keep_snapshots=True)
    result = trainer.train()
    rng = np.random.default_rng(0)
    Z = rng.uniform(0, 1, (40, result.avg_minor.input_dim))
    # weight 0/(0+1)=0 on history: the average IS the first snapshot
    assert np.max(np.abs(forward(result.avg_minor, Z)
                         - forward(result.response_minor, Z))) < 1e-12


def test_outer_loop_exact_concat_telescopes_to_uniform_snapshot_average():
    trainer = make_trainer(outer_n=5, inner_m=6, keep_snapshots=True)
    result = trainer.train()
    rng = np.random.default_rng(1)
    for avg, snaps in (
        (result.avg_minor, result.snapshots_minor),
        (result.avg_major, result.snapshots_major),
    ):
        assert len(snaps) == 5
        Z = rng.uniform(0, 1, (60, avg.input_dim))
        want = np.mean([forward(s, Z) for s in snaps], axis=0)
        assert np.max(np.abs(forward(avg, Z) - want)) < 1e-8


def test_outer_loop_resample_mode_keeps_width_bounded():
    trainer = make_trainer(
        outer_n=3, averaging_mode="resample", width=16, resample_width=16
    )
    result = trainer.train()
    assert result.avg_minor.width == 16
    assert result.avg_major.width == 16


def test_outer_loop_emits_checkpoints_losses_and_manifest(tmp_path):
    trainer = FictitiousPlayTrainer(
        P, CHAIN, GRID, tiny_config(outer_n=3, inner_m=4), InitialCondition(),
        out_dir=tmp_path,
    )
    result = trainer.train()
    ckpts = sorted(tmp_path.glob("checkpoint_outer_*.json"))
    assert len(ckpts) == 3
    assert (tmp_path / "checkpoint_final.json").exists()
    with open(tmp_path / "losses.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 4
    assert set(rows[0]) == {"outer_n", "inner_m", "loss_major", "loss_minor", "wall_ms"}
    assert [int(r["inner_m"]) for r in rows[:4]] == [1, 2, 3, 4]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["outer_n"] == 3
    assert "content_hash" in manifest
    assert len(result.records) == 12


def test_replay_grows_with_visited_measures():
    trainer = make_trainer(outer_n=2)
    n0 = len(trainer.replay)
    assert n0 > 0  # seeded from the initial-condition tree before training
    trainer.train()
    assert len(trainer.replay) > n0
    for w in trainer.replay:
        assert abs(w.sum() - 1.0) < 1e-9
        assert np.all(w >= -1e-15)


def test_inner_update_path_fits_frozen_synthetic_target_10x_in_400_steps():
    # The optimizer path the inner loop runs (analytic gradients + Adam on a
    # fresh sampled batch per step) fits a frozen synthetic target function
    # at the shipped scale: width 256, batch 240, learning rate 1e-3.
    from bankmfg.nets import adam_step, init_neuron_measure, loss_and_grads

    cfg = tiny_config(width=256, batch_b=240)
    trainer = FictitiousPlayTrainer(P, CHAIN, GRID, cfg, InitialCondition())
    target_net = init_neuron_measure(
        trainer.encoder.minor_dim, 64, np.random.default_rng(99), "relu"
    )
    net = trainer.response_minor
    opt = trainer.opt_minor
    losses = []
    for _ in range(400):
        batch = trainer.sample_training_batch()
        Z = trainer.encode_batch(batch)["minor"]
        y = 3.0 * forward(target_net, Z)
        loss, grads = loss_and_grads(net, Z, y)
        adam_step(net, grads, opt)
        losses.append(loss)
    assert np.mean(losses[-20:]) < np.mean(losses[:5]) / 10.0


# ---------------------------------------------------------------------------
# residual-gradient switch


def test_residual_gradient_mode_matches_finite_differences():
    # tanh response nets (no kinks); small everything; frozen policies fixed.
    trainer = make_trainer(
        batch_b=4, width=6, activation="tanh", target_mode="residual-gradient",
        action_count=3,
    )
    frozen = trainer.freeze_policies()
    batch = trainer.sample_training_batch()
    net = trainer.response_minor

    def full_loss():
        targets = trainer.bellman_targets(batch, frozen)["minor"]
        Z = trainer.encode_batch(batch)["minor"]
        e = forward(net, Z) - targets
        return float(np.mean(e * e))

    grads = trainer.minor_step_grads(batch, frozen)
    h = 1e-6
    for name in ("alpha", "c", "beta"):
        arr = getattr(net, name)
        flat = arr.ravel()
        for k in range(0, flat.size, max(1, flat.size // 7)):
            orig = flat[k]
            flat[k] = orig + h
            up = full_loss()
            flat[k] = orig - h
            dn = full_loss()
            flat[k] = orig
            fd = (up - dn) / (2 * h)
            assert grads[name].ravel()[k] == pytest.approx(fd, rel=2e-4, abs=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(outer_n=0)
    with pytest.raises(ValueError):
        TrainConfig(averaging_mode="mystery")
    with pytest.raises(ValueError):
        TrainConfig(replay_mix=1.5)
    with pytest.raises(ValueError):
        TrainConfig(target_mode="other")
