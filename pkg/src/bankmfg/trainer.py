"""Fictitious-play deep Q-iteration for the deposit-rate game.

Each outer round freezes the greedy policies of the running average
networks; the inner loop then fits the two response networks (major bank
and representative minor bank) to exact one-step Bellman targets under
those frozen policies.  The market model is known, so targets involve no
sampled experience: the expectation over the next central-bank rate is the
row of the chain's transition matrix, and the population measure moves
through the deterministic lattice transition.  After each outer round the
averages absorb the response snapshots with weights n/(n+1) and 1/(n+1),
either exactly (neuron concatenation) or by resampling neurons to keep the
width bounded, and the measures visited by the updated average policies on
the full central-bank tree from the initial condition are appended to a
replay pool used by the batch sampler.

Rewards carry an explicit discount prefactor gamma^t; continuation values
are not discounted again, so the fitted network approximates the tail sum
of discounted rewards from time t onward.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import MeasureStepper, NodeActionArgmaxKernel, PairSweepKernel
from .checkpoint import save_checkpoint
from .market import (
    BankState,
    CentralBankChain,
    MarketParams,
    drift_major,
    drift_minor,
    reward_major,
    reward_minor,
)
from .measures import GridSpec, ProjectedMeasure, mean_field_transition, uniform_box_measure
from .nets import (
    InputEncoder,
    NeuronMeasure,
    OptimizerState,
    adam_step,
    forward,
    fp_average,
    init_neuron_measure,
    loss_and_grads,
    value_grads,
)

_AVERAGING_MODES = ("exact-concat", "resample")
_TARGET_MODES = ("stop-gradient", "residual-gradient")


class TrainingDiverged(RuntimeError):
    """Raised when a fitting loss or a Bellman target stops being sane."""


@dataclass
class TrainConfig:
    """Knobs of the fictitious-play trainer.

    ``target_mode`` selects how gradients treat the Bellman target:
    ``stop-gradient`` fits the response network to a constant target
    (the usual semi-gradient), ``residual-gradient`` also differentiates
    the target's continuation value through the response network.
    """

    outer_n: int = 100
    inner_m: int = 400
    batch_b: int = 240
    width: int = 256
    learning_rate: float = 0.001
    action_count: int = 11
    activation: str = "relu"
    averaging_mode: str = "resample"
    resample_width: int = 256
    replay_mix: float = 0.5
    dirichlet_alpha: float = 1.0
    replay_capacity: int = 8192
    target_mode: str = "stop-gradient"
    divergence_threshold: float = 1e3
    checkpoint_every: int = 1
    keep_snapshots: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("outer_n", "inner_m", "batch_b", "width", "resample_width",
                     "replay_capacity", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.action_count < 2:
            raise ValueError("action_count must be at least 2")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.replay_mix <= 1.0:
            raise ValueError("replay_mix must lie in [0, 1]")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.divergence_threshold <= 0:
            raise ValueError("divergence_threshold must be positive")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.averaging_mode not in _AVERAGING_MODES:
            raise ValueError(f"averaging_mode must be one of {_AVERAGING_MODES}")
        if self.target_mode not in _TARGET_MODES:
            raise ValueError(f"target_mode must be one of {_TARGET_MODES}")


@dataclass
class InitialCondition:
    """Market state at time zero: major share/rate, common rate, and the
    uniform box whose lattice projection seeds the population measure."""

    p0: float = 0.5
    r0: float = 0.03
    r_c: float = 0.03
    mu_p_lo: float = 0.40
    mu_p_hi: float = 0.60
    mu_r_lo: float = 0.025
    mu_r_hi: float = 0.035

    def measure(self, grid: GridSpec) -> ProjectedMeasure:
        return uniform_box_measure(
            grid, self.mu_p_lo, self.mu_p_hi, self.mu_r_lo, self.mu_r_hi
        )


@dataclass
class TrainSample:
    """One decision sample: time, major state and action, a tagged minor
    state and action, the common rate, and the population weights."""

    t: int
    x0: BankState
    u0: float
    x: BankState
    u: float
    r_c: float
    mu_weights: np.ndarray


@dataclass
class Batch:
    """Vectorized training samples; rates index the shared action grid."""

    t: np.ndarray
    rc_idx: np.ndarray
    r0_idx: np.ndarray
    u0_idx: np.ndarray
    p0: np.ndarray
    r_idx: np.ndarray
    u_idx: np.ndarray
    p: np.ndarray
    mu: np.ndarray
    action_grid: np.ndarray
    cb_rates: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def sample(self, i: int) -> TrainSample:
        ag = self.action_grid
        return TrainSample(
            t=int(self.t[i]),
            x0=BankState(float(self.p0[i]), float(ag[self.r0_idx[i]])),
            u0=float(ag[self.u0_idx[i]]),
            x=BankState(float(self.p[i]), float(ag[self.r_idx[i]])),
            u=float(ag[self.u_idx[i]]),
            r_c=float(self.cb_rates[self.rc_idx[i]]),
            mu_weights=self.mu[i].copy(),
        )


@dataclass
class TrainRecord:
    """Per-inner-iteration log row."""

    outer_n: int
    inner_m: int
    loss_major: float
    loss_minor: float
    wall_ms: float


@dataclass
class TrainResult:
    """Networks and logs produced by :meth:`FictitiousPlayTrainer.train`."""

    avg_major: NeuronMeasure
    avg_minor: NeuronMeasure
    response_major: NeuronMeasure
    response_minor: NeuronMeasure
    records: list
    snapshots_major: list = field(default_factory=list)
    snapshots_minor: list = field(default_factory=list)


def sample_batch(rng, config, replay, params, grid, action_grid, cb_rates) -> Batch:
    """Draw one training batch over times, states, actions and measures.

    Times, rates and actions are uniform over their grids; shares are
    uniform over the admissible proportion range (the major share is drawn
    independently of the measure).  Measures mix uniformly-chosen replayed
    measures with flat-Dirichlet exploration in proportion ``replay_mix``
    (all exploration while the replay pool is empty).  The draw order is
    fixed, so a seeded generator reproduces batches exactly.
    """
    B = config.batch_b
    action_grid = np.asarray(action_grid, dtype=float)
    cb_rates = np.asarray(cb_rates, dtype=float)
    t = rng.integers(0, params.horizon_T, B)
    rc_idx = rng.integers(0, len(cb_rates), B)
    r0_idx = rng.integers(0, len(action_grid), B)
    u0_idx = rng.integers(0, len(action_grid), B)
    p0 = rng.uniform(params.prop_min, params.prop_max, B)
    r_idx = rng.integers(0, len(action_grid), B)
    u_idx = rng.integers(0, len(action_grid), B)
    p = rng.uniform(params.prop_min, params.prop_max, B)
    n_replay = int(round(B * config.replay_mix)) if len(replay) else 0
    mu = np.empty((B, grid.n_nodes))
    if n_replay:
        picks = rng.integers(0, len(replay), n_replay)
        mu[:n_replay] = np.stack([replay[k] for k in picks])
    if n_replay < B:
        alpha = np.full(grid.n_nodes, config.dirichlet_alpha)
        mu[n_replay:] = rng.dirichlet(alpha, B - n_replay)
    return Batch(
        t=t, rc_idx=rc_idx, r0_idx=r0_idx, u0_idx=u0_idx, p0=p0,
        r_idx=r_idx, u_idx=u_idx, p=p, mu=mu,
        action_grid=action_grid, cb_rates=cb_rates,
    )


def _vector_cost(dr, params):
    """Vectorized rate-adjustment cost, matching market.adjustment_cost."""
    a = np.abs(dr)
    return params.cost_lin * a + params.cost_fix * (a > 1e-12)


def greedy_minor_node_policy(net, encoder, grid, action_grid):
    """Float64 reference greedy policy of ``net`` on every lattice node.

    Returns ``policy(t, p0, r0, r_c, mu_weights) -> rates`` with one posted
    rate per node; ties pick the lowest rate (first maximizer).
    """
    ag = np.asarray(action_grid, dtype=float)
    K, A = grid.n_nodes, len(ag)
    node_p = np.repeat(grid.node_p, A)
    node_r = np.repeat(grid.node_r, A)
    acts = np.tile(ag, K)

    def policy(t, p0, r0, r_c, mu_weights):
        n = K * A
        Z = encoder.encode_minor(
            np.full(n, t), np.full(n, p0), np.full(n, r0),
            node_p, node_r, acts, np.full(n, r_c),
            np.tile(np.asarray(mu_weights, dtype=float), (n, 1)),
        )
        V = forward(net, Z).reshape(K, A)
        return ag[np.argmax(V, axis=1)]

    return policy


def greedy_major_policy(net, encoder, action_grid):
    """Float64 reference greedy policy of the major network.

    Returns ``policy(t, p0, r0, r_c, mu_weights) -> rate``.
    """
    ag = np.asarray(action_grid, dtype=float)
    A = len(ag)

    def policy(t, p0, r0, r_c, mu_weights):
        Z = encoder.encode_major(
            np.full(A, t), np.full(A, p0), np.full(A, r0), ag, np.full(A, r_c),
            np.tile(np.asarray(mu_weights, dtype=float), (A, 1)),
        )
        return float(ag[int(np.argmax(forward(net, Z)))])

    return policy


def bellman_target_major(sample, net, minor_policy, chain, grid, params, action_grid):
    """Exact one-step Bellman target for the major value network.

    ``gamma^t * reward`` plus, before the final period, the chain-weighted
    expectation over the next common rate of the maximal network value at
    the next state.  The population moves under ``minor_policy`` and the
    major's own share against the post-decision rates of its opponents.
    """
    value = params.gamma ** sample.t * reward_major(
        sample.x0, sample.u0, sample.r_c, params
    )
    if sample.t >= params.horizon_T - 1:
        return float(value)
    rates = np.asarray(
        minor_policy(sample.t, sample.x0.p, sample.x0.r, sample.r_c, sample.mu_weights),
        dtype=float,
    )
    mu = ProjectedMeasure(np.asarray(sample.mu_weights, dtype=float), grid)
    mu_next = mean_field_transition(
        sample.x0, sample.u0, mu, lambda p, r: rates, grid, params, on_escape="clamp"
    )
    b0 = drift_major(sample.u0, sample.x0.p, grid.node_p, rates, mu.weights, params)
    p0_next = float(np.clip(sample.x0.p + b0 * params.dt, 0.0, 1.0))
    enc = InputEncoder(params, grid.n_nodes)
    ag = np.asarray(action_grid, dtype=float)
    A = len(ag)
    row = chain.transition_row(sample.r_c)
    cont = 0.0
    for prob, rc_next in zip(row, chain.rates):
        Z = enc.encode_major(
            np.full(A, sample.t + 1), np.full(A, p0_next), np.full(A, sample.u0),
            ag, np.full(A, rc_next), np.tile(mu_next.weights, (A, 1)),
        )
        cont += prob * float(np.max(forward(net, Z)))
    return float(value + cont)


def bellman_target_minor(sample, net, major_policy, minor_policy, chain, grid,
                         params, action_grid):
    """Exact one-step Bellman target for the minor value network.

    The next state is driven by the frozen ``major_policy`` (the sampled
    major action ``u0`` only matters to the major's own target), the frozen
    ``minor_policy`` moves the population, and the tagged minor drifts
    against the post-decision rates while keeping its chosen rate.
    """
    value = params.gamma ** sample.t * reward_minor(
        sample.x, sample.u, sample.r_c, params
    )
    if sample.t >= params.horizon_T - 1:
        return float(value)
    u0_hat = float(
        major_policy(sample.t, sample.x0.p, sample.x0.r, sample.r_c, sample.mu_weights)
    )
    rates = np.asarray(
        minor_policy(sample.t, sample.x0.p, sample.x0.r, sample.r_c, sample.mu_weights),
        dtype=float,
    )
    mu = ProjectedMeasure(np.asarray(sample.mu_weights, dtype=float), grid)
    mu_next = mean_field_transition(
        sample.x0, u0_hat, mu, lambda p, r: rates, grid, params, on_escape="clamp"
    )
    b0 = drift_major(u0_hat, sample.x0.p, grid.node_p, rates, mu.weights, params)
    p0_next = float(np.clip(sample.x0.p + b0 * params.dt, 0.0, 1.0))
    b = drift_minor(sample.u, sample.x.p, u0_hat, sample.x0.p,
                    grid.node_p, rates, mu.weights, params)
    p_next = float(np.clip(sample.x.p + float(b) * params.dt, 0.0, 1.0))
    enc = InputEncoder(params, grid.n_nodes)
    ag = np.asarray(action_grid, dtype=float)
    A = len(ag)
    row = chain.transition_row(sample.r_c)
    cont = 0.0
    for prob, rc_next in zip(row, chain.rates):
        Z = enc.encode_minor(
            np.full(A, sample.t + 1), np.full(A, p0_next), np.full(A, u0_hat),
            np.full(A, p_next), np.full(A, sample.u), ag, np.full(A, rc_next),
            np.tile(mu_next.weights, (A, 1)),
        )
        cont += prob * float(np.max(forward(net, Z)))
    return float(value + cont)


class FrozenPolicies:
    """Greedy policies of the averaged networks, frozen for one outer round.

    The fused kernels copy the network tables at construction, so later
    updates to the response or average networks cannot leak into this
    round's targets; :meth:`probe_hash` witnesses that on a fixed probe set.
    """

    def __init__(self, avg_major, avg_minor, encoder, grid, action_grid,
                 cb_rates, probe):
        n_mu = grid.n_nodes
        node_vals = np.column_stack(
            [encoder.scale_p(grid.node_p), encoder.scale_r(grid.node_r)]
        )
        self._minor_kernel = NodeActionArgmaxKernel(
            avg_minor, [0, 1, 2, 6] + list(range(7, 7 + n_mu)),
            (3, 4), node_vals, 5, encoder.scale_r(action_grid),
        )
        self._major_kernel = PairSweepKernel(
            avg_major, [0, 1, 2, 4] + list(range(5, 5 + n_mu)),
            3, encoder.scale_r(action_grid),
        )
        self._encoder = encoder
        self._probe = probe

    def _shared(self, t, p0, r0, r_c, mu):
        enc = self._encoder
        head = np.column_stack(
            [enc.scale_t(t), enc.scale_p(p0), enc.scale_r(r0), enc.scale_r(r_c)]
        )
        return np.hstack([head, np.asarray(mu, dtype=float)])

    def node_actions_idx(self, t, p0, r0, r_c, mu) -> np.ndarray:
        """(B, n_nodes) greedy action indices of the frozen minor policy."""
        return self._minor_kernel(self._shared(t, p0, r0, r_c, mu))

    def major_action_idx(self, t, p0, r0, r_c, mu) -> np.ndarray:
        """(B,) greedy action indices of the frozen major policy."""
        V = self._major_kernel(self._shared(t, p0, r0, r_c, mu))[:, :, 0]
        return np.argmax(V, axis=1)

    def minor_node_actions(self, batch: Batch) -> np.ndarray:
        """Frozen minor decisions on every lattice node for a batch."""
        return self.node_actions_idx(
            batch.t, batch.p0, batch.action_grid[batch.r0_idx],
            batch.cb_rates[batch.rc_idx], batch.mu,
        )

    def probe_hash(self) -> str:
        """SHA-256 of the frozen decisions on the fixed probe states."""
        pr = self._probe
        node = self.node_actions_idx(pr["t"], pr["p0"], pr["r0"], pr["r_c"], pr["mu"])
        major = self.major_action_idx(pr["t"], pr["p0"], pr["r0"], pr["r_c"], pr["mu"])
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(node, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(major, dtype=np.int64).tobytes())
        return h.hexdigest()


class FictitiousPlayTrainer:
    """Runs fictitious-play deep Q-iteration and emits training artifacts.

    With an ``out_dir`` the trainer writes per-outer-round checkpoints of
    the averaged networks, a final checkpoint including the response
    networks and optimizer state, a per-inner-iteration loss CSV, and a
    run manifest echoing the configuration with a content hash of the
    emitted files.
    """

    def __init__(self, params: MarketParams, chain: CentralBankChain,
                 grid: GridSpec, config: TrainConfig,
                 init: InitialCondition | None = None, out_dir=None):
        self.params = params
        self.chain = chain
        self.grid = grid
        self.config = config
        self.init = InitialCondition() if init is None else init
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.action_grid = np.linspace(
            params.rate_min, params.rate_max, config.action_count
        )
        self.encoder = InputEncoder(params, grid.n_nodes)
        self.stepper = MeasureStepper(grid, self.action_grid, params)
        self._cb_rates = np.asarray(chain.rates, dtype=float)
        self._rowmat = chain.transition_matrix()

        streams = np.random.SeedSequence(config.seed).spawn(4)
        self._rng_init = np.random.default_rng(streams[0])
        self._rng_sample = np.random.default_rng(streams[1])
        self._rng_avg = np.random.default_rng(streams[2])
        self._rng_probe = np.random.default_rng(streams[3])

        self.response_major = init_neuron_measure(
            self.encoder.major_dim, config.width, self._rng_init, config.activation
        )
        self.response_minor = init_neuron_measure(
            self.encoder.minor_dim, config.width, self._rng_init, config.activation
        )
        self.opt_major = OptimizerState.for_net(
            self.response_major, lr=config.learning_rate
        )
        self.opt_minor = OptimizerState.for_net(
            self.response_minor, lr=config.learning_rate
        )
        self.avg_major = self.response_major.copy()
        self.avg_minor = self.response_minor.copy()

        self._probe = self._make_probe(32)
        self._mu0 = self.init.measure(grid).weights
        self.replay: list[np.ndarray] = []
        self._extend_replay(self._visited_measures(self.freeze_policies()))
        self.records: list[TrainRecord] = []
        self.snapshots_major: list[NeuronMeasure] = []
        self.snapshots_minor: list[NeuronMeasure] = []

    # -- sampling ----------------------------------------------------------

    def _make_probe(self, n: int) -> dict:
        rng = self._rng_probe
        return {
            "t": rng.integers(0, self.params.horizon_T, n),
            "p0": rng.uniform(self.params.prop_min, self.params.prop_max, n),
            "r0": self.action_grid[rng.integers(0, len(self.action_grid), n)],
            "r_c": self._cb_rates[rng.integers(0, len(self._cb_rates), n)],
            "mu": rng.dirichlet(np.ones(self.grid.n_nodes), n),
        }

    def sample_training_batch(self) -> Batch:
        return sample_batch(
            self._rng_sample, self.config, self.replay, self.params, self.grid,
            self.action_grid, self._cb_rates,
        )

    def _extend_replay(self, measures) -> None:
        self.replay.extend(np.asarray(w, dtype=float) for w in measures)
        over = len(self.replay) - self.config.replay_capacity
        if over > 0:
            del self.replay[:over]

    def _visited_measures(self, frozen: FrozenPolicies) -> list:
        """Measures on the full central-bank tree from the initial condition.

        Children of one node share the transited measure (the common-rate
        branch changes only future decisions), so each level contributes one
        new measure per node.
        """
        P = self.params
        p0 = np.array([self.init.p0])
        r0 = np.array([self.init.r0])
        rc = np.array([self.init.r_c])
        mu = self._mu0[None, :].copy()
        out = [self._mu0.copy()]
        n_cb = len(self._cb_rates)
        for t in range(P.horizon_T - 1):
            tv = np.full(len(p0), t)
            act = frozen.node_actions_idx(tv, p0, r0, rc, mu)
            u0h = frozen.major_action_idx(tv, p0, r0, rc, mu)
            new_w, b0 = self.stepper.step(mu, act, u0h, p0)
            out.extend(list(new_w))
            reps = np.repeat(np.arange(len(p0)), n_cb)
            p0 = np.clip(p0 + b0 * P.dt, 0.0, 1.0)[reps]
            r0 = self.action_grid[u0h][reps]
            rc = np.tile(self._cb_rates, len(u0h))
            mu = new_w[reps]
        return out

    # -- policies and targets ----------------------------------------------

    def freeze_policies(self) -> FrozenPolicies:
        """Snapshot the averaged networks' greedy policies for one round."""
        return FrozenPolicies(
            self.avg_major, self.avg_minor, self.encoder, self.grid,
            self.action_grid, self._cb_rates, self._probe,
        )

    def reference_minor_node_policy(self):
        """Float64 closure over the current average minor network."""
        return greedy_minor_node_policy(
            self.avg_minor, self.encoder, self.grid, self.action_grid
        )

    def reference_major_policy(self):
        """Float64 closure over the current average major network."""
        return greedy_major_policy(self.avg_major, self.encoder, self.action_grid)

    def encode_batch(self, batch: Batch) -> dict:
        """Network inputs at the sampled (state, action) pairs."""
        ag, cb = batch.action_grid, batch.cb_rates
        Z_major = self.encoder.encode_major(
            batch.t, batch.p0, ag[batch.r0_idx], ag[batch.u0_idx],
            cb[batch.rc_idx], batch.mu,
        )
        Z_minor = self.encoder.encode_minor(
            batch.t, batch.p0, ag[batch.r0_idx], batch.p, ag[batch.r_idx],
            ag[batch.u_idx], cb[batch.rc_idx], batch.mu,
        )
        return {"major": Z_major, "minor": Z_minor}

    def bellman_targets(self, batch: Batch, frozen: FrozenPolicies) -> dict:
        """Exact one-step Bellman targets for both networks on a batch.

        The population and the next major state move under the frozen
        policies; continuation values come from the current response
        networks via fused sweeps over (next action, next common rate).
        In residual-gradient mode the dict also carries the argmax next
        inputs needed to differentiate through the targets.
        """
        P = self.params
        enc = self.encoder
        ag, cb = batch.action_grid, batch.cb_rates
        t = np.asarray(batch.t)
        u0 = ag[batch.u0_idx]
        r0 = ag[batch.r0_idx]
        u = ag[batch.u_idx]
        r = ag[batch.r_idx]
        rc = cb[batch.rc_idx]
        gamma_t = P.gamma ** t
        reward0 = P.W * batch.p0 * (P.l_major + rc - u0) - _vector_cost(u0 - r0, P)
        reward = P.W * batch.p * (P.l_minor + rc - u) - _vector_cost(u - r, P)
        nonterm = t < P.horizon_T - 1

        act_idx = frozen.node_actions_idx(t, batch.p0, r0, rc, batch.mu)
        u0h_idx = frozen.major_action_idx(t, batch.p0, r0, rc, batch.mu)
        u0_hat = ag[u0h_idx]

        # the major's target transits under its sampled action, the minor's
        # under the frozen major policy
        w_major, b0_major = self.stepper.step(batch.mu, act_idx, batch.u0_idx, batch.p0)
        p0n_major = np.clip(batch.p0 + b0_major * P.dt, 0.0, 1.0)
        w_minor, b0_minor = self.stepper.step(batch.mu, act_idx, u0h_idx, batch.p0)
        p0n_minor = np.clip(batch.p0 + b0_minor * P.dt, 0.0, 1.0)
        b_tag = self.stepper.tagged_drift(
            batch.mu, act_idx, u0h_idx, batch.p0, batch.p, batch.u_idx
        )
        p_next = np.clip(batch.p + b_tag * P.dt, 0.0, 1.0)

        rows = self._rowmat[batch.rc_idx]
        t_next = enc.scale_t(t + 1)
        n_mu = self.grid.n_nodes

        major_sweep = PairSweepKernel(
            self.response_major, [0, 1, 2] + list(range(5, 5 + n_mu)),
            3, enc.scale_r(ag), 4, enc.scale_r(cb),
        )
        Z0 = np.hstack(
            [np.column_stack([t_next, enc.scale_p(p0n_major), enc.scale_r(u0)]),
             w_major]
        )
        V0 = major_sweep(Z0)                        # (B, actions, cb states)
        a0_star = np.argmax(V0, axis=1)             # (B, cb states)
        V0_max = np.take_along_axis(V0, a0_star[:, None, :], axis=1)[:, 0, :]
        cont0 = np.where(nonterm, (rows * V0_max).sum(axis=1), 0.0)
        y_major = gamma_t * reward0 + cont0

        minor_sweep = PairSweepKernel(
            self.response_minor, [0, 1, 2, 3, 4] + list(range(7, 7 + n_mu)),
            5, enc.scale_r(ag), 6, enc.scale_r(cb),
        )
        Z1 = np.hstack(
            [np.column_stack([t_next, enc.scale_p(p0n_minor), enc.scale_r(u0_hat),
                              enc.scale_p(p_next), enc.scale_r(u)]),
             w_minor]
        )
        V1 = minor_sweep(Z1)
        a_star = np.argmax(V1, axis=1)
        V1_max = np.take_along_axis(V1, a_star[:, None, :], axis=1)[:, 0, :]
        cont = np.where(nonterm, (rows * V1_max).sum(axis=1), 0.0)
        y_minor = gamma_t * reward + cont

        if not (np.all(np.isfinite(y_major)) and np.all(np.isfinite(y_minor))):
            raise TrainingDiverged("non-finite Bellman target")

        out = {"major": y_major, "minor": y_minor}
        if self.config.target_mode == "residual-gradient":
            out["_next"] = {
                "rows": rows,
                "nonterm": nonterm,
                "major": self._next_inputs_major(t_next, p0n_major, u0, a0_star,
                                                 w_major, ag, cb),
                "minor": self._next_inputs_minor(t_next, p0n_minor, u0_hat, p_next,
                                                 u, a_star, w_minor, ag, cb),
            }
        return out

    def _next_inputs_major(self, t_next, p0n, u0, a_star, w_next, ag, cb):
        enc = self.encoder
        B, n_cb = a_star.shape
        Z = np.empty((B, n_cb, enc.major_dim))
        Z[:, :, 0] = t_next[:, None]
        Z[:, :, 1] = enc.scale_p(p0n)[:, None]
        Z[:, :, 2] = enc.scale_r(u0)[:, None]
        Z[:, :, 3] = enc.scale_r(ag)[a_star]
        Z[:, :, 4] = enc.scale_r(cb)[None, :]
        Z[:, :, 5:] = w_next[:, None, :]
        return Z

    def _next_inputs_minor(self, t_next, p0n, u0_hat, p_next, u, a_star, w_next,
                           ag, cb):
        enc = self.encoder
        B, n_cb = a_star.shape
        Z = np.empty((B, n_cb, enc.minor_dim))
        Z[:, :, 0] = t_next[:, None]
        Z[:, :, 1] = enc.scale_p(p0n)[:, None]
        Z[:, :, 2] = enc.scale_r(u0_hat)[:, None]
        Z[:, :, 3] = enc.scale_p(p_next)[:, None]
        Z[:, :, 4] = enc.scale_r(u)[:, None]
        Z[:, :, 5] = enc.scale_r(ag)[a_star]
        Z[:, :, 6] = enc.scale_r(cb)[None, :]
        Z[:, :, 7:] = w_next[:, None, :]
        return Z

    # -- gradients -----------------------------------------------------------

    def _side_step_grads(self, side: str, bundle: dict, Z: np.ndarray):
        """Loss and parameter gradients for one network on one batch."""
        net = self.response_major if side == "major" else self.response_minor
        y = bundle[side]
        if self.config.target_mode == "stop-gradient":
            return loss_and_grads(net, Z, y)
        e = forward(net, Z) - y
        n = len(e)
        loss = float(np.mean(e * e))
        coef = (2.0 / n) * e
        grads = value_grads(net, Z, coef)
        nxt = bundle["_next"]
        Z_next = nxt[side]
        coefs_next = -coef[:, None] * nxt["rows"]
        coefs_next[~nxt["nonterm"]] = 0.0
        g_next = value_grads(net, Z_next.reshape(-1, Z_next.shape[-1]),
                             coefs_next.ravel())
        for k in grads:
            grads[k] = grads[k] + g_next[k]
        return loss, grads

    def major_step_grads(self, batch: Batch, frozen: FrozenPolicies) -> dict:
        """Gradients of the major fitting loss (mode-aware), for one batch."""
        bundle = self.bellman_targets(batch, frozen)
        return self._side_step_grads("major", bundle, self.encode_batch(batch)["major"])[1]

    def minor_step_grads(self, batch: Batch, frozen: FrozenPolicies) -> dict:
        """Gradients of the minor fitting loss (mode-aware), for one batch."""
        bundle = self.bellman_targets(batch, frozen)
        return self._side_step_grads("minor", bundle, self.encode_batch(batch)["minor"])[1]

    # -- training loop -------------------------------------------------------

    def _check_loss(self, loss: float, side: str) -> None:
        if not np.isfinite(loss) or loss > self.config.divergence_threshold:
            raise TrainingDiverged(
                f"{side} fitting loss {loss:.3e} exceeded "
                f"{self.config.divergence_threshold:.3e}"
            )

    def train(self, progress: bool = False) -> TrainResult:
        """Run the full outer/inner schedule and return networks and logs."""
        cfg = self.config
        for n in range(cfg.outer_n):
            frozen = self.freeze_policies()
            hash_before = frozen.probe_hash()
            for m in range(1, cfg.inner_m + 1):
                t0 = time.perf_counter()
                batch = self.sample_training_batch()
                bundle = self.bellman_targets(batch, frozen)
                Z = self.encode_batch(batch)
                loss_major, g_major = self._side_step_grads("major", bundle, Z["major"])
                loss_minor, g_minor = self._side_step_grads("minor", bundle, Z["minor"])
                self._check_loss(loss_major, "major")
                self._check_loss(loss_minor, "minor")
                adam_step(self.response_major, g_major, self.opt_major)
                adam_step(self.response_minor, g_minor, self.opt_minor)
                wall_ms = (time.perf_counter() - t0) * 1e3
                self.records.append(
                    TrainRecord(n + 1, m, loss_major, loss_minor, wall_ms)
                )
            if frozen.probe_hash() != hash_before:
                raise RuntimeError("frozen policies changed during an outer round")
            snap_major = self.response_major.copy()
            snap_minor = self.response_minor.copy()
            if cfg.keep_snapshots:
                self.snapshots_major.append(snap_major)
                self.snapshots_minor.append(snap_minor)
            if n == 0:
                self.avg_major = snap_major.copy()
                self.avg_minor = snap_minor.copy()
            else:
                w_old = n / (n + 1)
                self.avg_major = fp_average(
                    self.avg_major, snap_major, w_old, cfg.averaging_mode,
                    width=cfg.resample_width, rng=self._rng_avg,
                )
                self.avg_minor = fp_average(
                    self.avg_minor, snap_minor, w_old, cfg.averaging_mode,
                    width=cfg.resample_width, rng=self._rng_avg,
                )
            self._extend_replay(self._visited_measures(self.freeze_policies()))
            if self.out_dir is not None and (
                (n + 1) % cfg.checkpoint_every == 0 or n + 1 == cfg.outer_n
            ):
                self._write_outer_checkpoint(n + 1)
            if progress:
                tail = self.records[-cfg.inner_m:]
                print(
                    f"[outer {n + 1}/{cfg.outer_n}] "
                    f"loss_major={tail[-1].loss_major:.3e} "
                    f"loss_minor={tail[-1].loss_minor:.3e} "
                    f"({np.mean([r.wall_ms for r in tail]):.1f} ms/step)"
                )
        if self.out_dir is not None:
            self._write_final_artifacts()
        return TrainResult(
            avg_major=self.avg_major,
            avg_minor=self.avg_minor,
            response_major=self.response_major,
            response_minor=self.response_minor,
            records=self.records,
            snapshots_major=self.snapshots_major,
            snapshots_minor=self.snapshots_minor,
        )

    # -- artifacts -----------------------------------------------------------

    def _layouts(self) -> dict:
        return {
            "major": self.encoder.layout("major"),
            "minor": self.encoder.layout("minor"),
        }

    def _write_outer_checkpoint(self, k: int) -> None:
        save_checkpoint(
            self.out_dir / f"checkpoint_outer_{k:04d}.json",
            networks={
                "avg_major": self.avg_major,
                "avg_minor": self.avg_minor,
                "response_major": self.response_major,
                "response_minor": self.response_minor,
            },
            rng_state=self._rng_sample.bit_generator.state,
            meta={
                "kind": "outer",
                "outer_n": k,
                "layouts": self._layouts(),
                "action_grid": [float(a) for a in self.action_grid],
            },
        )

    def _write_final_artifacts(self) -> None:
        cfg = self.config
        save_checkpoint(
            self.out_dir / "checkpoint_final.json",
            networks={
                "avg_major": self.avg_major,
                "avg_minor": self.avg_minor,
                "response_major": self.response_major,
                "response_minor": self.response_minor,
            },
            optimizers={"major": self.opt_major, "minor": self.opt_minor},
            rng_state=self._rng_sample.bit_generator.state,
            meta={
                "kind": "final",
                "outer_n": cfg.outer_n,
                "config": asdict(cfg),
                "layouts": self._layouts(),
                "action_grid": [float(a) for a in self.action_grid],
                "rng_streams": {
                    "averaging": self._rng_avg.bit_generator.state,
                    "probe": self._rng_probe.bit_generator.state,
                },
            },
        )
        with open(self.out_dir / "losses.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["outer_n", "inner_m", "loss_major", "loss_minor", "wall_ms"]
            )
            for rec in self.records:
                writer.writerow(
                    [rec.outer_n, rec.inner_m, rec.loss_major, rec.loss_minor,
                     rec.wall_ms]
                )
        artifact_names = sorted(
            p.name for p in self.out_dir.glob("checkpoint_*.json")
        ) + ["losses.csv"]
        h = hashlib.sha256()
        for name in artifact_names:
            h.update(name.encode())
            h.update((self.out_dir / name).read_bytes())
        manifest = {
            "config": asdict(cfg),
            "market_params": asdict(self.params),
            "initial_condition": asdict(self.init),
            "grid": {
                "p_points": [float(x) for x in self.grid.p_points],
                "r_points": [float(x) for x in self.grid.r_points],
            },
            "cb_rates": [float(r) for r in self.chain.rates],
            "n_records": len(self.records),
            "artifacts": artifact_names,
            "content_hash": h.hexdigest(),
        }
        with open(self.out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
