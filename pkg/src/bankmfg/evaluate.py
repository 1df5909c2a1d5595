"""Rollout evaluation and best-response exploitability for trained policies.

Two kinds of questions are answered here.  First, what happens when frozen
policies play the market: :func:`rollout` integrates the coupled system (major
share, population measure, common rate chain) forward, either along sampled
common-rate paths or over the full rate tree, with hard failures on any
dynamics violation — shares leaving their bounds or total market share not
being conserved.  Second, how far from equilibrium the policies are:
:func:`best_response_minor` and :func:`best_response_major` compute the value
a single deviating agent could secure against the frozen crowd, by exact
backward induction respectively exhaustive tree search, and compare it with
the value of following the frozen policy itself.  Both comparisons evaluate
the frozen policy inside the same recursion used for the optimum, so the
reported gap is nonnegative by construction up to float rounding.

Policies enter through :class:`PolicyPair`: plain callables, so hand-written
tables and network-derived greedy rules are interchangeable.
"""

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._kernels import NodeActionArgmaxKernel
from .checkpoint import load_checkpoint
from .market import BankState, drift_major, drift_minor, reward_major
from .measures import ProjectedMeasure, mean_field_transition
from .nets import InputEncoder, forward
from .trainer import InitialCondition, greedy_major_policy

__all__ = [
    "PolicyPair",
    "Trajectory",
    "TrajectoryStep",
    "ValueEstimate",
    "MinorBestResponse",
    "MajorBestResponse",
    "ExploitabilityReport",
    "constant_policies",
    "keep_policies",
    "policies_from_networks",
    "policies_from_checkpoint",
    "rollout",
    "value_estimate",
    "best_response_minor",
    "best_response_major",
    "exploitability_report",
    "write_trajectories_csv",
    "write_report_json",
]


def _vector_cost(dr, params):
    dr = np.abs(np.asarray(dr, dtype=float))
    return params.cost_lin * dr + params.cost_fix * (dr > 1e-12)


# ---------------------------------------------------------------------------
# policies


@dataclass
class PolicyPair:
    """Frozen decision rules for both sides of the market.

    ``major(t, p0, r0, r_c, mu_weights) -> rate`` posts the major's rate.
    ``minor_state(t, p0, r0, r_c, mu_weights, p, r) -> rates`` posts a rate
    for every own-state ``(p[i], r[i])`` of a minor agent observing the same
    public state; ``p`` and ``r`` are parallel arrays.
    """

    major: object
    minor_state: object


def constant_policies(rate):
    """Everyone posts ``rate`` regardless of state."""
    return PolicyPair(
        major=lambda t, p0, r0, r_c, mu: rate,
        minor_state=lambda t, p0, r0, r_c, mu, p, r: np.full(np.shape(p), float(rate)),
    )


def keep_policies():
    """Everyone re-posts their current rate (no adjustments, no costs)."""
    return PolicyPair(
        major=lambda t, p0, r0, r_c, mu: r0,
        minor_state=lambda t, p0, r0, r_c, mu, p, r: np.asarray(r, dtype=float).copy(),
    )


def policies_from_networks(major_net, minor_net, params, grid, action_grid,
                           engine="kernel"):
    """Greedy policies of two value networks as a :class:`PolicyPair`.

    ``engine="kernel"`` runs the minor's argmax sweep through the fused
    float32 kernel (decisions only; exact ties can differ from float64 by
    picking a value-equivalent action).  ``engine="reference"`` evaluates the
    full float64 forward pass.  The major's rule is float64 either way — it
    is a single row sweep.
    """
    ag = np.asarray(action_grid, dtype=float)
    K = grid.n_nodes
    encoder = InputEncoder(params, K)
    if major_net.input_dim != 5 + K or minor_net.input_dim != 7 + K:
        raise ValueError(
            f"networks expect input dims {major_net.input_dim}/{minor_net.input_dim}, "
            f"policies need {5 + K}/{7 + K} for this lattice"
        )
    major = greedy_major_policy(major_net, encoder, ag)

    if engine == "reference":
        def minor_state(t, p0, r0, r_c, mu, p, r):
            p = np.atleast_1d(np.asarray(p, dtype=float))
            r = np.atleast_1d(np.asarray(r, dtype=float))
            n, A = len(p), len(ag)
            Z = encoder.encode_minor(
                np.full(n * A, t), np.full(n * A, p0), np.full(n * A, r0),
                np.repeat(p, A), np.repeat(r, A), np.tile(ag, n),
                np.full(n * A, r_c),
                np.tile(np.asarray(mu, dtype=float), (n * A, 1)),
            )
            V = forward(minor_net, Z).reshape(n, A)
            return ag[np.argmax(V, axis=1)]
    elif engine == "kernel":
        cache = {}

        def minor_state(t, p0, r0, r_c, mu, p, r):
            p = np.atleast_1d(np.asarray(p, dtype=float))
            r = np.atleast_1d(np.asarray(r, dtype=float))
            key = (p.tobytes(), r.tobytes())
            kern = cache.get(key)
            if kern is None:
                if len(cache) >= 8:
                    cache.clear()
                node_vals = np.column_stack(
                    [encoder.scale_p(p), encoder.scale_r(r)]
                )
                kern = NodeActionArgmaxKernel(
                    minor_net, [0, 1, 2, 6] + list(range(7, 7 + K)),
                    (3, 4), node_vals, 5, encoder.scale_r(ag),
                )
                cache[key] = kern
            shared = np.concatenate([
                [float(encoder.scale_t(t)), float(encoder.scale_p(p0)),
                 float(encoder.scale_r(r0)), float(encoder.scale_r(r_c))],
                np.asarray(mu, dtype=float),
            ])[None, :]
            return ag[kern(shared)[0]]
    else:
        raise ValueError("engine must be 'kernel' or 'reference'")

    return PolicyPair(major=major, minor_state=minor_state)


def policies_from_checkpoint(path, params, grid, engine="kernel", which="auto"):
    """Greedy policies of a stored network pair, plus the checkpoint meta.

    ``which`` selects the pair: ``"response"`` is the latest best-response
    pair — the policies the run converges to and the pair rollouts and
    exploitability reports should use; ``"average"`` is the fictitious-play
    running average, kept as the anchor that generates the training flow.
    The averaged pair is rebuilt by width-preserving resampling every round,
    and that Monte-Carlo noise accumulates, so its greedy actions degrade
    wherever action values sit closer together than the noise floor.  The
    default ``"auto"`` takes the response pair when the checkpoint carries
    one and falls back to the averaged pair otherwise.
    """
    data = load_checkpoint(path)
    nets = data["networks"]
    pairs = {
        "response": ("response_major", "response_minor"),
        "average": ("avg_major", "avg_minor"),
    }
    if which == "auto":
        which = "response" if all(n in nets for n in pairs["response"]) else "average"
    if which not in pairs:
        raise ValueError("which must be 'auto', 'response' or 'average'")
    major_name, minor_name = pairs[which]
    for name in (major_name, minor_name):
        if name not in nets:
            raise ValueError(f"{path}: checkpoint has no '{name}' network")
    meta = data["meta"]
    try:
        ag = np.asarray(meta["action_grid"], dtype=float)
    except KeyError:
        raise ValueError(f"{path}: checkpoint meta lacks the action grid")
    layouts = meta.get("layouts", {})
    n_measure = layouts.get("minor", {}).get("n_measure")
    if n_measure is not None and n_measure != grid.n_nodes:
        raise ValueError(
            f"{path}: checkpoint encodes {n_measure} measure weights, "
            f"the given lattice has {grid.n_nodes} nodes"
        )
    pair = policies_from_networks(
        nets[major_name], nets[minor_name], params, grid, ag, engine=engine
    )
    return pair, meta


# ---------------------------------------------------------------------------
# rollout


@dataclass
class TrajectoryStep:
    """Market state and one-period outcomes at a single decision epoch.

    ``reward_major`` is the undiscounted one-period profit of the major;
    ``reward_minor_mean`` integrates the representative minor's one-period
    profit over the population measure.  ``minor_mass`` is the total share
    held by minors before the step's transition, ``minor_mean_rate`` the
    measure-weighted post-decision rate, and ``max_node_drift`` the largest
    share movement of any node carrying mass (a per-step change bound).
    """

    t: int
    r_c: float
    p0: float
    r0: float
    u0: float
    reward_major: float
    minor_mass: float
    minor_mean_rate: float
    reward_minor_mean: float
    max_node_drift: float
    mu: np.ndarray


@dataclass
class Trajectory:
    """One common-rate path: per-epoch steps, its probability weight, and
    the chain-state index at every epoch."""

    steps: list
    prob: float
    rc_indices: tuple

    def value_major(self, gamma):
        return float(sum(gamma ** s.t * s.reward_major for s in self.steps))

    def value_minor(self, gamma):
        return float(sum(gamma ** s.t * s.reward_minor_mean for s in self.steps))


@dataclass
class _FlowNode:
    t: int
    rc_idx: int
    p0: float
    r0: float
    u0: float
    mu: np.ndarray
    rates: np.ndarray
    step: TrajectoryStep
    parent: int
    prob_in: float
    next_state: tuple  # (p0, r0, mu_weights) shared by all children, or None


def _advance(policies, params, chain, grid, t, rc_idx, p0, r0, w):
    """Evaluate policies at one state; return the step record, the node
    rates, and the post-transition state (None at the last epoch).

    Raises on dynamics violations: a node share leaving the lattice (via the
    measure transition), the major share leaving [0, 1], or the total market
    share not being conserved to 1e-9.
    """
    r_c = chain.rates[rc_idx]
    u0 = float(policies.major(t, p0, r0, r_c, w))
    rates = np.asarray(
        policies.minor_state(t, p0, r0, r_c, w, grid.node_p, grid.node_r),
        dtype=float,
    )
    if rates.shape != (grid.n_nodes,):
        raise ValueError("minor policy must return one rate per lattice node")
    b = drift_minor(rates, grid.node_p, u0, p0, grid.node_p, rates, w, params)
    live = w > 1e-12
    step = TrajectoryStep(
        t=t,
        r_c=r_c,
        p0=p0,
        r0=r0,
        u0=u0,
        reward_major=reward_major(BankState(p0, r0), u0, r_c, params),
        minor_mass=float(w @ grid.node_p),
        minor_mean_rate=float(w @ rates),
        reward_minor_mean=float(
            w @ (params.W * grid.node_p * (params.l_minor + r_c - rates)
                 - _vector_cost(rates - grid.node_r, params))
        ),
        max_node_drift=float(np.max(np.abs(b[live]))) if live.any() else 0.0,
        mu=w.copy(),
    )
    if t >= params.horizon_T - 1:
        return step, rates, None
    mu_next = mean_field_transition(
        BankState(p0, r0), u0, ProjectedMeasure(w, grid),
        lambda node_p, node_r: rates, grid, params, on_escape="raise",
    )
    b0 = drift_major(u0, p0, grid.node_p, rates, w, params)
    p0_next = p0 + b0 * params.dt
    if not 0.0 <= p0_next <= 1.0:
        raise RuntimeError(
            f"major share left [0, 1]: p0 + b0*dt = {p0_next!r} at t={t}"
        )
    before = p0 + step.minor_mass
    after = p0_next + float(mu_next.weights @ grid.node_p)
    if abs(after - before) > 1e-9:
        raise RuntimeError(
            f"total market share not conserved at t={t}: {before!r} -> {after!r}"
        )
    return step, rates, (p0_next, u0, mu_next.weights)


def _initial_weights(init, mu0, grid):
    if mu0 is None:
        return init.measure(grid).weights
    return ProjectedMeasure(np.asarray(mu0, dtype=float).copy(), grid).weights


def _flow_tree(policies, params, chain, grid, init, w0):
    """Level-by-level common-rate tree under the frozen policies.

    Children of one node share the post-transition market state; they differ
    only in the realized next chain state, so level t holds n_cb^t nodes and
    the children of node i sit at positions i*n_cb + j of the next level.
    """
    M = chain.transition_matrix()
    n_cb = len(chain.rates)
    root_rc = chain.index(init.r_c)
    step, rates, nxt = _advance(policies, params, chain, grid, 0, root_rc,
                                init.p0, init.r0, w0)
    levels = [[_FlowNode(0, root_rc, init.p0, init.r0, step.u0, step.mu,
                         rates, step, -1, 1.0, nxt)]]
    for t in range(1, params.horizon_T):
        level = []
        for i, node in enumerate(levels[t - 1]):
            p0n, r0n, wn = node.next_state
            row = M[node.rc_idx]
            for j in range(n_cb):
                step, rates, nxt = _advance(policies, params, chain, grid,
                                            t, j, p0n, r0n, wn)
                level.append(_FlowNode(t, j, p0n, r0n, step.u0, step.mu,
                                       rates, step, i, float(row[j]), nxt))
        levels.append(level)
    return levels


def _tree_trajectories(levels):
    paths = []
    for leaf in levels[-1]:
        chain_nodes = [leaf]
        node, t = leaf, len(levels) - 1
        while node.parent >= 0:
            node = levels[t - 1][node.parent]
            chain_nodes.append(node)
            t -= 1
        chain_nodes.reverse()
        prob = 1.0
        for n in chain_nodes:
            prob *= n.prob_in
        paths.append(Trajectory(
            steps=[n.step for n in chain_nodes],
            prob=prob,
            rc_indices=tuple(n.rc_idx for n in chain_nodes),
        ))
    return paths


def rollout(policies, params, chain, grid, init=None, mu0=None,
            mode="full-tree", n_paths=None, rng=None):
    """Integrate the market forward under frozen policies.

    ``mode="full-tree"`` enumerates every common-rate path (n_cb^(T-1)
    trajectories whose probabilities sum to one).  ``mode="sampled"`` draws
    ``n_paths`` independent chain paths with ``rng``; each trajectory then
    carries probability 1/n_paths.  Any state leaving its admissible range
    is a hard failure, not a clamp: it indicates a dynamics bug.
    """
    init = InitialCondition() if init is None else init
    w0 = _initial_weights(init, mu0, grid)
    if mode == "full-tree":
        if n_paths is not None or rng is not None:
            raise ValueError("full-tree mode enumerates all paths; "
                             "n_paths and rng do not apply")
        return _tree_trajectories(_flow_tree(policies, params, chain, grid,
                                             init, w0))
    if mode != "sampled":
        raise ValueError("mode must be 'full-tree' or 'sampled'")
    if rng is None or n_paths is None or int(n_paths) < 1:
        raise ValueError("sampled mode needs rng and n_paths >= 1")
    n_paths = int(n_paths)
    M = chain.transition_matrix()
    n_cb = len(chain.rates)
    out = []
    for _ in range(n_paths):
        rc_idx = chain.index(init.r_c)
        p0, r0, w = init.p0, init.r0, w0
        steps, rc_path = [], []
        for t in range(params.horizon_T):
            step, _, nxt = _advance(policies, params, chain, grid, t, rc_idx,
                                    p0, r0, w)
            steps.append(step)
            rc_path.append(rc_idx)
            if nxt is not None:
                p0, r0, w = nxt
                rc_idx = int(rng.choice(n_cb, p=M[rc_idx]))
        out.append(Trajectory(steps=steps, prob=1.0 / n_paths,
                              rc_indices=tuple(rc_path)))
    return out


@dataclass
class ValueEstimate:
    """Discounted values of both sides under frozen policies.

    Full-tree mode is exact (probability-weighted sum over every path) and
    leaves the standard errors as None; sampled mode reports the mean over
    paths with the standard error of that mean (None for a single path).
    """

    major: float
    minor: float
    major_se: object
    minor_se: object
    mode: str
    n_paths: object


def value_estimate(policies, params, chain, grid, init=None, mu0=None,
                   mode="full-tree", n_paths=None, rng=None):
    trajs = rollout(policies, params, chain, grid, init=init, mu0=mu0,
                    mode=mode, n_paths=n_paths, rng=rng)
    g = params.gamma
    if mode == "full-tree":
        return ValueEstimate(
            major=float(sum(t.prob * t.value_major(g) for t in trajs)),
            minor=float(sum(t.prob * t.value_minor(g) for t in trajs)),
            major_se=None, minor_se=None, mode=mode, n_paths=None,
        )
    vmaj = np.array([t.value_major(g) for t in trajs])
    vmin = np.array([t.value_minor(g) for t in trajs])
    n = len(trajs)
    se = (lambda v: float(np.std(v, ddof=1) / np.sqrt(n))) if n > 1 else None
    return ValueEstimate(
        major=float(vmaj.mean()), minor=float(vmin.mean()),
        major_se=se(vmaj) if se else None, minor_se=se(vmin) if se else None,
        mode=mode, n_paths=n,
    )


# ---------------------------------------------------------------------------
# best responses


def _grid_index(values, grid_vals, what):
    """Indices of ``values`` on a sorted grid, 1e-9-tolerant; raises if any
    value is not a grid point."""
    values = np.atleast_1d(np.asarray(values, dtype=float))
    pos = np.clip(np.searchsorted(grid_vals, values), 1, len(grid_vals) - 1)
    pick = np.where(
        np.abs(values - grid_vals[pos - 1]) <= np.abs(grid_vals[pos] - values),
        pos - 1, pos,
    )
    err = np.abs(grid_vals[pick] - values)
    if np.any(err > 1e-9):
        k = int(np.argmax(err))
        raise ValueError(f"{what} {values[k]!r} is not on the grid")
    return pick


def _check_action_grid(ag, grid):
    ag = np.asarray(ag, dtype=float)
    if ag.ndim != 1 or len(ag) < 2 or np.any(np.diff(ag) <= 0):
        raise ValueError("action grid must be a strictly increasing 1-D array")
    if ag[0] < grid.r_points[0] - 1e-12 or ag[-1] > grid.r_points[-1] + 1e-12:
        raise ValueError("action grid must lie within the lattice rate range")
    return ag


@dataclass(frozen=True)
class MinorBestResponse:
    """Deviating minor's exact value against the frozen flow, next to the
    value of following the frozen policy through the same recursion.

    ``value_flow`` is the measure-aggregated on-policy value from the rollout
    (it smears mass across lattice cells, so it can differ from
    ``value_learned`` by interpolation effects; the gap below compares
    like-for-like deviator values and is nonnegative by construction).
    ``tolerance`` is the float-rounding floor under which a gap is
    indistinguishable from zero.
    """

    value_learned: float
    value_br: float
    gap_abs: float
    gap_rel: float
    value_flow: float
    p_grid_points: int
    action_count: int
    horizon: int
    tolerance: float = 1e-9

    def __post_init__(self):
        if self.gap_abs < -self.tolerance:
            raise RuntimeError(
                "best-response value fell below the frozen policy's own value; "
                "the twin recursions are inconsistent"
            )


def best_response_minor(policies, params, chain, grid, init=None, mu0=None,
                        action_grid=None, p_grid_points=121, p_grid=None):
    """Exact best response of one deviating minor by backward induction.

    The crowd is frozen: the common-rate tree of measures and major states is
    computed once, then the deviator's value is solved on (own share grid x
    own rate grid x tree node), linearly interpolating continuation values in
    the share coordinate (own rates stay on the action grid by construction).
    A twin pass replaces the max with the frozen policy's own action to get
    the learned value under identical numerics.
    """
    init = InitialCondition() if init is None else init
    ag = _check_action_grid(
        np.linspace(params.rate_min, params.rate_max, 11)
        if action_grid is None else action_grid, grid)
    if p_grid is None:
        p_grid = np.linspace(params.prop_min, params.prop_max, int(p_grid_points))
    else:
        p_grid = np.asarray(p_grid, dtype=float)
        if p_grid.ndim != 1 or len(p_grid) < 2 or np.any(np.diff(p_grid) <= 0):
            raise ValueError("p_grid must be a strictly increasing 1-D array")
    w0 = _initial_weights(init, mu0, grid)
    levels = _flow_tree(policies, params, chain, grid, init, w0)
    M = chain.transition_matrix()
    n_cb = len(chain.rates)
    nP, nA = len(p_grid), len(ag)
    cost = _vector_cost(ag[None, :] - ag[:, None], params)  # (own rate, action)
    mesh_p = np.repeat(p_grid, nA)
    mesh_r = np.tile(ag, nP)

    V_next, Vpi_next = None, None
    for t in range(params.horizon_T - 1, -1, -1):
        disc = params.gamma ** t
        V_here, Vpi_here = [], []
        for i, node in enumerate(levels[t]):
            r_c = chain.rates[node.rc_idx]
            margin = params.W * p_grid[:, None] * (params.l_minor + r_c - ag[None, :])
            reward = disc * (margin[:, None, :] - cost[None, :, :])  # (P, r, a)
            if t == params.horizon_T - 1:
                Q, Qpi = reward, reward
            else:
                # the deviator's drift is affine in its own share: two calls
                # at p=0 and p=1 recover intercept and decay exactly
                gain = drift_minor(ag, 0.0, node.u0, node.p0, grid.node_p,
                                   node.rates, node.mu, params)
                decay = gain - drift_minor(ag, 1.0, node.u0, node.p0,
                                           grid.node_p, node.rates, node.mu,
                                           params)
                row = M[node.rc_idx]
                cont = np.zeros((nA, nP))
                cont_pi = np.zeros((nA, nP))
                for a in range(nA):
                    p_next = p_grid * (1.0 - params.dt * decay[a]) \
                        + params.dt * gain[a]
                    for j in range(n_cb):
                        if row[j] == 0.0:
                            continue
                        child = i * n_cb + j
                        cont[a] += row[j] * np.interp(p_next, p_grid,
                                                      V_next[child][:, a])
                        cont_pi[a] += row[j] * np.interp(p_next, p_grid,
                                                         Vpi_next[child][:, a])
                Q = reward + cont.T[:, None, :]
                Qpi = reward + cont_pi.T[:, None, :]
            V_here.append(Q.max(axis=2))
            acts = policies.minor_state(t, node.p0, node.r0, r_c, node.mu,
                                        mesh_p, mesh_r)
            aidx = _grid_index(acts, ag, "frozen minor policy action")
            Vpi_here.append(
                np.take_along_axis(Qpi.reshape(nP * nA, nA), aidx[:, None],
                                   axis=1).reshape(nP, nA)
            )
        V_next, Vpi_next = V_here, Vpi_here

    live = np.nonzero(w0 > 0.0)[0]
    ridx = _grid_index(grid.node_r[live], ag, "initial measure rate coordinate")
    value_br = float(sum(
        w0[k] * np.interp(grid.node_p[k], p_grid, V_next[0][:, j])
        for k, j in zip(live, ridx)))
    value_pi = float(sum(
        w0[k] * np.interp(grid.node_p[k], p_grid, Vpi_next[0][:, j])
        for k, j in zip(live, ridx)))

    probs = [np.array([1.0])]
    for t in range(params.horizon_T - 1):
        nxt = np.empty(len(levels[t + 1]))
        for i, node in enumerate(levels[t]):
            nxt[i * n_cb:(i + 1) * n_cb] = probs[t][i] * M[node.rc_idx]
        probs.append(nxt)
    value_flow = float(sum(
        probs[t][i] * params.gamma ** t * node.step.reward_minor_mean
        for t in range(params.horizon_T)
        for i, node in enumerate(levels[t])))

    gap = value_br - value_pi
    return MinorBestResponse(
        value_learned=value_pi, value_br=value_br, gap_abs=gap,
        gap_rel=gap / max(abs(value_pi), 1e-12), value_flow=value_flow,
        p_grid_points=len(p_grid), action_count=nA, horizon=params.horizon_T,
    )


@dataclass(frozen=True)
class MajorBestResponse:
    """Major's exact best response on the truncated game next to the frozen
    policy's value over the same horizon, computed in the same recursion."""

    value_learned: float
    value_br: float
    gap_abs: float
    gap_rel: float
    horizon: int
    action_count: int
    tolerance: float = 1e-9

    def __post_init__(self):
        if self.gap_abs < -self.tolerance:
            raise RuntimeError(
                "best-response value fell below the frozen policy's own value; "
                "the twin recursions are inconsistent"
            )


def best_response_major(policies, params, chain, grid, init=None, mu0=None,
                        action_grid=None, horizon=3, budget=200_000):
    """Exhaustive major best response over the first ``horizon`` epochs.

    The population reacts to every candidate action through the full measure
    transition, so the search tree branches over (action x next chain state)
    and is exact for the truncated objective; it refuses to start when
    (actions * chain states)^horizon exceeds ``budget``.  The frozen major's
    own truncated value is computed in the same recursion (its action instead
    of the max), making the gap nonnegative by construction.
    """
    init = InitialCondition() if init is None else init
    ag = _check_action_grid(
        np.linspace(params.rate_min, params.rate_max, 11)
        if action_grid is None else action_grid, grid)
    horizon = int(horizon)
    if not 1 <= horizon <= params.horizon_T:
        raise ValueError("horizon must lie in 1..horizon_T")
    n_cb = len(chain.rates)
    tree_size = (len(ag) * n_cb) ** horizon
    if tree_size > budget:
        raise ValueError(
            f"search tree has {tree_size} leaves, over the budget of {budget}; "
            f"reduce the horizon or the action grid"
        )
    M = chain.transition_matrix()
    w0 = _initial_weights(init, mu0, grid)

    def search(t, p0, r0, rc_idx, w):
        r_c = chain.rates[rc_idx]
        rates = np.asarray(
            policies.minor_state(t, p0, r0, r_c, w, grid.node_p, grid.node_r),
            dtype=float,
        )
        a_pi = int(_grid_index(float(policies.major(t, p0, r0, r_c, w)), ag,
                               "frozen major policy action")[0])
        rewards = params.gamma ** t * (
            params.W * p0 * (params.l_major + r_c - ag)
            - _vector_cost(ag - r0, params)
        )
        if t == horizon - 1:
            return float(rewards.max()), float(rewards[a_pi])
        row = M[rc_idx]
        v_br = np.empty(len(ag))
        v_pi_each = np.empty(len(ag))
        for ai, a in enumerate(ag):
            mu_next = mean_field_transition(
                BankState(p0, r0), float(a), ProjectedMeasure(w, grid),
                lambda node_p, node_r: rates, grid, params, on_escape="raise",
            )
            b0 = drift_major(float(a), p0, grid.node_p, rates, w, params)
            p0_next = p0 + b0 * params.dt
            if not 0.0 <= p0_next <= 1.0:
                raise RuntimeError(
                    f"major share left [0, 1] during search: {p0_next!r}"
                )
            e_br = e_pi = 0.0
            for j in range(n_cb):
                if row[j] == 0.0:
                    continue
                c_br, c_pi = search(t + 1, p0_next, float(a), j,
                                    mu_next.weights)
                e_br += row[j] * c_br
                e_pi += row[j] * c_pi
            v_br[ai] = rewards[ai] + e_br
            v_pi_each[ai] = rewards[ai] + e_pi
        return float(v_br.max()), float(v_pi_each[a_pi])

    value_br, value_pi = search(0, init.p0, init.r0, chain.index(init.r_c), w0)
    gap = value_br - value_pi
    return MajorBestResponse(
        value_learned=value_pi, value_br=value_br, gap_abs=gap,
        gap_rel=gap / max(abs(value_pi), 1e-12), horizon=horizon,
        action_count=len(ag),
    )


@dataclass
class ExploitabilityReport:
    """Best-response gaps for both sides against one frozen policy pair."""

    major: MajorBestResponse
    minor: MinorBestResponse


def exploitability_report(policies, params, chain, grid, init=None, mu0=None,
                          action_grid=None, p_grid_points=121,
                          major_horizon=3, major_budget=200_000):
    return ExploitabilityReport(
        major=best_response_major(policies, params, chain, grid, init=init,
                                  mu0=mu0, action_grid=action_grid,
                                  horizon=major_horizon, budget=major_budget),
        minor=best_response_minor(policies, params, chain, grid, init=init,
                                  mu0=mu0, action_grid=action_grid,
                                  p_grid_points=p_grid_points),
    )


# ---------------------------------------------------------------------------
# file outputs


def write_trajectories_csv(trajectories, path):
    """One row per (path, epoch): path id, probability, state, per-period
    outcomes, then the full measure weights as mu_000.. columns."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories to write")
    K = len(trajectories[0].steps[0].mu)
    header = ["path", "prob", "t", "r_c", "p0", "r0", "u0", "reward_major",
              "minor_mass", "minor_mean_rate", "reward_minor_mean",
              "max_node_drift"] + [f"mu_{k:03d}" for k in range(K)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for pid, traj in enumerate(trajectories):
            for s in traj.steps:
                writer.writerow(
                    [pid, traj.prob, s.t, s.r_c, s.p0, s.r0, s.u0,
                     s.reward_major, s.minor_mass, s.minor_mean_rate,
                     s.reward_minor_mean, s.max_node_drift]
                    + [float(x) for x in s.mu]
                )


def write_report_json(report, path):
    payload = {"major": asdict(report.major), "minor": asdict(report.minor)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
