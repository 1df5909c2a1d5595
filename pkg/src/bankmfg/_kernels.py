"""Fused single-core evaluation paths for the training loop.

The training loop repeatedly evaluates frozen value networks on structured
input batches in which only two or three coordinates vary across a lattice
(node position, candidate action, next common rate).  Exploiting that
structure, the network input is split as

    z = z_shared + node-projection + action-projection

so the shared part is one matrix product per batch and the lattice sweep is
a fused float32 loop over precomputed per-neuron node/action terms.  The
measure transition is likewise reduced to O(1) work per lattice node by
aggregating the population by posted rate (all rates live on the action
grid) and reading pairwise exchange intensities from small tables.

Float32 is used only inside the node-action argmax sweep, whose output is
a grid of greedy decisions rather than accumulated values.  Pair sweeps
return float64 values (Bellman targets are built from them, and the
residual-gradient mode differentiates through them), and all measure
arithmetic is float64, matching the reference implementations in
:mod:`bankmfg.market` and :mod:`bankmfg.measures` to ~1e-12.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .market import MarketParams
from .measures import GridSpec

_F32 = np.float32


@njit(cache=True, fastmath=True)
def _node_action_argmax(S, N, A, beta, use_tanh):
    """argmax over actions of sum_l phi(S[b,l]+N[k,l]+A[a,l]) * beta[l].

    Strict ``>`` keeps the first maximizer, so exact ties resolve to the
    lowest action index (the grids are ascending).
    """
    B, L = S.shape
    K = N.shape[0]
    nA = A.shape[0]
    out = np.empty((B, K), np.int64)
    buf = np.empty(L, _F32)
    for b in range(B):
        for k in range(K):
            for l in range(L):
                buf[l] = S[b, l] + N[k, l]
            best = _F32(-1e30)
            besta = 0
            for a in range(nA):
                acc = _F32(0.0)
                if use_tanh:
                    for l in range(L):
                        acc += np.tanh(buf[l] + A[a, l]) * beta[l]
                else:
                    for l in range(L):
                        pre = buf[l] + A[a, l]
                        if pre > _F32(0.0):
                            acc += pre * beta[l]
                if acc > best:
                    best = acc
                    besta = a
            out[b, k] = besta
    return out


@njit(cache=True, fastmath=True)
def _pair_sweep(S, T1, T2, beta, use_tanh):
    """Network values on the (B, n1, n2) grid of two varying coordinates."""
    B, L = S.shape
    n1 = T1.shape[0]
    n2 = T2.shape[0]
    out = np.empty((B, n1, n2), np.float64)
    buf = np.empty(L, np.float64)
    for b in range(B):
        for i in range(n1):
            for l in range(L):
                buf[l] = S[b, l] + T1[i, l]
            for j in range(n2):
                acc = 0.0
                if use_tanh:
                    for l in range(L):
                        acc += np.tanh(buf[l] + T2[j, l]) * beta[l]
                else:
                    for l in range(L):
                        pre = buf[l] + T2[j, l]
                        if pre > 0.0:
                            acc += pre * beta[l]
                out[b, i, j] = acc
    return out


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=_F32)


class NodeActionArgmaxKernel:
    """Greedy action index at every lattice node, for one frozen network.

    The network input columns are split into ``shared_cols`` (supplied per
    batch element), ``node_cols`` (taking the values in ``node_vals``, one
    row per lattice node, already scaled) and a single ``action_col``
    sweeping ``action_vals`` (already scaled).
    """

    def __init__(self, net, shared_cols, node_cols, node_vals, action_col, action_vals):
        shared_cols = list(shared_cols)
        node_vals = np.asarray(node_vals, dtype=float)
        action_vals = np.asarray(action_vals, dtype=float)
        if sorted(shared_cols + list(node_cols) + [action_col]) != list(
            range(net.input_dim)
        ):
            raise ValueError("column split must cover every input column exactly once")
        self._a_shared = _f32(net.alpha[:, shared_cols])
        self._c = _f32(net.c)
        self._beta = _f32(net.beta / net.width)
        self._N = _f32(node_vals @ net.alpha[:, list(node_cols)].T)
        self._A = _f32(np.outer(action_vals, net.alpha[:, action_col]))
        self._use_tanh = net.activation == "tanh"
        self.n_nodes = node_vals.shape[0]
        self.n_actions = action_vals.shape[0]

    def __call__(self, Z_shared: np.ndarray) -> np.ndarray:
        S = _f32(Z_shared) @ self._a_shared.T + self._c
        return _node_action_argmax(S, self._N, self._A, self._beta, self._use_tanh)


class PairSweepKernel:
    """Network values over a (vals1 x vals2) grid of two varying columns.

    With ``col2=None`` only one column varies and the output has shape
    (B, n1, 1).  Runs in float64: these values become Bellman targets, and
    the residual-gradient mode takes finite differences through them.
    """

    def __init__(self, net, shared_cols, col1, vals1, col2=None, vals2=None):
        shared_cols = list(shared_cols)
        var_cols = [col1] if col2 is None else [col1, col2]
        if sorted(shared_cols + var_cols) != list(range(net.input_dim)):
            raise ValueError("column split must cover every input column exactly once")
        f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)
        self._a_shared = f64(net.alpha[:, shared_cols])
        self._c = f64(net.c)
        self._beta = f64(net.beta / net.width)
        self._T1 = f64(np.outer(np.asarray(vals1, dtype=float), net.alpha[:, col1]))
        if col2 is None:
            self._T2 = np.zeros((1, net.width), dtype=np.float64)
        else:
            self._T2 = f64(np.outer(np.asarray(vals2, dtype=float), net.alpha[:, col2]))
        self._use_tanh = net.activation == "tanh"

    def __call__(self, Z_shared: np.ndarray) -> np.ndarray:
        S = np.ascontiguousarray(Z_shared, dtype=np.float64) @ self._a_shared.T + self._c
        return _pair_sweep(S, self._T1, self._T2, self._beta, self._use_tanh)


class MeasureStepper:
    """Batched measure transitions for lattice measures with grid-valued rates.

    Every posted rate (lattice nodes and the major alike) lies on the action
    grid, so the population enters the drift only through its per-action
    mass and share-mass aggregates; pairwise exchange intensities become
    (n_actions, n_actions) tables.  Matches
    :func:`bankmfg.measures.mean_field_transition` with ``on_escape="clamp"``.
    """

    def __init__(self, grid: GridSpec, action_grid, params: MarketParams):
        self.grid = grid
        self.params = params
        u = np.asarray(action_grid, dtype=float)
        if np.any(np.diff(u) <= 0):
            raise ValueError("action grid must be strictly increasing")
        if u[0] < grid.r_points[0] - 1e-12 or u[-1] > grid.r_points[-1] + 1e-12:
            raise ValueError("action grid must lie within the lattice rate range")
        hp = np.diff(grid.p_points)
        if not np.allclose(hp, hp[0], rtol=0, atol=1e-12):
            raise ValueError("lattice share axis must be uniform")
        self.actions = u
        self._hp = float(hp[0])
        self._plo = float(grid.p_points[0])
        self._phi = float(grid.p_points[-1])
        nA = len(u)
        pos = lambda x: np.maximum(x, 0.0)
        km, kM = params.kappa_minor, params.kappa_major
        dm, dM = params.delta_minor, params.delta_major
        du = u[:, None] - u[None, :]  # du[i, j] = u_i - u_j
        # minor <-> minor exchange at the leaving bank's own viscosity
        self._G = km * pos(du - dm)                 # gain of i from minors at j
        # minor gains from / loses to the major
        self._GM = kM * pos(du - dM)                # [i, i0]: clients leave the major
        self._LM = km * pos(-du - dm)               # [i, i0]: clients leave the minor
        # major drift against the per-action aggregates
        self._T_in = km * pos(-du.T - dm)           # [i0, a] = km*(u0_i0 - u_a - dm)+
        self._T_out = kM * pos(du.T - dM)           # [i0, a] = kM*(u_a - u0_i0 - dM)+
        # rate-side projection of each action onto the lattice rate axis
        r = grid.r_points
        j_lo = np.empty(nA, dtype=np.int64)
        j_hi = np.empty(nA, dtype=np.int64)
        tr = np.empty(nA)
        for a, v in enumerate(u):
            j = int(np.searchsorted(r, v + 1e-12) - 1)
            j = min(max(j, 0), len(r) - 2)
            if abs(v - r[j]) <= 1e-12:
                j_lo[a] = j_hi[a] = j
                tr[a] = 0.0
            elif abs(v - r[j + 1]) <= 1e-12:
                j_lo[a] = j_hi[a] = j + 1
                tr[a] = 0.0
            else:
                j_lo[a], j_hi[a] = j, j + 1
                tr[a] = (v - r[j]) / (r[j + 1] - r[j])
        self._j_lo, self._j_hi, self._tr = j_lo, j_hi, tr

    def _aggregates(self, weights, act_idx):
        """Per-action mass W and share-mass PW, shape (B, n_actions)."""
        B, K = weights.shape
        nA = len(self.actions)
        flat = act_idx + nA * np.arange(B)[:, None]
        W = np.bincount(flat.ravel(), weights.ravel(), minlength=B * nA)
        PW = np.bincount(
            flat.ravel(), (weights * self.grid.node_p).ravel(), minlength=B * nA
        )
        return W.reshape(B, nA), PW.reshape(B, nA)

    def _node_drift(self, W, PW, act_idx, u0_idx, p0):
        gain_minors = np.take_along_axis(PW @ self._G.T, act_idx, axis=1)
        loss_minors = np.take_along_axis(W @ self._G, act_idx, axis=1)
        gain_major = self._GM[act_idx, u0_idx[:, None]]
        loss_major = self._LM[act_idx, u0_idx[:, None]]
        node_p = self.grid.node_p[None, :]
        return (
            p0[:, None] * gain_major
            + gain_minors
            - node_p * (loss_major + loss_minors)
        )

    def step(self, weights, act_idx, u0_idx, p0):
        """One transition for B measures at once.

        weights: (B, K) lattice weights; act_idx: (B, K) per-node action
        indices; u0_idx: (B,) major action indices; p0: (B,) major shares.
        Returns (new_weights (B, K), b0 (B,)) where b0 is the major's drift
        against the post-decision population.
        """
        weights = np.asarray(weights, dtype=float)
        act_idx = np.asarray(act_idx)
        u0_idx = np.asarray(u0_idx)
        p0 = np.asarray(p0, dtype=float)
        B, K = weights.shape
        if K != self.grid.n_nodes:
            raise ValueError("weights must have one column per lattice node")
        W, PW = self._aggregates(weights, act_idx)
        b = self._node_drift(W, PW, act_idx, u0_idx, p0)
        b0 = (PW * self._T_in[u0_idx]).sum(axis=1) - p0 * (
            W * self._T_out[u0_idx]
        ).sum(axis=1)

        p_next = self.grid.node_p[None, :] + b * self.params.dt
        np.clip(p_next, self._plo, self._phi, out=p_next)
        x = (p_next - self._plo) / self._hp
        i = np.clip(np.floor(x).astype(np.int64), 0, self.grid.n_p - 2)
        tp = np.clip(x - i, 0.0, 1.0)

        j_lo = self._j_lo[act_idx]
        j_hi = self._j_hi[act_idx]
        tr = self._tr[act_idx]
        n_r = self.grid.n_r
        boff = self.grid.n_nodes * np.arange(B)[:, None]
        idx = np.concatenate(
            [
                (boff + i * n_r + j_lo).ravel(),
                (boff + i * n_r + j_hi).ravel(),
                (boff + (i + 1) * n_r + j_lo).ravel(),
                (boff + (i + 1) * n_r + j_hi).ravel(),
            ]
        )
        val = np.concatenate(
            [
                (weights * (1 - tp) * (1 - tr)).ravel(),
                (weights * (1 - tp) * tr).ravel(),
                (weights * tp * (1 - tr)).ravel(),
                (weights * tp * tr).ravel(),
            ]
        )
        new_w = np.bincount(idx, val, minlength=B * self.grid.n_nodes)
        return new_w.reshape(B, self.grid.n_nodes), b0

    def tagged_drift(self, weights, act_idx, u0_idx, p0, p_tag, u_tag_idx):
        """Drift of one tagged minor (share p_tag, posted rate index u_tag_idx)
        against the same post-decision population; shapes all (B, ...)."""
        W, PW = self._aggregates(np.asarray(weights, dtype=float), act_idx)
        u_tag_idx = np.asarray(u_tag_idx)
        u0_idx = np.asarray(u0_idx)
        p_tag = np.asarray(p_tag, dtype=float)
        p0 = np.asarray(p0, dtype=float)
        B = W.shape[0]
        rows = np.arange(B)
        gain_minors = (PW @ self._G.T)[rows, u_tag_idx]
        loss_minors = (W @ self._G)[rows, u_tag_idx]
        gain_major = self._GM[u_tag_idx, u0_idx]
        loss_major = self._LM[u_tag_idx, u0_idx]
        return p0 * gain_major + gain_minors - p_tag * (loss_major + loss_minors)
