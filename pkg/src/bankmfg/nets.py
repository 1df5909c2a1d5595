"""One-hidden-layer value networks viewed as empirical measures over neurons.

A network of width ``L`` computes

    f(z) = (1/L) * sum_l  beta_l * phi(alpha_l . z + c_l)

i.e. the average neuron output under the empirical measure that puts mass
1/L on each neuron ``(beta_l, alpha_l, c_l)``.  The measure view is what
makes averaging two trained networks exact: a convex combination of two
networks is again a network, built by concatenating their neurons with
rescaled output weights (see :func:`fp_average`).

The module provides the forward pass, analytic gradients of the mean
squared residual, an Adam optimizer, seeded initialization, greedy action
selection over a rate grid, and the input encodings used by the major and
minor value networks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .market import MarketParams

_ACTIVATIONS = ("relu", "tanh")


@dataclass
class Neuron:
    """A single hidden unit: output weight, input weights, and bias."""

    out_weight: float
    in_weights: np.ndarray
    bias: float


@dataclass
class NeuronMeasure:
    """Width-``L`` one-hidden-layer network stored as parallel arrays.

    ``alpha`` has shape ``(L, d)``, ``c`` and ``beta`` have shape ``(L,)``.
    """

    alpha: np.ndarray
    c: np.ndarray
    beta: np.ndarray
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        if self.alpha.ndim != 2:
            raise ValueError("alpha must have shape (width, input_dim)")
        L = self.alpha.shape[0]
        if self.c.shape != (L,) or self.beta.shape != (L,):
            raise ValueError("c and beta must have shape (width,)")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def width(self) -> int:
        return self.alpha.shape[0]

    @property
    def input_dim(self) -> int:
        return self.alpha.shape[1]

    def neurons(self):
        """Iterate over the atoms of the measure."""
        for l in range(self.width):
            yield Neuron(float(self.beta[l]), self.alpha[l].copy(), float(self.c[l]))

    def copy(self) -> "NeuronMeasure":
        return NeuronMeasure(
            self.alpha.copy(), self.c.copy(), self.beta.copy(), self.activation
        )


def init_neuron_measure(
    input_dim: int, width: int, rng: np.random.Generator, activation: str = "relu"
) -> NeuronMeasure:
    """Seeded uniform init: alpha, c ~ U(+-1/sqrt(d)), beta ~ U(+-1/sqrt(L))."""
    sa = 1.0 / np.sqrt(input_dim)
    sb = 1.0 / np.sqrt(width)
    return NeuronMeasure(
        alpha=rng.uniform(-sa, sa, size=(width, input_dim)),
        c=rng.uniform(-sa, sa, size=width),
        beta=rng.uniform(-sb, sb, size=width),
        activation=activation,
    )


def _phi(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _phi_prime(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (pre > 0.0).astype(float)
    t = np.tanh(pre)
    return 1.0 - t * t


def forward(net: NeuronMeasure, Z: np.ndarray) -> np.ndarray | float:
    """Evaluate the network on inputs ``Z`` of shape ``(n, d)`` or ``(d,)``."""
    Z = np.asarray(Z, dtype=float)
    single = Z.ndim == 1
    Z2 = Z[None, :] if single else Z
    pre = Z2 @ net.alpha.T + net.c
    out = _phi(pre, net.activation) @ net.beta / net.width
    return float(out[0]) if single else out


def _grads_from_parts(net, Z, pre, h, coefs):
    """Gradients of sum_b coefs_b * f(z_b) given cached forward parts."""
    g_beta = (coefs @ h) / net.width
    d_pre = np.outer(coefs, net.beta / net.width) * _phi_prime(pre, net.activation)
    g_alpha = d_pre.T @ Z
    g_c = d_pre.sum(axis=0)
    return {"alpha": g_alpha, "c": g_c, "beta": g_beta}


def value_grads(net: NeuronMeasure, Z: np.ndarray, coefs: np.ndarray) -> dict:
    """Per-parameter gradient of the weighted value sum ``sum_b coefs_b f(z_b)``."""
    Z = np.asarray(Z, dtype=float)
    coefs = np.asarray(coefs, dtype=float)
    pre = Z @ net.alpha.T + net.c
    h = _phi(pre, net.activation)
    return _grads_from_parts(net, Z, pre, h, coefs)


def loss_and_grads(net: NeuronMeasure, Z: np.ndarray, targets: np.ndarray):
    """Mean squared residual ``mean((f(Z) - targets)^2)`` and its gradients.

    Targets are treated as constants (no gradient flows through them), which
    is the semi-gradient convention used when they are Bellman targets built
    from a frozen copy of the network.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = Z.shape[0]
    pre = Z @ net.alpha.T + net.c           # (n, L)
    h = _phi(pre, net.activation)
    f = h @ net.beta / net.width
    e = f - y
    loss = float(np.mean(e * e))
    grads = _grads_from_parts(net, Z, pre, h, (2.0 / n) * e)
    return loss, grads


@dataclass
class OptimizerState:
    """Adam state for one :class:`NeuronMeasure` (first/second moments, step)."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_net(cls, net: NeuronMeasure, lr: float = 0.001, **kw) -> "OptimizerState":
        state = cls(lr=lr, **kw)
        for name in ("alpha", "c", "beta"):
            arr = getattr(net, name)
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(net: NeuronMeasure, grads: dict, state: OptimizerState) -> None:
    """One in-place Adam update of ``net`` from ``grads``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in ("alpha", "c", "beta"):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        getattr(net, name).__isub__(update)


def fp_average(
    old: NeuronMeasure,
    new: NeuronMeasure,
    weight_old: float,
    mode: str = "exact-concat",
    width: int | None = None,
    rng: np.random.Generator | None = None,
) -> NeuronMeasure:
    """Convex combination ``weight_old * old + (1 - weight_old) * new``.

    ``exact-concat`` concatenates the neurons and rescales output weights so
    the result is pointwise exact; widths add.  ``resample`` draws ``width``
    neurons i.i.d. from the mixture measure, keeping the width bounded at
    the cost of O(1/sqrt(width)) Monte Carlo error.
    """
    if not 0.0 <= weight_old <= 1.0:
        raise ValueError("weight_old must lie in [0, 1]")
    if old.activation != new.activation:
        raise ValueError("cannot average networks with different activations")
    if old.input_dim != new.input_dim:
        raise ValueError("cannot average networks with different input dims")
    w = float(weight_old)
    if mode == "exact-concat" and w == 0.0:
        return new.copy()
    if mode == "exact-concat" and w == 1.0:
        return old.copy()
    if mode == "exact-concat":
        L1, L2 = old.width, new.width
        L = L1 + L2
        return NeuronMeasure(
            alpha=np.vstack([old.alpha, new.alpha]),
            c=np.concatenate([old.c, new.c]),
            beta=np.concatenate(
                [old.beta * (w * L / L1), new.beta * ((1.0 - w) * L / L2)]
            ),
            activation=old.activation,
        )
    if mode == "resample":
        if width is None or rng is None:
            raise ValueError("resample mode needs width and rng")
        take_old = rng.random(width) < w
        idx_old = rng.integers(0, old.width, size=width)
        idx_new = rng.integers(0, new.width, size=width)
        alpha = np.where(take_old[:, None], old.alpha[idx_old], new.alpha[idx_new])
        c = np.where(take_old, old.c[idx_old], new.c[idx_new])
        beta = np.where(take_old, old.beta[idx_old], new.beta[idx_new])
        return NeuronMeasure(alpha, c, beta, old.activation)
    raise ValueError(f"unknown averaging mode {mode!r}")


def greedy_action(net: NeuronMeasure, make_inputs, action_grid) -> float:
    """Action on the grid maximizing the network value; ties pick the lowest rate.

    ``make_inputs(actions)`` must return the ``(A, d)`` input batch for the
    candidate actions.  ``np.argmax`` returns the first maximizer, and the
    grid is ascending, so exact ties resolve to the lowest rate.
    """
    actions = np.asarray(action_grid, dtype=float)
    values = forward(net, make_inputs(actions))
    return float(actions[int(np.argmax(values))])


class InputEncoder:
    """Builds value-network inputs from market states.

    The major network sees ``(t, p0, r0, u0, r_c)`` plus the projected-measure
    weights; the minor network sees ``(t, p0, r0, p, r, u, r_c)`` plus the
    weights.  Time is scaled by the horizon, proportions by the admissible
    proportion range, rates by the admissible rate range; measure weights
    enter raw (they already live in [0, 1] and sum to one).
    """

    _MAJOR_COLS = ("t", "p0", "r0", "u0", "r_c")
    _MINOR_COLS = ("t", "p0", "r0", "p", "r", "u", "r_c")

    def __init__(self, params: MarketParams, n_measure: int) -> None:
        self.params = params
        self.n_measure = int(n_measure)

    @property
    def major_dim(self) -> int:
        return len(self._MAJOR_COLS) + self.n_measure

    @property
    def minor_dim(self) -> int:
        return len(self._MINOR_COLS) + self.n_measure

    def scale_t(self, t):
        return np.asarray(t, dtype=float) / self.params.horizon_T

    def scale_p(self, p):
        lo, hi = self.params.prop_min, self.params.prop_max
        return (np.asarray(p, dtype=float) - lo) / (hi - lo)

    def scale_r(self, r):
        lo, hi = self.params.rate_min, self.params.rate_max
        return (np.asarray(r, dtype=float) - lo) / (hi - lo)

    def _stack(self, cols, mu):
        mu = np.asarray(mu, dtype=float)
        cols = [np.asarray(c, dtype=float) for c in cols]
        batched = any(c.ndim > 0 for c in cols) or mu.ndim == 2
        if not batched:
            return np.concatenate([np.array(cols), mu])
        n = mu.shape[0] if mu.ndim == 2 else max(c.shape[0] for c in cols if c.ndim)
        out = np.empty((n, len(cols) + self.n_measure))
        for j, c in enumerate(cols):
            out[:, j] = c
        out[:, len(cols):] = mu
        return out

    def encode_major(self, t, p0, r0, u0, r_c, mu) -> np.ndarray:
        """Input for the major value network: state, action, common rate, measure."""
        return self._stack(
            [self.scale_t(t), self.scale_p(p0), self.scale_r(r0), self.scale_r(u0), self.scale_r(r_c)], mu
        )

    def encode_minor(self, t, p0, r0, p, r, u, r_c, mu) -> np.ndarray:
        """Input for the minor value network: major state, own state, action, common rate, measure."""
        return self._stack(
            [
                self.scale_t(t),
                self.scale_p(p0),
                self.scale_r(r0),
                self.scale_p(p),
                self.scale_r(r),
                self.scale_r(u),
                self.scale_r(r_c),
            ],
            mu,
        )

    def layout(self, kind: str) -> dict:
        """Serializable descriptor of the input layout for checkpoints."""
        cols = self._MAJOR_COLS if kind == "major" else self._MINOR_COLS
        return {
            "kind": kind,
            "columns": list(cols),
            "n_measure": self.n_measure,
            "input_dim": len(cols) + self.n_measure,
            "horizon_T": self.params.horizon_T,
            "prop_bounds": [self.params.prop_min, self.params.prop_max],
            "rate_bounds": [self.params.rate_min, self.params.rate_max],
        }
