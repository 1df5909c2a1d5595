"""Discrete-time deposit-rate market: one major bank vs a continuum of minors.

Clients chase higher deposit rates but are sticky: a client leaves bank i for
bank j only when j's rate beats i's by more than i's own viscosity delta_i,
and then flows out at bank i's escape rate kappa_i.  Gains and losses built
this way cancel pairwise, so the total market share p0 + int pbar dmu is
conserved whenever every bank's drift is evaluated against the same posted
rates.

Proportions follow an explicit Euler step p' = p + b*dt (clamped to [0, 1]);
posted rates follow the chosen actions.  Banks earn W*p*(premium + r_c - u)
minus a cost for moving their posted rate.
"""

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MarketParams:
    """Market constants; defaults are the benchmark profile used throughout."""

    kappa_major: float = 5.0    # escape rate of the major's clients
    kappa_minor: float = 5.0    # escape rate of a minor's clients
    delta_major: float = 0.001  # viscosity protecting the major's clients
    delta_minor: float = 0.001  # viscosity protecting a minor's clients
    W: float = 1.0              # deposit volume scale
    l_major: float = 0.0        # major's margin premium over the central rate
    l_minor: float = 0.001      # minor's margin premium
    gamma: float = 0.9          # discount factor
    cost_lin: float = 0.1       # proportional rate-adjustment cost
    cost_fix: float = 0.001     # fixed cost for any rate change
    horizon_T: int = 5          # number of decision epochs t = 0..T-1
    dt: float = 1.0
    rate_min: float = 0.025
    rate_max: float = 0.035
    prop_min: float = 0.20
    prop_max: float = 0.80

    def __post_init__(self):
        if self.rate_max <= self.rate_min:
            raise ValueError("rate_max must exceed rate_min")
        if self.prop_max <= self.prop_min:
            raise ValueError("prop_max must exceed prop_min")
        if self.horizon_T < 1:
            raise ValueError("horizon_T must be >= 1")
        for name in ("kappa_major", "kappa_minor", "delta_major", "delta_minor",
                     "dt", "cost_lin", "cost_fix"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass
class BankState:
    """A bank's state: market share p and currently posted rate r."""

    p: float
    r: float


def _pos(x):
    """Positive part, the threshold nonlinearity of every transfer term."""
    return np.maximum(x, 0.0)


def drift_major(u0, p0, mu_p, mu_r, mu_w, params):
    """Share drift of the major bank posting u0 against minors (mu_p, mu_r, mu_w).

    gain: minors' clients arrive when u0 beats their bank's rate by its
    viscosity, at the minors' escape rate, in proportion to the minors' share.
    loss: the major's own clients leave toward any minor paying more than
    u0 + delta_major, at the major's escape rate, in proportion to p0.
    """
    mu_r = np.asarray(mu_r, dtype=float)
    gain = params.kappa_minor * (
        _pos(u0 - mu_r - params.delta_minor) * mu_p
    ) @ np.asarray(mu_w, dtype=float)
    loss = params.kappa_major * (
        _pos(mu_r - u0 - params.delta_major) @ np.asarray(mu_w, dtype=float)
    ) * p0
    return gain - loss


def drift_minor(u, p, u0, p0, mu_p, mu_r, mu_w, params):
    """Share drift of a minor bank posting u with share p.

    Four transfer terms: gains from the major and from other minors whose
    clients u out-bids past their viscosity, and symmetric losses to the
    major and to better-paying minors.  `u` and `p` broadcast elementwise,
    so one call evaluates a whole grid of candidate (u, p) pairs against a
    fixed population.  Note: the bound |b| <= kappa*(rate span - viscosity)
    holds whenever p0 + int pbar dmu = 1 and own p <= 0.5; in general the
    loss side is bounded by twice that times own p.
    """
    u = np.asarray(u, dtype=float)
    p = np.asarray(p, dtype=float)
    mu_p = np.asarray(mu_p, dtype=float)
    mu_r = np.asarray(mu_r, dtype=float)
    mu_w = np.asarray(mu_w, dtype=float)
    uu = u[..., None]
    gain_major = params.kappa_major * _pos(u - u0 - params.delta_major) * p0
    gain_minors = params.kappa_minor * (
        _pos(uu - mu_r - params.delta_minor) @ (mu_w * mu_p)
    )
    loss_major = params.kappa_minor * _pos(u0 - u - params.delta_minor) * p
    loss_minors = params.kappa_minor * (
        _pos(mu_r - uu - params.delta_minor) @ mu_w
    ) * p
    out = gain_major + gain_minors - loss_major - loss_minors
    return out if out.ndim else float(out)


def _euler_clamp(p, b, dt, who):
    p_next = p + b * dt
    if p_next < 0.0 or p_next > 1.0:
        warnings.warn(
            f"{who} proportion clamped: p + b*dt = {p_next:.6f} outside [0, 1]",
            RuntimeWarning,
            stacklevel=3,
        )
        p_next = min(max(p_next, 0.0), 1.0)
    return p_next


def transition_major(state, u0, mu_p, mu_r, mu_w, params):
    """One Euler step of the major: share moves by the drift, rate becomes u0."""
    b = drift_major(u0, state.p, mu_p, mu_r, mu_w, params)
    return BankState(_euler_clamp(state.p, b, params.dt, "major"), u0)


def transition_minor(state, u, u0, p0, mu_p, mu_r, mu_w, params):
    """One Euler step of a minor bank posting u; rate becomes u."""
    b = drift_minor(u, state.p, u0, p0, mu_p, mu_r, mu_w, params)
    return BankState(_euler_clamp(state.p, float(b), params.dt, "minor"), u)


def adjustment_cost(dr, params):
    """Cost of moving the posted rate by dr: linear part plus a fixed charge.

    The fixed charge triggers on |dr| > 1e-12 rather than dr != 0 so that
    float dust from grid arithmetic does not count as a rate change.
    """
    dr = abs(dr)
    return params.cost_lin * dr + (params.cost_fix if dr > 1e-12 else 0.0)


def reward_major(state, u0, r_c, params):
    """Major's one-period profit: margin on deposits minus adjustment cost."""
    margin = params.W * state.p * (params.l_major + r_c - u0)
    return margin - adjustment_cost(u0 - state.r, params)


def reward_minor(state, u, r_c, params):
    """A minor's one-period profit: margin on deposits minus adjustment cost."""
    margin = params.W * state.p * (params.l_minor + r_c - u)
    return margin - adjustment_cost(u - state.r, params)


class CentralBankChain:
    """Finite-state Markov chain for the central-bank rate r_c.

    With intensity lam, over one step of length dt the rate stays put with
    probability 1 - lam*dt and jumps to each of the other states with equal
    probability lam*dt / (n - 1).  An explicit row-stochastic matrix can be
    supplied instead.
    """

    def __init__(self, rates=(0.025, 0.030, 0.035), lam=0.2, dt=1.0, matrix=None):
        self.rates = tuple(float(r) for r in rates)
        self.lam = float(lam)
        self.dt = float(dt)
        n = len(self.rates)
        if n < 1:
            raise ValueError("need at least one central-bank rate")
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise ValueError("central-bank rates must be strictly increasing")
        if matrix is None:
            if n < 2:
                raise ValueError(
                    "the default jump matrix needs at least two rates; "
                    "pass an explicit matrix for a degenerate chain"
                )
            jump = self.lam * self.dt
            if not 0.0 <= jump <= 1.0:
                raise ValueError("lam*dt must lie in [0, 1]")
            M = np.full((n, n), jump / (n - 1))
            np.fill_diagonal(M, 1.0 - jump)
        else:
            M = np.asarray(matrix, dtype=float)
            if M.shape != (n, n):
                raise ValueError(f"matrix must be {n}x{n}")
            if np.any(M < 0) or np.max(np.abs(M.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError("matrix rows must be nonnegative and sum to 1")
        self._matrix = M
        self._rates_arr = np.array(self.rates)

    def index(self, r_c):
        """Index of r_c among the chain's states (1e-9-tolerant)."""
        hits = np.nonzero(np.abs(self._rates_arr - r_c) < 1e-9)[0]
        if len(hits) != 1:
            raise ValueError(f"{r_c} is not a central-bank rate {self.rates}")
        return int(hits[0])

    def transition_matrix(self):
        return self._matrix.copy()

    def transition_row(self, r_c):
        """Distribution of the next rate given the current one."""
        return self._matrix[self.index(r_c)].copy()

    def sample(self, r_c, rng):
        """Draw the next rate from the row of r_c using rng."""
        row = self._matrix[self.index(r_c)]
        return float(rng.choice(self._rates_arr, p=row))
