"""Finite grid for minor-bank states and bilinear projection of measures.

The population of minor banks lives on a compact rectangle of (share, rate)
states.  Measures over that rectangle are represented by weights on a fixed
lattice of nodes; an arbitrary empirical measure is pushed onto the lattice
by splitting every atom bilinearly across the four corners of its cell, with
weights normalized by the cell area.  The split is convex and preserves both
total mass and first moments exactly, and it is the identity on measures
already supported on the lattice.

The mean-field transition applies a control to every node, lets shares drift
against the *post-decision* rates (so pairwise transfer terms cancel and the
total share across the whole market is conserved), and re-projects.
"""

from dataclasses import dataclass

import numpy as np

from .market import drift_minor


class GridSpec:
    """Ascending share/rate node lattice; nodes enumerate row-major (i, j)."""

    def __init__(self, p_points, r_points):
        self.p_points = np.asarray(p_points, dtype=float)
        self.r_points = np.asarray(r_points, dtype=float)
        if self.p_points.ndim != 1 or len(self.p_points) < 2:
            raise ValueError("p_points must be a 1-D array with >= 2 nodes")
        if self.r_points.ndim != 1 or len(self.r_points) < 2:
            raise ValueError("r_points must be a 1-D array with >= 2 nodes")
        if np.any(np.diff(self.p_points) <= 0) or np.any(np.diff(self.r_points) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        self.n_p = len(self.p_points)
        self.n_r = len(self.r_points)
        self.n_nodes = self.n_p * self.n_r
        pp, rr = np.meshgrid(self.p_points, self.r_points, indexing="ij")
        self.node_p = pp.ravel()
        self.node_r = rr.ravel()

    @classmethod
    def default(cls):
        """Benchmark lattice: 16 share nodes x 6 rate nodes = 96 nodes."""
        return cls(0.20 + 0.04 * np.arange(16), 0.025 + 0.002 * np.arange(6))

    def index(self, i, j):
        return i * self.n_r + j

    def __eq__(self, other):
        return (
            isinstance(other, GridSpec)
            and np.array_equal(self.p_points, other.p_points)
            and np.array_equal(self.r_points, other.r_points)
        )


@dataclass
class EmpiricalMeasure:
    """Finite-support measure: atoms (p, r) with nonnegative weights w."""

    p: np.ndarray
    r: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        self.r = np.atleast_1d(np.asarray(self.r, dtype=float))
        self.w = np.atleast_1d(np.asarray(self.w, dtype=float))
        if not (self.p.shape == self.r.shape == self.w.shape):
            raise ValueError("p, r, w must have matching shapes")
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.r))
                and np.all(np.isfinite(self.w))):
            raise ValueError("measure atoms must be finite")
        if np.any(self.w < 0):
            raise ValueError("atom weights must be nonnegative")


@dataclass
class ProjectedMeasure:
    """Unit-mass measure on a GridSpec lattice: nonnegative weights, sum 1."""

    weights: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.grid.n_nodes,):
            raise ValueError(
                f"expected {self.grid.n_nodes} weights, got {self.weights.shape}"
            )
        if np.any(self.weights < -1e-15) or not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be nonnegative and finite")
        self.weights = np.maximum(self.weights, 0.0)
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()!r}")

    def as_empirical(self):
        return EmpiricalMeasure(self.grid.node_p, self.grid.node_r, self.weights)


def _cell_coords(x, nodes, axis_name, snap=1e-12):
    """Cell index and in-cell offset in [0, 1] for every coordinate."""
    lo, hi = nodes[0], nodes[-1]
    if np.any(x < lo - snap) or np.any(x > hi + snap):
        bad = x[(x < lo - snap) | (x > hi + snap)][0]
        raise ValueError(f"{axis_name}-coordinate {bad!r} outside grid [{lo}, {hi}]")
    x = np.clip(x, lo, hi)
    idx = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, len(nodes) - 2)
    t = (x - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
    return idx, np.clip(t, 0.0, 1.0)


def project(mu, grid):
    """Bilinear projection of an EmpiricalMeasure onto the lattice.

    Every atom splits across the four corners of its cell with the convex
    weights (1-tp)(1-tr), (1-tp)tr, tp(1-tr), tp*tr where tp, tr are the
    offsets inside the cell.  Atoms outside the lattice raise.  Total mass
    must be 1 (the model only projects probability measures).
    """
    if abs(mu.w.sum() - 1.0) > 1e-9:
        raise ValueError(f"projection expects unit total mass, got {mu.w.sum()!r}")
    ip, tp = _cell_coords(mu.p, grid.p_points, "p")
    jr, tr = _cell_coords(mu.r, grid.r_points, "r")
    out = np.zeros(grid.n_nodes)
    base = ip * grid.n_r + jr
    np.add.at(out, base, mu.w * (1 - tp) * (1 - tr))
    np.add.at(out, base + 1, mu.w * (1 - tp) * tr)
    np.add.at(out, base + grid.n_r, mu.w * tp * (1 - tr))
    np.add.at(out, base + grid.n_r + 1, mu.w * tp * tr)
    # tiny negative dust cannot occur (all factors >= 0); renormalization is
    # deliberately absent so mass preservation stays exact
    return ProjectedMeasure(out, grid)


def aggregate_minor_mass(mu):
    """Total share held by the minor banks, int pbar dmu."""
    return float(mu.weights @ mu.grid.node_p)


def uniform_box_measure(grid, p_lo, p_hi, r_lo, r_hi):
    """Exact lattice projection of the uniform distribution on a box.

    Separable: per-axis weights are integrals of the hat basis functions
    against the uniform density, so this equals the limit of projecting an
    ever finer discretization of the box.
    """

    def hat_weights(nodes, lo, hi):
        if lo < nodes[0] - 1e-12 or hi > nodes[-1] + 1e-12 or hi <= lo:
            raise ValueError("box must be nondegenerate and inside the grid")
        out = np.zeros(len(nodes))
        for i in range(len(nodes) - 1):
            a, b = nodes[i], nodes[i + 1]
            aa, bb = max(a, lo), min(b, hi)
            if bb <= aa:
                continue
            h = b - a
            out[i] += ((b - aa) ** 2 - (b - bb) ** 2) / (2 * h)
            out[i + 1] += ((bb - a) ** 2 - (aa - a) ** 2) / (2 * h)
        return out / (hi - lo)

    a = hat_weights(grid.p_points, p_lo, p_hi)
    b = hat_weights(grid.r_points, r_lo, r_hi)
    return ProjectedMeasure(np.outer(a, b).ravel(), grid)


def mean_field_transition(x0, u0, mu, minor_policy, grid, params, on_escape="raise"):
    """One step of the population measure under a minor control function.

    minor_policy(p_nodes, r_nodes) -> posted rates for every lattice node
    (the caller binds time, major state, central-bank rate and the measure
    itself into the closure).  Rates update first; shares then drift against
    the post-decision rates — the convention under which the market's total
    share is conserved — and the moved atoms are re-projected.

    on_escape: "raise" treats a share leaving the lattice as a dynamics bug;
    "clamp" pins it to the boundary (used when evaluating the operator at
    arbitrary sampled measures whose corners can push outward).
    """
    if on_escape not in ("raise", "clamp"):
        raise ValueError("on_escape must be 'raise' or 'clamp'")
    actions = np.asarray(minor_policy(grid.node_p, grid.node_r), dtype=float)
    if actions.shape != (grid.n_nodes,):
        raise ValueError("minor_policy must return one rate per lattice node")
    rlo, rhi = grid.r_points[0], grid.r_points[-1]
    if np.any(actions < rlo - 1e-12) or np.any(actions > rhi + 1e-12):
        raise ValueError("minor_policy produced rates outside the lattice")
    w = mu.weights
    b = drift_minor(actions, grid.node_p, u0, x0.p, grid.node_p, actions, w, params)
    p_next = grid.node_p + b * params.dt
    plo, phi = grid.p_points[0], grid.p_points[-1]
    live = w > 0.0
    outside = live & ((p_next < plo - 1e-12) | (p_next > phi + 1e-12))
    if np.any(outside):
        if on_escape == "raise":
            k = int(np.nonzero(outside)[0][0])
            raise ValueError(
                f"share drifted outside the lattice: node (p={grid.node_p[k]}, "
                f"r={actions[k]}) moved to p={p_next[k]:.6f}"
            )
        p_next = np.clip(p_next, plo, phi)
    # zero-weight nodes may sit arbitrarily after the step; pin them so the
    # projection never rejects an atom that carries no mass
    p_next = np.where(live, p_next, np.clip(p_next, plo, phi))
    return project(EmpiricalMeasure(p_next, actions, w), grid)
