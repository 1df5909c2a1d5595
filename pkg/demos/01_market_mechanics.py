"""
Deposit-share mechanics: sticky depositors, drifts, and the lattice
===================================================================

One large bank and a continuum of small ones compete for depositors by
posting deposit rates.  Depositors chase better rates, but imperfectly:
they ignore differences below a viscosity threshold, and only an escape
fraction of them moves per period.  This script walks through the three
market primitives everything else is built on — the share drifts, the
posting cost, and the projected population measure — with numbers small
enough to check by hand.

Run it directly::

    python3 demos/01_market_mechanics.py
"""

import numpy as np

from bankmfg import (
    BankState,
    CentralBankChain,
    EmpiricalMeasure,
    GridSpec,
    MarketParams,
    adjustment_cost,
    aggregate_minor_mass,
    drift_major,
    drift_minor,
    mean_field_transition,
    project,
    uniform_box_measure,
)

params = MarketParams()
print("posting band          [%.3f, %.3f]" % (params.rate_min, params.rate_max))
print("escape intensities    major %.1f  minor %.1f" % (params.kappa_major, params.kappa_minor))
print("viscosity thresholds  major %.4f  minor %.4f" % (params.delta_major, params.delta_minor))

###############################################################################
# Drifts and the viscosity dead zone
# ----------------------------------
# A small bank's share moves against everyone paying attention to it: it
# gains depositors from banks posting meaningfully less and loses them to
# banks posting meaningfully more.  "Meaningfully" is the viscosity delta —
# rate gaps at or below it move nobody.  Park the whole crowd and the large
# bank at 3.1% and watch a single deviator's drift as it sweeps its own
# posted rate across the band.

crowd_p = np.array([0.5])      # one representative crowd state ...
crowd_r = np.array([0.031])    # ... everyone posting 3.1%
crowd_w = np.array([1.0])

print("\ndeviator at p = 0.50 against a crowd and major bank all at 3.1%:")
print("  posted   drift per period")
for u in (0.025, 0.0295, 0.0305, 0.031, 0.0315, 0.0325, 0.035):
    b = drift_minor(u, 0.5, 0.031, 0.5, crowd_p, crowd_r, crowd_w, params)
    tag = "   (within viscosity: nobody moves)" if abs(b) < 1e-15 else ""
    print("  %.4f   %+.6f%s" % (u, b, tag))

# The dead zone is exact: gaps of one viscosity or less produce a drift of
# exactly zero, so undercutting by a hair is free.  Beyond the threshold
# flows ramp linearly in the gap net of viscosity, scaled by the share at
# stake and the escape intensity — depositors discount every advertised
# advantage by the bother of moving.

###############################################################################
# Posting is cheap to hold, costly to move
# ----------------------------------------
# Re-posting the same rate costs nothing.  Any change pays a fixed fee plus
# a linear charge on the size of the move, which is what makes rate paths
# sticky rather than jittery.

print("\nadjustment costs:")
for dr in (0.0, 0.001, 0.005, 0.010):
    print("  move of %.3f costs %.6f" % (dr, adjustment_cost(dr, params)))

###############################################################################
# The central-bank rate is a two-way Markov chain
# -----------------------------------------------
# Margins are earned against a policy rate that jumps between a few levels.
# Its one-period transition matrix is the only source of common randomness
# in the market.

chain = CentralBankChain()
M = chain.transition_matrix()
print("\ncentral-bank levels:", [float(r) for r in chain.rates])
print("one-period transition matrix:")
for i, row in enumerate(M):
    print("  from %.3f:" % chain.rates[i], "  ".join("%.3f" % x for x in row))

###############################################################################
# The population lives on a lattice
# ---------------------------------
# The crowd of small banks is a measure over (share, posted rate).  To keep
# every computation finite the measure is stored as weights on a fixed grid;
# off-grid mass is split bilinearly over the four surrounding nodes, which
# preserves total mass and both first moments exactly.

grid = GridSpec.default()
print("\nlattice: %d share levels x %d rate levels = %d nodes"
      % (len(grid.p_points), len(grid.r_points), len(grid.node_p)))

atoms = EmpiricalMeasure(
    p=np.array([0.41, 0.50, 0.57]),
    r=np.array([0.0252, 0.0301, 0.0343]),
    w=np.array([0.2, 0.5, 0.3]),
)
mu = project(atoms, grid)
print("three off-grid atoms spread over %d grid nodes" % np.count_nonzero(mu.weights))
print("  mass        %.15f  ->  %.15f" % (atoms.w.sum(), mu.weights.sum()))
print("  mean share  %.15f  ->  %.15f"
      % (float(atoms.w @ atoms.p), float(mu.weights @ grid.node_p)))
print("  mean rate   %.15f  ->  %.15f"
      % (float(atoms.w @ atoms.r), float(mu.weights @ grid.node_r)))

###############################################################################
# One period of the whole market
# ------------------------------
# Start the crowd uniform over the middle of the lattice, let every small
# bank post the cap while the large bank posts the floor, and advance one
# period.  Deposits leave the large bank; whatever it loses, the crowd
# gains, so total share is conserved to machine precision.

mu0 = uniform_box_measure(grid, 0.40, 0.60, 0.025, 0.035)
p0, r0 = 0.5, params.rate_min
post_cap = lambda node_p, node_r: np.full(node_p.shape, params.rate_max)

mu1 = mean_field_transition(BankState(p0, r0), r0, mu0, post_cap, grid, params)
b0 = drift_major(r0, p0, grid.node_p, post_cap(grid.node_p, grid.node_r),
                 mu0.weights, params)
p0_next = p0 + b0 * params.dt

print("\neveryone posts %.3f while the major holds %.3f:" % (params.rate_max, r0))
print("  major share   %.4f -> %.4f  (drift %+.4f)" % (p0, p0_next, b0))
print("  crowd share   %.4f -> %.4f"
      % (aggregate_minor_mass(mu0), aggregate_minor_mass(mu1)))
print("  share unaccounted for: %.2e"
      % abs(p0_next + aggregate_minor_mass(mu1) - 1.0))
