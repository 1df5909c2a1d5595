"""
How far from equilibrium: best-response gaps
============================================

A policy pair is a Nash equilibrium when no single bank — the large one,
or any lone member of the crowd — can raise its own discounted profit by
deviating while everyone else keeps playing.  That definition is directly
computable here: freeze a policy pair, compute each side's exact best
response against it, and report the value gained by deviating.  A zero gap
certifies equilibrium; a positive gap measures the distance from it.

This script scores two pairs on the same pocket market: a do-nothing
baseline in which every bank simply re-posts its inherited rate, and the
pair found by a short fictitious-play run.

Run it directly::

    python3 demos/03_distance_to_nash.py
"""

import tempfile
from pathlib import Path

import numpy as np

from bankmfg import (
    CentralBankChain,
    FictitiousPlayTrainer,
    GridSpec,
    InitialCondition,
    MarketParams,
    PolicyPair,
    TrainConfig,
    exploitability_report,
    policies_from_checkpoint,
)

###############################################################################
# The pocket market
# -----------------
# Same escape-proof geometry as the training demo: three epochs, three
# candidate rates, a seven-by-three lattice, two central-bank levels.

params = MarketParams(horizon_T=3, l_major=0.0, l_minor=0.001)
# literal node values so the initial box edges coincide with lattice nodes
# exactly (see the training demo for why)
grid = GridSpec(p_points=[0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
                r_points=[0.025, 0.030, 0.035])
chain = CentralBankChain(rates=(0.025, 0.035), lam=0.25)
init = InitialCondition(p0=0.5, r0=0.030, r_c=0.025,
                        mu_p_lo=0.4, mu_p_hi=0.6,
                        mu_r_lo=0.025, mu_r_hi=0.035)
actions = np.linspace(params.rate_min, params.rate_max, 3)


def score(label, policies):
    # The major side is searched exhaustively over the full three-epoch
    # action tree (exact for this horizon); the minor side runs dynamic
    # programming on a deviator share grid against the frozen flow.
    report = exploitability_report(policies, params, chain, grid, init=init,
                                   action_grid=actions, major_horizon=3)
    print("\n%s" % label)
    for side, br in (("major", report.major), ("minor", report.minor)):
        print("  %s: value %+.6f, best deviation %+.6f, gap %.2e (%.2f%%)"
              % (side, br.value_learned, br.value_br, br.gap_abs,
                 100.0 * br.gap_rel))
    return report


###############################################################################
# Baseline: everyone holds their inherited rate
# ---------------------------------------------
# Re-posting costs nothing, so this pair is maximally lazy.  It is far from
# equilibrium: against a frozen crowd a deviator can undercut to the floor,
# pocket the wider margin, and lose few depositors thanks to viscosity.

hold = PolicyPair(
    major=lambda t, p0, r0, r_c, mu: r0,
    minor_state=lambda t, p0, r0, r_c, mu, p, r: np.asarray(r, dtype=float).copy(),
)
score("hold-your-rate baseline", hold)

###############################################################################
# The trained pair
# ----------------
# A short fictitious-play run on the same market; the loader returns the
# final best-reply pair stored in the checkpoint.

out = Path(tempfile.mkdtemp(prefix="bankmfg-nash-"))
config = TrainConfig(outer_n=6, inner_m=80, batch_b=16, width=16,
                     resample_width=16, action_count=3, seed=0)
FictitiousPlayTrainer(params, chain, grid, config, init=init,
                      out_dir=out).train()

trained, _ = policies_from_checkpoint(out / "checkpoint_final.json",
                                      params, grid)
score("trained pair (race to the floor)", trained)

# Undercutting is pointless against a crowd already at the floor, and
# raising rates buys share too slowly to pay for itself over this horizon:
# the gaps vanish, certifying the floor race as the market's equilibrium.

###############################################################################
# The fictitious-play average, for contrast
# -----------------------------------------
# Checkpoints also store the running average that anchors training.  After
# six rounds on a market this small it agrees with the best reply, and its
# gaps below come out zero too.  But the average is rebuilt by Monte-Carlo
# resampling every round, and over long runs that sampling noise
# accumulates until greedy play wobbles wherever action values sit closer
# together than the noise floor — which is why the loader prefers the
# best-reply pair whenever the checkpoint carries one.

averaged, _ = policies_from_checkpoint(out / "checkpoint_final.json",
                                       params, grid, which="average")
score("running-average pair", averaged)
