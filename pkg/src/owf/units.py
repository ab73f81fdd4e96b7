"""Unit conversions used throughout the package.

User-facing quantities follow water-utility convention: heads and
elevations in feet, demands and flows in gallons per minute (GPM),
time steps in hours.  All internal computation runs in a consistent
(ft, ft^3/h, h) system; every conversion between the two lives here.

Chezy-Manning resistance coefficients produced by
``resistance_chezy_manning`` are stated for flow in cubic feet per
second (CFS), the convention of the underlying empirical formula, so
a separate factor converts them to the internal ft^3/h flow unit.
"""

GAL_PER_FT3 = 7.480519480519481

# 1 GPM expressed in ft^3/h.
GPM_TO_FT3H = 60.0 / GAL_PER_FT3

# 1 CFS expressed in ft^3/h.
CFS_TO_FT3H = 3600.0

SECONDS_PER_HOUR = 3600.0


def gpm_to_internal(q_gpm: float) -> float:
    """GPM -> ft^3/h."""
    return q_gpm * GPM_TO_FT3H


def internal_to_gpm(q_ft3h: float) -> float:
    """ft^3/h -> GPM."""
    return q_ft3h / GPM_TO_FT3H


def resistance_cfs_to_internal(r_cfs: float) -> float:
    """Convert a head-loss coefficient h = r * q^2 from q-in-CFS to q-in-ft^3/h."""
    return r_cfs / (CFS_TO_FT3H * CFS_TO_FT3H)
