"""Radio channel model: attenuation -> RSSI -> frame loss probability.

The attenuation-to-RSSI lookup is piecewise linear through measured
anchor points (the mapping is not a single linear offset because of
front-end saturation at strong signals).  Frame loss is a logistic
function of RSSI; its three parameters are fitted against reference
mean connect durations by re-simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

DEFAULT_MASTER_TX_DBM = 10.0
DEFAULT_DEVICE_TX_DBM = 4.0
DEFAULT_OFF_ATTENUATION_DB = 103.0

# Measured (attenuation dB, RSSI dBm) anchors for the wired test setup.
DEFAULT_RSSI_ANCHORS = (
    (30.0, -37.0),
    (50.0, -53.0),
    (65.0, -67.0),
    (80.0, -83.0),
    (83.0, -87.0),
    (85.0, -89.0),
)

FSPL_CONST_DB = 147.55  # 20*log10(4*pi/c)


class InvalidParameter(ValueError):
    pass


class CalibrationDiverged(RuntimeError):
    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or {}


@dataclass(frozen=True)
class LinkBudget:
    master_tx_power_dbm: float = DEFAULT_MASTER_TX_DBM
    device_tx_power_dbm: float = DEFAULT_DEVICE_TX_DBM
    off_attenuation_db: float = DEFAULT_OFF_ATTENUATION_DB


@dataclass(frozen=True)
class RssiMap:
    """Ordered (attenuation, rssi) anchors; attenuation strictly increasing,
    rssi strictly decreasing."""

    anchors: tuple[tuple[float, float], ...] = DEFAULT_RSSI_ANCHORS

    def __post_init__(self):
        if len(self.anchors) < 2:
            raise InvalidParameter("at least two anchor points required")
        attens = [a for a, _ in self.anchors]
        rssis = [r for _, r in self.anchors]
        if any(b <= a for a, b in zip(attens, attens[1:])):
            raise InvalidParameter("anchor attenuations must be strictly increasing")
        if any(b >= a for a, b in zip(rssis, rssis[1:])):
            raise InvalidParameter("anchor rssi values must be strictly decreasing")

    def rssi(self, atten_db: float) -> float:
        return rssi_from_attenuation(atten_db, self)


@dataclass(frozen=True)
class PerCurve:
    """Logistic frame-loss curve: floor + (1-floor)/(1 + exp(slope*(rssi - mid)))."""

    rssi_mid: float
    slope: float
    floor: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.floor < 0.05:
            raise InvalidParameter(f"floor {self.floor} outside [0, 0.05)")
        if self.slope <= 0.0:
            raise InvalidParameter("slope must be positive")

    def per(self, rssi_dbm: float) -> float:
        return per_from_rssi(rssi_dbm, self)


# Fitted with calibrate_per_curve against the reference mean connect
# durations (seed 2024, budget 12); see the calibrate CLI subcommand.
DEFAULT_PER_CURVE = PerCurve(rssi_mid=-90.0, slope=0.6, floor=0.0)


def rssi_from_attenuation(atten_db: float, rssi_map: RssiMap = RssiMap()) -> float:
    """Piecewise-linear interpolation; linear extrapolation beyond the ends."""
    if not 0.0 <= atten_db <= 120.0:
        raise InvalidParameter(f"attenuation {atten_db} dB outside [0, 120]")
    anchors = rssi_map.anchors
    if atten_db <= anchors[0][0]:
        (a0, r0), (a1, r1) = anchors[0], anchors[1]
    elif atten_db >= anchors[-1][0]:
        (a0, r0), (a1, r1) = anchors[-2], anchors[-1]
    else:
        for (a0, r0), (a1, r1) in zip(anchors, anchors[1:]):
            if a0 <= atten_db <= a1:
                break
    return r0 + (r1 - r0) * (atten_db - a0) / (a1 - a0)


def per_from_rssi(rssi_dbm: float, curve: PerCurve = DEFAULT_PER_CURVE) -> float:
    x = curve.slope * (rssi_dbm - curve.rssi_mid)
    if x > 700.0:
        logistic = 0.0
    elif x < -700.0:
        logistic = 1.0
    else:
        logistic = 1.0 / (1.0 + math.exp(x))
    return curve.floor + (1.0 - curve.floor) * logistic


def sample_frame_loss(per: float, rng) -> bool:
    """True iff the frame is lost; rng is a numpy Generator."""
    if not 0.0 <= per <= 1.0:
        raise InvalidParameter(f"loss probability {per} outside [0, 1]")
    if per == 0.0:
        return False
    if per == 1.0:
        return True
    return bool(rng.random() < per)


def fspl_db(distance_m: float, frequency_hz: float) -> float:
    if distance_m <= 0.0 or frequency_hz <= 0.0:
        raise InvalidParameter("distance and frequency must be positive")
    return 20.0 * math.log10(distance_m) + 20.0 * math.log10(frequency_hz) - FSPL_CONST_DB


def fspl_distance(path_loss_db: float, frequency_hz: float = 2.4e9) -> float:
    """Invert the free-space path-loss relation to a distance in metres."""
    if path_loss_db <= 0.0 or frequency_hz <= 0.0:
        raise InvalidParameter("path loss and frequency must be positive")
    return 10.0 ** ((path_loss_db - 20.0 * math.log10(frequency_hz) + FSPL_CONST_DB) / 20.0)


@dataclass(frozen=True)
class CalibrationRow:
    attenuation_db: float
    rssi_dbm: float
    target_mean_s: float


def _curve_admissible(curve: PerCurve, rssi_map: RssiMap) -> bool:
    # Hard constraints: near-lossless at the strongest anchor, effectively
    # opaque at the OFF-state signal level.
    return (
        per_from_rssi(rssi_map.anchors[0][1], curve) <= 0.05
        and per_from_rssi(-103.0, curve) >= 0.999
    )


def calibrate_per_curve(
    reference: list[CalibrationRow],
    sim,
    budget: int = 12,
    seed: int = 2024,
    rssi_map: RssiMap = RssiMap(),
    strong_moderate_tolerance: float = 0.25,
) -> PerCurve:
    """Fit (rssi_mid, slope, floor) so simulated mean connect durations match
    the reference means.

    ``sim(curve, attenuation_db)`` must return the simulated mean connect
    duration in seconds (or raise/return inf for infeasible settings).
    Coarse grid first, then ``budget`` rounds of coordinate descent with a
    shrinking step.  Deterministic for fixed seed/budget.

    Raises CalibrationDiverged when the best fit misses any reference row
    outside the bad-connection regime (attenuation <= 83 dB) by more than
    ``strong_moderate_tolerance`` relative error.
    """
    if len(reference) < 4:
        raise InvalidParameter("at least 4 reference rows required")
    if budget < 1:
        raise InvalidParameter("budget must be >= 1")

    def objective(curve: PerCurve) -> tuple[float, dict[float, float]]:
        residuals = {}
        total = 0.0
        for row in reference:
            try:
                mean = sim(curve, row.attenuation_db)
            except Exception:
                mean = math.inf
            if not math.isfinite(mean):
                residuals[row.attenuation_db] = math.inf
                return math.inf, residuals
            rel = (mean - row.target_mean_s) / row.target_mean_s
            residuals[row.attenuation_db] = rel
            total += rel * rel
        return total, residuals

    coarse = [
        PerCurve(mid, slope, floor)
        for mid in (-93.0, -91.0, -89.0, -87.0)
        for slope in (0.45, 0.6, 0.8)
        for floor in (0.0,)
    ]
    coarse = [c for c in coarse if _curve_admissible(c, rssi_map)]

    evals = 0
    best: PerCurve | None = None
    best_err = math.inf
    best_res: dict[float, float] = {}

    def consider(curve: PerCurve) -> bool:
        nonlocal best, best_err, best_res, evals
        evals += 1
        err, res = objective(curve)
        if err < best_err:
            best, best_err, best_res = curve, err, res
            return True
        return False

    for curve in coarse:
        if evals >= max(budget, len(coarse)):
            break
        consider(curve)
        if budget == 1 and evals >= 1:
            break

    if best is None:
        raise CalibrationDiverged("no admissible starting curve")

    steps = (1.0, 0.1, 0.01)
    for round_idx in range(budget):
        mid_step = steps[0] * (0.5 ** (round_idx // 3))
        slope_step = steps[1] * (0.5 ** (round_idx // 3))
        floor_step = steps[2] * (0.5 ** (round_idx // 3))
        improved = False
        for dmid, dslope, dfloor in (
            (mid_step, 0.0, 0.0),
            (-mid_step, 0.0, 0.0),
            (0.0, slope_step, 0.0),
            (0.0, -slope_step, 0.0),
            (0.0, 0.0, floor_step),
            (0.0, 0.0, -floor_step),
        ):
            mid = best.rssi_mid + dmid
            slope = best.slope + dslope
            floor = min(max(best.floor + dfloor, 0.0), 0.049)
            if slope <= 0.05:
                continue
            candidate = PerCurve(mid, slope, floor)
            if not _curve_admissible(candidate, rssi_map):
                continue
            improved |= consider(candidate)
        if not improved and round_idx >= 2:
            break

    bad = {
        atten: rel
        for atten, rel in best_res.items()
        if atten <= 83.0 and (not math.isfinite(rel) or abs(rel) > strong_moderate_tolerance)
    }
    if bad or not math.isfinite(best_err):
        raise CalibrationDiverged(
            f"fit misses reference rows {sorted(bad)} beyond "
            f"{strong_moderate_tolerance:.0%}",
            residuals=best_res,
        )
    return best
