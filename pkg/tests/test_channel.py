"""Channel model tests: RSSI lookup, loss curve, FSPL, calibration fit."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from iolwsim.channel import (
    DEFAULT_PER_CURVE,
    CalibrationDiverged,
    CalibrationRow,
    InvalidParameter,
    PerCurve,
    RssiMap,
    calibrate_per_curve,
    fspl_db,
    fspl_distance,
    per_from_rssi,
    rssi_from_attenuation,
    sample_frame_loss,
)


class TestRssiMap:
    def test_anchor_lookups(self):
        assert rssi_from_attenuation(30.0) == -37.0
        assert rssi_from_attenuation(85.0) == -89.0

    def test_interpolated_77db(self):
        # (65, -67) to (80, -83) segment: -67 + 12 * (-16/15) = -79.8
        assert rssi_from_attenuation(77.0) == pytest.approx(-79.8, abs=0.05)

    def test_strictly_decreasing_over_anchor_range(self):
        grid = np.linspace(30.0, 85.0, 200)
        values = [rssi_from_attenuation(a) for a in grid]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_extrapolation_beyond_last_anchor(self):
        # Last segment slope is -1 dBm/dB, so 103 dB -> -107 dBm.
        assert rssi_from_attenuation(103.0) == pytest.approx(-107.0)

    def test_attenuation_range_enforced(self):
        with pytest.raises(InvalidParameter):
            rssi_from_attenuation(-1.0)
        with pytest.raises(InvalidParameter):
            rssi_from_attenuation(121.0)

    def test_anchor_validation(self):
        with pytest.raises(InvalidParameter):
            RssiMap(anchors=((30.0, -37.0),))
        with pytest.raises(InvalidParameter):
            RssiMap(anchors=((30.0, -37.0), (30.0, -40.0)))
        with pytest.raises(InvalidParameter):
            RssiMap(anchors=((30.0, -37.0), (50.0, -30.0)))


class TestPerCurve:
    def test_midpoint_value(self):
        curve = PerCurve(rssi_mid=-85.0, slope=0.5, floor=0.02)
        assert per_from_rssi(-85.0, curve) == pytest.approx((1 + 0.02) / 2)

    @given(
        st.floats(min_value=-120, max_value=0),
        st.floats(min_value=-120, max_value=0),
    )
    def test_monotone_non_increasing(self, r1, r2):
        lo, hi = sorted((r1, r2))
        assert per_from_rssi(hi) <= per_from_rssi(lo)

    def test_extreme_rssi_saturates(self):
        curve = PerCurve(rssi_mid=-85.0, slope=0.5, floor=0.01)
        assert per_from_rssi(10_000.0, curve) == pytest.approx(0.01)
        assert per_from_rssi(-10_000.0, curve) == pytest.approx(1.0)

    def test_calibrated_defaults_meet_channel_bounds(self):
        assert per_from_rssi(-37.0, DEFAULT_PER_CURVE) <= 0.05
        assert per_from_rssi(-103.0, DEFAULT_PER_CURVE) >= 0.999

    def test_parameter_validation(self):
        with pytest.raises(InvalidParameter):
            PerCurve(rssi_mid=-85.0, slope=0.5, floor=0.05)
        with pytest.raises(InvalidParameter):
            PerCurve(rssi_mid=-85.0, slope=0.0, floor=0.0)


class TestFrameLoss:
    def test_degenerate_probabilities(self):
        rng = np.random.default_rng(0)
        assert sample_frame_loss(0.0, rng) is False
        assert sample_frame_loss(1.0, rng) is True

    def test_empirical_rate(self):
        rng = np.random.default_rng(42)
        losses = sum(sample_frame_loss(0.5, rng) for _ in range(100_000))
        assert losses / 100_000 == pytest.approx(0.5, abs=0.01)

    def test_probability_range_enforced(self):
        rng = np.random.default_rng(0)
        with pytest.raises(InvalidParameter):
            sample_frame_loss(1.5, rng)


class TestFspl:
    def test_reference_distance_at_77db(self):
        assert 67.0 <= fspl_distance(77.0, 2.4e9) <= 75.0
        assert fspl_distance(77.0, 2.4e9) == pytest.approx(70.4, abs=0.5)

    def test_one_metre_constant(self):
        assert fspl_distance(40.05, 2.4e9) == pytest.approx(1.0, abs=0.01)

    def test_six_db_doubles_distance(self):
        d1 = fspl_distance(46.0, 2.4e9)
        d2 = fspl_distance(46.0 + 20 * math.log10(2), 2.4e9)
        assert d2 == pytest.approx(2 * d1, rel=1e-12)

    @given(st.floats(min_value=0.1, max_value=1000.0))
    def test_forward_inverse_round_trip(self, distance):
        loss = fspl_db(distance, 2.4e9)
        if loss > 0:
            assert fspl_distance(loss, 2.4e9) == pytest.approx(distance, rel=1e-9)

    def test_parameter_validation(self):
        with pytest.raises(InvalidParameter):
            fspl_distance(-1.0, 2.4e9)
        with pytest.raises(InvalidParameter):
            fspl_db(0.0, 2.4e9)


def synthetic_runner(true_curve: PerCurve):
    """Closed-form stand-in for the simulator: mean grows with loss rate."""

    def run(curve: PerCurve, atten: float) -> float:
        per = per_from_rssi(rssi_from_attenuation(atten), curve)
        return 0.458 + 2.4 * per / (1.0 - min(per, 0.99))

    return run


def synthetic_reference(curve: PerCurve) -> list[CalibrationRow]:
    run = synthetic_runner(curve)
    rows = []
    for atten in (30.0, 50.0, 65.0, 80.0, 83.0, 85.0):
        rows.append(
            CalibrationRow(atten, rssi_from_attenuation(atten), run(curve, atten))
        )
    return rows


class TestCalibration:
    def test_recovers_known_curve_and_is_deterministic(self):
        true = PerCurve(rssi_mid=-90.0, slope=0.6, floor=0.0)
        reference = synthetic_reference(true)
        run = synthetic_runner(true)
        fitted = calibrate_per_curve(reference, run, budget=8, seed=3)
        again = calibrate_per_curve(reference, run, budget=8, seed=3)
        assert fitted == again
        for row in reference:
            if row.attenuation_db <= 80.0:
                sim = run(fitted, row.attenuation_db)
                assert sim == pytest.approx(row.target_mean_s, rel=0.10)

    def test_identical_means_fit_to_lossless_curve(self):
        reference = [
            CalibrationRow(a, rssi_from_attenuation(a), 0.458)
            for a in (30.0, 50.0, 65.0, 80.0)
        ]

        def run(curve, atten):
            per = per_from_rssi(rssi_from_attenuation(atten), curve)
            return 0.458 + 2.4 * per

        fitted = calibrate_per_curve(reference, run, budget=8, seed=3)
        assert per_from_rssi(-67.0, fitted) < 0.02

    def test_unreachable_targets_diverge(self):
        reference = [
            CalibrationRow(a, rssi_from_attenuation(a), 10.0)
            for a in (30.0, 50.0, 65.0, 80.0)
        ]
        run = synthetic_runner(DEFAULT_PER_CURVE)
        with pytest.raises(CalibrationDiverged) as exc_info:
            calibrate_per_curve(reference, run, budget=4, seed=3)
        assert exc_info.value.residuals

    def test_parameter_validation(self):
        rows = synthetic_reference(DEFAULT_PER_CURVE)
        run = synthetic_runner(DEFAULT_PER_CURVE)
        with pytest.raises(InvalidParameter):
            calibrate_per_curve(rows[:3], run, budget=4)
        with pytest.raises(InvalidParameter):
            calibrate_per_curve(rows, run, budget=0)
