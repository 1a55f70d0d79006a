"""Timestamp value types and the integer arithmetic every other module uses.

All times are unsigned 64-bit nanosecond counts since the Unix epoch (UTC).
Drift rates are fixed-point with 32 fractional bits so that simulation runs
are bit-reproducible across platforms.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

from .kernels import mul_fixed

NANOS_MAX = (1 << 64) - 1
FRAC_BITS = 32
FP_ONE = 1 << FRAC_BITS

# calibration sanity window for drift ratios
RATE_MIN = Fraction(1, 2)
RATE_MAX = Fraction(2)


class ClockExhausted(OverflowError):
    """The clock cannot advance without leaving the representable range."""


class ImplausibleRate(ValueError):
    """A drift ratio outside the plausibility window; treated as an attack."""


class Provenance(enum.Enum):
    LOCAL = "local"
    PEER = "peer"
    EXTERNAL = "external"


def _check_u64(name: str, value: int) -> None:
    if not isinstance(value, int) or isinstance(value, bool):
        raise TypeError(f"{name} must be an int, got {type(value).__name__}")
    if not 0 <= value <= NANOS_MAX:
        raise ValueError(f"{name}={value} outside unsigned 64-bit range")


@dataclass(frozen=True)
class TrustedTimestamp:
    """A served time value and its bound on ``|value - real time|``.

    ``drift_residual_nanos`` is the part of ``error_bound_nanos`` that comes
    from counting locally since the last remote anchor; it is already
    included in the bound and reported separately for inspection.
    """

    nanos: int
    provenance: Provenance = Provenance.LOCAL
    error_bound_nanos: int = 0
    peer_id: int | None = None
    drift_residual_nanos: int = 0

    def __post_init__(self) -> None:
        _check_u64("nanos", self.nanos)
        _check_u64("error_bound_nanos", self.error_bound_nanos)
        _check_u64("drift_residual_nanos", self.drift_residual_nanos)
        if self.drift_residual_nanos > self.error_bound_nanos:
            raise ValueError("drift residual exceeds the total error bound")
        if (self.provenance is Provenance.PEER) != (self.peer_id is not None):
            raise ValueError("peer_id is required exactly for peer provenance")


@dataclass(frozen=True)
class ResolutionUnit:
    nanos_per_tick: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.nanos_per_tick, int) or self.nanos_per_tick < 1:
            raise ValueError("nanos_per_tick must be an int >= 1")


@dataclass(frozen=True)
class DriftRate:
    """Multiplier from raw counter ticks to nanoseconds, as ``ratio_fp / 2**32``."""

    ratio_fp: int

    def __post_init__(self) -> None:
        if not isinstance(self.ratio_fp, int) or self.ratio_fp <= 0:
            raise ImplausibleRate(f"drift ratio must be positive, got {self.ratio_fp!r}")
        if not RATE_MIN <= self.ratio <= RATE_MAX:
            raise ImplausibleRate(f"drift ratio {float(self.ratio):.6f} outside [0.5, 2.0]")

    @classmethod
    def from_ratio(cls, ratio: Fraction | float | int | str) -> DriftRate:
        exact = Fraction(ratio)
        return cls(round(exact * FP_ONE))

    @classmethod
    def identity(cls) -> DriftRate:
        return cls(FP_ONE)

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.ratio_fp, FP_ONE)

    def inverse(self) -> DriftRate:
        return DriftRate(round(Fraction(FP_ONE * FP_ONE, self.ratio_fp)))


@dataclass(frozen=True)
class RttEstimate:
    rtt_nanos: int
    rtt1_nanos: int | None = None
    rtt2_nanos: int | None = None

    def __post_init__(self) -> None:
        _check_u64("rtt_nanos", self.rtt_nanos)
        if (self.rtt1_nanos is None) != (self.rtt2_nanos is None):
            raise ValueError("give both split legs or neither")
        if self.rtt1_nanos is not None:
            _check_u64("rtt1_nanos", self.rtt1_nanos)
            _check_u64("rtt2_nanos", self.rtt2_nanos)
            if self.rtt1_nanos + self.rtt2_nanos != self.rtt_nanos:
                raise ValueError("rtt1 + rtt2 must equal rtt")

    @property
    def reading_error_nanos(self) -> int:
        """Default clock reading error: half the round trip."""
        return self.rtt_nanos // 2


@dataclass(frozen=True)
class OffEnclaveInterval:
    delta_nanos: int = 0

    def __post_init__(self) -> None:
        _check_u64("delta_nanos", self.delta_nanos)


def compute_error_bound(delta: OffEnclaveInterval, rtt: RttEstimate) -> int:
    """``delta + rtt``, saturating at the largest unsigned 64-bit value."""
    return min(delta.delta_nanos + rtt.rtt_nanos, NANOS_MAX)


def advance_by_resolution(ts: TrustedTimestamp, unit: ResolutionUnit) -> TrustedTimestamp:
    nanos = ts.nanos + unit.nanos_per_tick
    if nanos > NANOS_MAX:
        raise ClockExhausted(f"cannot advance {ts.nanos} by {unit.nanos_per_tick}")
    return TrustedTimestamp(
        nanos,
        ts.provenance,
        ts.error_bound_nanos,
        ts.peer_id,
        ts.drift_residual_nanos,
    )


def apply_drift(raw_ticks: int, rate: DriftRate) -> int:
    """Corrected nanoseconds for ``raw_ticks``; round half to even."""
    return mul_fixed(raw_ticks, rate.ratio_fp)


def ticks_for_nanos(nanos: int, rate: DriftRate) -> int:
    """Raw ticks that ``rate`` maps to roughly ``nanos``."""
    return apply_drift(nanos, rate.inverse())


def ceil_scaled(value: int, factor: Fraction) -> int:
    """``ceil(value * factor)`` for non-negative integers."""
    return -((-value * factor.numerator) // factor.denominator)


@dataclass(frozen=True)
class ResidualPolicy:
    """How fast the error bound grows while counting locally.

    A counter rescaled by up to ``guard_threshold`` escapes the rate guard,
    so the bound grows by ``threshold / (1 - threshold)`` of elapsed time
    (the worst undetected slow-down, measured on the slowed counter) plus
    the calibration tolerance.
    """

    guard_threshold: Fraction = Fraction(5, 100)
    calibration_tolerance: Fraction = Fraction(1, 1000)
    rate: Fraction = field(init=False)

    def __post_init__(self) -> None:
        g = Fraction(self.guard_threshold)
        if not 0 <= g < 1:
            raise ValueError("guard threshold must be in [0, 1)")
        object.__setattr__(self, "rate", g / (1 - g) + Fraction(self.calibration_tolerance))

    def residual(self, elapsed_nanos: int) -> int:
        return ceil_scaled(max(elapsed_nanos, 0), self.rate)

    def widen(self, nanos: int) -> int:
        """``nanos`` plus its worst-case measurement error."""
        return nanos + ceil_scaled(max(nanos, 0), self.rate)
