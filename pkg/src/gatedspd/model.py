"""Deterministic physics primitives of a gated avalanche photodiode.

Everything here is a pure function: trapped-carrier populations that decay
exponentially and fill on avalanche capture, the charge released by an
avalanche as a function of its quench duration, and the mapping from excess
bias to detection efficiency and dark rate. Randomness lives in the engine
module; these functions work on expected values.

Unit conventions (shared by the whole package):
    - gate-scale times (widths, periods, windows): nanoseconds
    - sub-gate times (quench, jitter, TDC): picoseconds
    - hold-off and trap lifetimes: microseconds
    - charge: electrons; rates: per nanosecond
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .errors import ConfigError

NS_PER_US = 1000.0
PS_PER_NS = 1000.0

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class BiasConfig:
    """Reverse bias operating point of the diode.

    The excess bias (reverse bias minus breakdown voltage) is the quantity
    that controls efficiency, dark counts and trapping; it must be
    non-negative for armed operation.
    """

    reverse_bias_v: float
    breakdown_voltage_v: float

    def __post_init__(self):
        if self.breakdown_voltage_v <= 0:
            raise ConfigError("breakdown_voltage_v must be positive")
        if self.excess_bias_v < 0:
            raise ConfigError(
                "reverse_bias_v must not be below breakdown_voltage_v "
                "(negative excess bias)"
            )

    @property
    def excess_bias_v(self) -> float:
        return self.reverse_bias_v - self.breakdown_voltage_v


@dataclass(frozen=True)
class TrapSpecies:
    """One trap population: release lifetime and capture branching weight."""

    lifetime_us: float
    weight: float

    def __post_init__(self):
        if not self.lifetime_us > 0:
            raise ConfigError("trap_lifetimes_us entries must be positive")
        if not 0.0 <= self.weight <= 1.0:
            raise ConfigError("trap_weights entries must lie in [0, 1]")


@dataclass(frozen=True)
class DetectorParams:
    """Full physical configuration of the gated detector.

    ``trap_species`` may be empty, which disables afterpulsing entirely.
    ``temperature_c`` is carried as inert metadata; no temperature
    dependence is modelled.
    """

    bias: BiasConfig
    gate_width_ns: float
    gate_period_ns: float
    holdoff_us: float
    trap_species: tuple[TrapSpecies, ...]
    trap_coefficient: float
    avalanche_rate_per_ns: float
    buildup_time_ps: float
    min_avalanche_charge_e: float
    trigger_efficiency: float
    dark_rate_per_ns: float
    jitter_sigma_ps: float
    efficiency_scale: float
    efficiency_knee_v: float
    temperature_c: float = -40.0

    def __post_init__(self):
        for key in ("gate_width_ns", "gate_period_ns", "holdoff_us"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("buildup_time_ps", "min_avalanche_charge_e", "jitter_sigma_ps",
                    "trap_coefficient", "avalanche_rate_per_ns", "dark_rate_per_ns"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        for key in ("trigger_efficiency", "efficiency_scale"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        if not self.efficiency_knee_v > 0:
            raise ConfigError("efficiency_knee_v must be positive")
        if not self.gate_width_ns < self.gate_period_ns:
            raise ConfigError("gate_width_ns must be smaller than gate_period_ns")
        if self.holdoff_us * NS_PER_US < self.gate_period_ns:
            raise ConfigError("holdoff_us must cover at least one gate_period_ns")
        if self.trap_species:
            total = sum(s.weight for s in self.trap_species)
            if abs(total - 1.0) > WEIGHT_SUM_TOL:
                raise ConfigError(
                    f"trap_weights must sum to 1 (got {total!r})"
                )


@dataclass(frozen=True)
class TrapState:
    """Expected trapped-carrier population per species at a point in time.

    Populations are real-valued expectations, not integer counts; the
    engine samples actual releases from them. Instances are immutable;
    evolution goes through :func:`trap_step`.
    """

    species: tuple[TrapSpecies, ...]
    populations: tuple[float, ...]
    last_update_ns: float = 0.0

    def __post_init__(self):
        if len(self.species) != len(self.populations):
            raise ConfigError("one population per trap species required")
        if any(n < 0 for n in self.populations):
            raise ConfigError("trap populations must be non-negative")

    @property
    def total(self) -> float:
        return sum(self.populations)


def new_trap_state(species, start_ns: float = 0.0) -> TrapState:
    """Empty trap state for the given species tuple."""
    species = tuple(species)
    return TrapState(species, (0.0,) * len(species), start_ns)


def trap_step(state: TrapState, elapsed_ns: float, captured: float) -> TrapState:
    """Evolve trap populations over one interval.

    Each population decays by exp(-elapsed/lifetime); the carriers captured
    during the interval are added at its end, split across species by their
    weights. Returns a new state with the clock advanced.
    """
    if elapsed_ns < 0:
        raise ValueError("elapsed_ns must be non-negative")
    if captured < 0:
        raise ValueError("captured must be non-negative")
    pops = tuple(
        n * math.exp(-elapsed_ns / (s.lifetime_us * NS_PER_US)) + s.weight * captured
        for n, s in zip(state.populations, state.species)
    )
    return TrapState(state.species, pops, state.last_update_ns + elapsed_ns)


def expected_release(state: TrapState, window_ns: float) -> float:
    """Expected number of carriers released within the next ``window_ns``.

    Pure lookahead: the state is not advanced (apply the matching decay
    separately via :func:`trap_step`).
    """
    if not window_ns > 0:
        raise ValueError("window_ns must be positive")
    return sum(
        n * -math.expm1(-window_ns / (s.lifetime_us * NS_PER_US))
        for n, s in zip(state.populations, state.species)
    )


def avalanche_charge(quench_duration_ps: float, params: DetectorParams) -> float:
    """Charge (electrons) flown by an avalanche quenched after ``quench_duration_ps``.

    The avalanche needs a build-up time to reach its steady rate; before
    that only the minimum charge flows. Monotone non-decreasing in the
    quench duration.
    """
    if quench_duration_ps < 0:
        raise ValueError("quench_duration_ps must be non-negative")
    growth_ps = max(0.0, quench_duration_ps - params.buildup_time_ps)
    return params.min_avalanche_charge_e + params.avalanche_rate_per_ns * growth_ps / PS_PER_NS


def detection_efficiency(excess_bias_v: float, params: DetectorParams) -> float:
    """Photon detection efficiency at the given excess bias.

    Saturating-exponential map: eta = scale * (1 - exp(-V_ex / knee)),
    strictly increasing in the excess bias, bounded by the scale.
    """
    if excess_bias_v < 0:
        raise ValueError("excess_bias_v must be non-negative")
    return params.efficiency_scale * -math.expm1(-excess_bias_v / params.efficiency_knee_v)


def dark_rate(excess_bias_v: float, params: DetectorParams) -> float:
    """Dark count rate (per ns of open gate) at the given excess bias.

    Linear in excess bias, anchored so that the configured rate applies at
    the configured operating point.
    """
    if excess_bias_v < 0:
        raise ValueError("excess_bias_v must be non-negative")
    anchor = params.bias.excess_bias_v
    if anchor == 0:
        return 0.0
    return params.dark_rate_per_ns * excess_bias_v / anchor


def power_law_trap_mixture(
    lifetimes_us=(0.5, 2.0, 8.0),
    decay_exponent: float = 0.916,
    fit_window_us=(1.0, 30.0),
    n_points: int = 60,
) -> tuple[TrapSpecies, ...]:
    """Trap mixture whose release decay approximates a power law.

    A single exponential lifetime cannot produce the slowly decaying
    afterpulse tails seen on real devices, so the default detector uses a
    small mixture. The weights are the non-negative least-squares solution
    (relative error metric) that makes the survival curve
    sum_k w_k exp(-t / tau_k) track t**-decay_exponent over the fit window.
    The approximation is genuinely approximate: three exponentials cannot
    hold a power law over 1.5 decades exactly, and the tail beyond a few
    times the longest lifetime falls off faster.
    """
    lifetimes = tuple(float(t) for t in lifetimes_us)
    if not lifetimes or any(t <= 0 for t in lifetimes):
        raise ConfigError("trap_lifetimes_us must be a non-empty positive list")
    lo, hi = fit_window_us
    t = np.geomspace(lo, hi, n_points)
    design = np.exp(-t[:, None] / np.asarray(lifetimes)[None, :])
    target = t ** -decay_exponent
    amplitudes, _ = nnls(design / target[:, None], np.ones_like(target))
    total = amplitudes.sum()
    if total <= 0:
        raise ConfigError("trap mixture fit produced no usable weights")
    weights = amplitudes / total
    return tuple(TrapSpecies(tau, float(w)) for tau, w in zip(lifetimes, weights))
