"""Seeded Monte Carlo engine for a gated detector against a pulsed source.

The engine walks a train of gates. Per open gate it samples, in this order,
an afterpulse (Poisson hit on the expected trap release), a photon click
(weak-coherent-pulse statistics, only if the pulse falls inside the open
window) and a dark click (Poisson on the open window); the earliest event
wins the gate. A click charges the traps through the avalanche-charge model
and suppresses gating for the hold-off time. Timestamps get Gaussian jitter,
are clamped to the gate window and quantized by the TDC.

Randomness is counter-based: every gate owns a fixed row of seven uniform
draws at stream position ``gate_index * DRAWS_PER_GATE`` of a Philox stream
keyed by the run seed, so results do not depend on how the gate range is
chunked and disabled event sources consume nothing from other gates' rows.

Two interchangeable executors exist: a compiled (numba) block kernel used by
default and a plain-Python loop built on :func:`gate_outcome`, which doubles
as the readable reference of the per-gate rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.special import ndtri

from .errors import ConfigError
from .model import (
    DetectorParams,
    TrapState,
    avalanche_charge,
    dark_rate,
    detection_efficiency,
    expected_release,
    new_trap_state,
    trap_step,
)

DRAWS_PER_GATE = 7
# draw row layout
_COL_PHASE, _COL_AP, _COL_AP_T, _COL_PH, _COL_DK, _COL_DK_T, _COL_JIT = range(7)

_BLOCK_GATES = 65536  # multiple of 4 so Philox counter advances stay aligned

OUTCOME_NAMES = ("photon", "dark", "afterpulse")
_CODE_PHOTON, _CODE_DARK, _CODE_AFTERPULSE = 0, 1, 2


@dataclass(frozen=True)
class SourceConfig:
    """Pulsed weak-coherent source: mean photon number and pulse timing."""

    mean_photon_number: float
    pulse_period_ns: float
    pulse_offset_ns: float = 0.0

    def __post_init__(self):
        if self.mean_photon_number < 0:
            raise ConfigError("mean_photon_number must be non-negative")
        if not self.pulse_period_ns > 0:
            raise ConfigError("pulse_period_ns must be positive")


@dataclass(frozen=True)
class GateTrain:
    """Periodic gate geometry. ``delay_ns`` is the swept programmable offset."""

    period_ns: float
    width_ns: float
    delay_ns: float = 0.0
    delay_jitter_sigma_ps: float = 0.0

    def __post_init__(self):
        if not 0 < self.width_ns < self.period_ns:
            raise ConfigError("gate width must satisfy 0 < width < period")
        if not 0 <= self.delay_ns < self.period_ns:
            raise ConfigError("gate_delay_ns must lie in [0, period)")
        if self.delay_jitter_sigma_ps < 0:
            raise ConfigError("delay_jitter_sigma_ps must be non-negative")


@dataclass(frozen=True)
class ClickRecord:
    """One detector output event.

    ``raw_timestamp_ps`` is the measured time from the gate rising edge
    (jittered, clamped into the window); ``quench_ps`` is the physical time
    from the event to the gate falling edge, which sets the avalanche charge.
    """

    gate_index: int
    raw_timestamp_ps: float
    tdc_bin: int
    outcome: str
    quench_ps: float


@dataclass(frozen=True)
class RunSummary:
    total_gates: int
    photon_clicks: int
    dark_clicks: int
    afterpulse_clicks: int
    counts_per_second: float
    duration_s: float
    seed: int

    @property
    def total_clicks(self) -> int:
        return self.photon_clicks + self.dark_clicks + self.afterpulse_clicks


def run_seed(master_seed: int, *keys: int) -> int:
    """Derive a run seed from the master seed and integer point keys.

    Points are keyed by their values (delays in ps, hold-offs in ns, ...)
    rather than list positions, so reordering a sweep list permutes results
    without changing any of them.
    """
    ss = np.random.SeedSequence([int(master_seed)] + [int(k) for k in keys])
    return int(ss.generate_state(1, np.uint64)[0])


def gate_draws(seed: int, first_gate: int, n_gates: int) -> np.ndarray:
    """Uniform draw rows for gates [first_gate, first_gate + n_gates).

    Row ``i`` holds the seven draws of gate ``first_gate + i``, taken from
    stream positions ``(first_gate + i) * DRAWS_PER_GATE`` onward of the
    Philox stream keyed by ``seed``. Independent of chunking.
    """
    if n_gates <= 0:
        return np.empty((0, DRAWS_PER_GATE))
    pos = first_gate * DRAWS_PER_GATE
    aligned = pos - (pos % 4)  # Philox advances in 4-draw counter steps
    bg = np.random.Philox(key=np.uint64(seed))
    bg.advance(aligned // 4)
    lead = pos - aligned
    raw = np.random.Generator(bg).random(lead + n_gates * DRAWS_PER_GATE)
    return raw[lead:].reshape(n_gates, DRAWS_PER_GATE)


def tdc_quantize(timestamp_ps: float, resolution_ps: float) -> int:
    """Bin ordinal of a timestamp; bin ``b`` starts at ``b * resolution_ps``."""
    if timestamp_ps < 0:
        raise ValueError("timestamp_ps must be non-negative")
    if not resolution_ps > 0:
        raise ValueError("resolution_ps must be positive")
    return int(math.floor(timestamp_ps / resolution_ps))


def _normal_from_uniform(u: float) -> float:
    # inverse-CDF transform; clip away the measure-zero endpoints
    return float(ndtri(min(max(u, 2.0 ** -53), 1.0 - 2.0 ** -54)))


@dataclass(frozen=True)
class GateContext:
    """Resolved per-gate inputs for :func:`gate_outcome`."""

    params: DetectorParams
    gate_index: int
    width_ns: float
    width_ps: float
    period_ns: float
    nominal_photon_offset_ps: float
    pulse_in_window_possible: bool
    p_photon: float
    p_dark: float
    delay_jitter_sigma_ps: float
    jitter_sigma_ps: float
    tdc_resolution_ps: float


def make_gate_context(
    detector: DetectorParams,
    source: SourceConfig,
    gates: GateTrain,
    tdc_resolution_ps: float,
    gate_index: int,
) -> GateContext:
    """Gate context for one gate of a run; photon geometry resolved here."""
    width_ps = gates.width_ns * 1000.0
    phase0_ps = (source.pulse_offset_ns - gates.delay_ns) * 1000.0
    offset = math.fmod(
        phase0_ps - gate_index * (gates.period_ns * 1000.0),
        source.pulse_period_ns * 1000.0,
    )
    if offset < 0.0:
        offset += source.pulse_period_ns * 1000.0
    eta = detection_efficiency(detector.bias.excess_bias_v, detector)
    p_photon = -math.expm1(-source.mean_photon_number * eta)
    p_dark = -math.expm1(-dark_rate(detector.bias.excess_bias_v, detector) * gates.width_ns)
    return GateContext(
        params=detector,
        gate_index=gate_index,
        width_ns=gates.width_ns,
        width_ps=width_ps,
        period_ns=gates.period_ns,
        nominal_photon_offset_ps=offset,
        pulse_in_window_possible=source.mean_photon_number > 0,
        p_photon=p_photon,
        p_dark=p_dark,
        delay_jitter_sigma_ps=gates.delay_jitter_sigma_ps,
        jitter_sigma_ps=detector.jitter_sigma_ps,
        tdc_resolution_ps=tdc_resolution_ps,
    )


def gate_outcome(ctx: GateContext, state: TrapState, draws) -> tuple[ClickRecord | None, TrapState]:
    """Resolve a single open gate from its seven uniform draws.

    Returns the click (or None) and the trap state advanced by one gate
    period, with the captured carriers of a click added. Hold-off skipping
    is the caller's job.
    """
    p = ctx.params
    width_ps = ctx.width_ps

    # afterpulse: Poisson hit on the expected release over the open window
    ap_present = False
    if state.species and p.trigger_efficiency > 0 and state.total > 0:
        mean_ap = p.trigger_efficiency * expected_release(state, ctx.width_ns)
        ap_present = draws[_COL_AP] < -math.expm1(-mean_ap)

    # photon: pulse position relative to the (possibly phase-jittered) gate
    ph_present = False
    photon_t = 0.0
    if ctx.pulse_in_window_possible and ctx.p_photon > 0:
        photon_t = ctx.nominal_photon_offset_ps
        if ctx.delay_jitter_sigma_ps > 0:
            photon_t = photon_t - _normal_from_uniform(draws[_COL_PHASE]) * ctx.delay_jitter_sigma_ps
        ph_present = 0.0 <= photon_t <= width_ps and draws[_COL_PH] < ctx.p_photon

    dk_present = draws[_COL_DK] < ctx.p_dark

    # earliest event wins the gate (sampling order breaks exact ties)
    best_t = math.inf
    code = -1
    if ap_present:
        best_t = draws[_COL_AP_T] * width_ps
        code = _CODE_AFTERPULSE
    if ph_present and photon_t < best_t:
        best_t = photon_t
        code = _CODE_PHOTON
    if dk_present:
        dark_t = draws[_COL_DK_T] * width_ps
        if dark_t < best_t:
            best_t = dark_t
            code = _CODE_DARK

    if code < 0:
        return None, trap_step(state, ctx.period_ns, 0.0)

    quench_ps = width_ps - best_t
    captured = p.trap_coefficient * avalanche_charge(quench_ps, p)
    ts = best_t
    if ctx.jitter_sigma_ps > 0:
        ts = ts + _normal_from_uniform(draws[_COL_JIT]) * ctx.jitter_sigma_ps
    if ts < 0.0:
        ts = 0.0
    elif ts > width_ps:
        ts = width_ps
    record = ClickRecord(
        gate_index=ctx.gate_index,
        raw_timestamp_ps=ts,
        tdc_bin=tdc_quantize(ts, ctx.tdc_resolution_ps),
        outcome=OUTCOME_NAMES[code],
        quench_ps=quench_ps,
    )
    return record, trap_step(state, ctx.period_ns, captured)


def holdoff_skip_gates(click_gate: int, click_time_in_gate_ps: float,
                       period_ns: float, holdoff_ns: float) -> int:
    """Whole gates whose rising edge falls within the hold-off of a click."""
    t_click_ns = click_gate * period_ns + click_time_in_gate_ps / 1000.0
    rem_ns = t_click_ns + holdoff_ns - (click_gate + 1) * period_ns
    if rem_ns > 0.0:
        return int(math.ceil(rem_ns / period_ns))
    return 0


@njit(cache=True)
def _simulate_block(u, normals_phase, normals_jit, g0, n_in_block, g_next, pops,
                    tau_ns, weights, decay_per, relfrac,
                    width_ps, period_ns, holdoff_ns,
                    p_photon, p_dark, phase0_ps, period_ps, pulse_period_ps,
                    trigger_eff, trap_coeff, rate_per_ns, buildup_ps, min_charge,
                    tdc_res_ps,
                    out_gate, out_ts, out_bin, out_cls, out_quench):  # pragma: no cover
    n_traps = pops.shape[0]
    n_out = 0
    g = g_next
    end = g0 + n_in_block
    while g < end:
        j = g - g0

        ap_present = False
        if n_traps > 0 and trigger_eff > 0.0:
            rel = 0.0
            for k in range(n_traps):
                rel += pops[k] * relfrac[k]
            if rel > 0.0:
                mean_ap = trigger_eff * rel
                ap_present = u[j, 1] < -math.expm1(-mean_ap)

        ph_present = False
        photon_t = 0.0
        if p_photon > 0.0:
            photon_t = math.fmod(phase0_ps - g * period_ps, pulse_period_ps)
            if photon_t < 0.0:
                photon_t += pulse_period_ps
            photon_t = photon_t - normals_phase[j]
            ph_present = 0.0 <= photon_t <= width_ps and u[j, 3] < p_photon

        dk_present = u[j, 4] < p_dark

        best_t = np.inf
        code = -1
        if ap_present:
            best_t = u[j, 2] * width_ps
            code = 2
        if ph_present and photon_t < best_t:
            best_t = photon_t
            code = 0
        if dk_present:
            dark_t = u[j, 5] * width_ps
            if dark_t < best_t:
                best_t = dark_t
                code = 1

        if code < 0:
            for k in range(n_traps):
                pops[k] = pops[k] * decay_per[k]
            g += 1
            continue

        quench_ps = width_ps - best_t
        growth_ps = quench_ps - buildup_ps
        if growth_ps < 0.0:
            growth_ps = 0.0
        captured = trap_coeff * (min_charge + rate_per_ns * growth_ps / 1000.0)

        ts = best_t + normals_jit[j]
        if ts < 0.0:
            ts = 0.0
        elif ts > width_ps:
            ts = width_ps

        out_gate[n_out] = g
        out_ts[n_out] = ts
        out_bin[n_out] = int(math.floor(ts / tdc_res_ps))
        out_cls[n_out] = code
        out_quench[n_out] = quench_ps
        n_out += 1

        for k in range(n_traps):
            pops[k] = pops[k] * decay_per[k] + weights[k] * captured

        t_evt_ps = width_ps - quench_ps
        t_click_ns = g * period_ns + t_evt_ps / 1000.0
        rem_ns = t_click_ns + holdoff_ns - (g + 1) * period_ns
        skip = 0
        if rem_ns > 0.0:
            skip = int(math.ceil(rem_ns / period_ns))
        if skip > 0:
            elapsed_ns = skip * period_ns
            for k in range(n_traps):
                pops[k] = pops[k] * math.exp(-elapsed_ns / tau_ns[k])
        g += 1 + skip
    return n_out, g


def _validate_run(detector: DetectorParams, source: SourceConfig, gates: GateTrain,
                  n_gates: int, tdc_resolution_ps: float) -> None:
    if n_gates < 1:
        raise ConfigError("n_gates must be at least 1")
    if not tdc_resolution_ps > 0:
        raise ConfigError("tdc_resolution_ps must be positive")
    if gates.period_ns != detector.gate_period_ns:
        raise ConfigError("gates.period_ns must match detector.gate_period_ns")
    if gates.width_ns != detector.gate_width_ns:
        raise ConfigError("gates.width_ns must match detector.gate_width_ns")


def run_experiment(
    detector: DetectorParams,
    source: SourceConfig,
    gates: GateTrain,
    n_gates: int,
    seed: int,
    tdc_resolution_ps: float = 55.0,
    executor: str = "auto",
) -> tuple[list[ClickRecord], RunSummary]:
    """Simulate ``n_gates`` gates; deterministic for a fixed seed.

    Returns the click records in gate order plus a run summary whose
    counts-per-second figure is normalized by the full wall-clock duration
    ``n_gates * period`` (hold-off dead time included, as a hardware counter
    would).
    """
    _validate_run(detector, source, gates, n_gates, tdc_resolution_ps)
    if executor not in ("auto", "numba", "python"):
        raise ConfigError("executor must be one of auto, numba, python")

    if executor == "python":
        records = _run_python(detector, source, gates, n_gates, seed, tdc_resolution_ps)
    else:
        records = _run_numba(detector, source, gates, n_gates, seed, tdc_resolution_ps)

    duration_s = n_gates * gates.period_ns * 1e-9
    n_photon = sum(1 for r in records if r.outcome == "photon")
    n_dark = sum(1 for r in records if r.outcome == "dark")
    n_after = len(records) - n_photon - n_dark
    summary = RunSummary(
        total_gates=n_gates,
        photon_clicks=n_photon,
        dark_clicks=n_dark,
        afterpulse_clicks=n_after,
        counts_per_second=len(records) / duration_s,
        duration_s=duration_s,
        seed=int(seed),
    )
    return records, summary


def _trap_arrays(detector: DetectorParams):
    tau_ns = np.array([s.lifetime_us * 1000.0 for s in detector.trap_species])
    weights = np.array([s.weight for s in detector.trap_species])
    decay_per = np.array([math.exp(-detector.gate_period_ns / t) for t in tau_ns])
    relfrac = np.array([-math.expm1(-detector.gate_width_ns / t) for t in tau_ns])
    return tau_ns, weights, decay_per, relfrac


def _run_numba(detector, source, gates, n_gates, seed, tdc_resolution_ps):
    tau_ns, weights, decay_per, relfrac = _trap_arrays(detector)
    pops = np.zeros(len(tau_ns))

    width_ps = gates.width_ns * 1000.0
    eta = detection_efficiency(detector.bias.excess_bias_v, detector)
    p_photon = -math.expm1(-source.mean_photon_number * eta)
    p_dark = -math.expm1(-dark_rate(detector.bias.excess_bias_v, detector) * gates.width_ns)
    phase0_ps = (source.pulse_offset_ns - gates.delay_ns) * 1000.0

    out_gate = np.empty(_BLOCK_GATES, dtype=np.int64)
    out_ts = np.empty(_BLOCK_GATES)
    out_bin = np.empty(_BLOCK_GATES, dtype=np.int64)
    out_cls = np.empty(_BLOCK_GATES, dtype=np.int8)
    out_quench = np.empty(_BLOCK_GATES)

    chunks = []
    g_next = 0
    for g0 in range(0, n_gates, _BLOCK_GATES):
        n_in_block = min(_BLOCK_GATES, n_gates - g0)
        if g_next >= g0 + n_in_block:
            continue  # whole block inside a hold-off window
        u = gate_draws(seed, g0, n_in_block)
        if gates.delay_jitter_sigma_ps > 0 and p_photon > 0:
            normals_phase = ndtri(np.clip(u[:, _COL_PHASE], 2.0 ** -53, 1.0 - 2.0 ** -54))
            normals_phase = normals_phase * gates.delay_jitter_sigma_ps
        else:
            normals_phase = np.zeros(n_in_block)
        if detector.jitter_sigma_ps > 0:
            normals_jit = ndtri(np.clip(u[:, _COL_JIT], 2.0 ** -53, 1.0 - 2.0 ** -54))
            normals_jit = normals_jit * detector.jitter_sigma_ps
        else:
            normals_jit = np.zeros(n_in_block)
        n_out, g_next = _simulate_block(
            u, normals_phase, normals_jit, g0, n_in_block, g_next, pops,
            tau_ns, weights, decay_per, relfrac,
            width_ps, gates.period_ns, detector.holdoff_us * 1000.0,
            p_photon, p_dark, phase0_ps, gates.period_ns * 1000.0,
            source.pulse_period_ns * 1000.0,
            detector.trigger_efficiency, detector.trap_coefficient,
            detector.avalanche_rate_per_ns, detector.buildup_time_ps,
            detector.min_avalanche_charge_e, tdc_resolution_ps,
            out_gate, out_ts, out_bin, out_cls, out_quench,
        )
        if n_out:
            chunks.append((out_gate[:n_out].copy(), out_ts[:n_out].copy(),
                           out_bin[:n_out].copy(), out_cls[:n_out].copy(),
                           out_quench[:n_out].copy()))

    records = []
    for gate_arr, ts_arr, bin_arr, cls_arr, quench_arr in chunks:
        for i in range(len(gate_arr)):
            records.append(ClickRecord(
                gate_index=int(gate_arr[i]),
                raw_timestamp_ps=float(ts_arr[i]),
                tdc_bin=int(bin_arr[i]),
                outcome=OUTCOME_NAMES[cls_arr[i]],
                quench_ps=float(quench_arr[i]),
            ))
    return records


def _run_python(detector, source, gates, n_gates, seed, tdc_resolution_ps):
    records = []
    state = new_trap_state(detector.trap_species)
    width_ps = gates.width_ns * 1000.0
    holdoff_ns = detector.holdoff_us * 1000.0
    g = 0
    fetch_block = 4096
    u_cache_start, u_cache = 0, gate_draws(seed, 0, min(fetch_block, n_gates))
    while g < n_gates:
        if not (u_cache_start <= g < u_cache_start + len(u_cache)):
            u_cache_start = g
            u_cache = gate_draws(seed, g, min(fetch_block, n_gates - g))
        draws = u_cache[g - u_cache_start]
        ctx = make_gate_context(detector, source, gates, tdc_resolution_ps, g)
        record, state = gate_outcome(ctx, state, draws)
        if record is None:
            g += 1
            continue
        records.append(record)
        skip = holdoff_skip_gates(g, width_ps - record.quench_ps,
                                  gates.period_ns, holdoff_ns)
        if skip > 0:
            state = trap_step(state, skip * gates.period_ns, 0.0)
        g += 1 + skip
    return records


def write_click_log(path, records) -> None:
    """Write a click log CSV (atomic; complete file or nothing)."""
    from ._util import atomic_write_text

    lines = ["gate_index,raw_timestamp_ps,tdc_bin,outcome,quench_ps"]
    for r in records:
        lines.append(f"{r.gate_index},{r.raw_timestamp_ps!r},{r.tdc_bin},{r.outcome},{r.quench_ps!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_click_log(path) -> list[ClickRecord]:
    """Read a click log CSV written by :func:`write_click_log`."""
    from ._util import strip_comment
    from .errors import DataFormatError

    records = []
    with open(path, encoding="utf-8") as fh:
        header_seen = False
        for lineno, raw in enumerate(fh, start=1):
            line = strip_comment(raw)
            if not line:
                continue
            if not header_seen:
                if line != "gate_index,raw_timestamp_ps,tdc_bin,outcome,quench_ps":
                    raise DataFormatError(f"line {lineno}: unexpected click log header {line!r}")
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise DataFormatError(f"line {lineno}: expected 5 fields, got {len(parts)}")
            try:
                records.append(ClickRecord(
                    gate_index=int(parts[0]),
                    raw_timestamp_ps=float(parts[1]),
                    tdc_bin=int(parts[2]),
                    outcome=parts[3],
                    quench_ps=float(parts[4]),
                ))
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from exc
    return records
