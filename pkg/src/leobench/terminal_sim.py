"""Simulated satellite user terminal.

Produces a 1 Hz telemetry stream shaped like what a real flat-panel terminal
exposes on its management interface: point-of-presence (PoP) latency, drop
rate, antenna orientation, and cumulative byte counters. The latency process
has three layers:

  * continuous fluctuation from the geometry of the serving satellite, which
    is reselected every 15 s and propagated every second;
  * occasional bad handovers that add a large constant for an integer number
    of 15 s quanta, with transient loss at the spike edges;
  * bounded per-sample noise.

Counters are published with a deliberate 1 s staleness lag and include a
fixed fractional header overhead on experiment-offered traffic, so the
consumption-tracking code downstream has the same artifacts to deal with as
against real hardware. Everything is driven by a single seeded RNG: one seed
gives one bit-identical stream.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .orbital import (
    EARTH_RADIUS_KM,
    GroundSite,
    TleRecord,
    propagate,
    synthetic_constellation,
    visible_sats,
)

SPEED_OF_LIGHT_KM_S = 299792.458

# |N(0, s)| has median 0.6745*s; dividing by it makes the configured rate the
# median per-second orientation step.
_MEDIAN_ABS_NORMAL = 0.6745

WIRE_KEYS = ("ts_ms", "pop_latency_ms", "pop_drop_rate", "az_deg", "el_deg",
             "bytes_down", "bytes_up", "state")


class ClockRegression(RuntimeError):
    """step() was called with a timestamp earlier than the previous one."""


class Unavailable(RuntimeError):
    """Latency fields requested while the terminal is in OUTAGE."""


class OverlapRejected(ValueError):
    """A traffic injection overlaps an existing one."""


@dataclass(frozen=True)
class TelemetrySample:
    ts_ms: int
    pop_latency_ms: float | None
    pop_drop_rate: float | None
    az_deg: float
    el_deg: float
    bytes_down: int
    bytes_up: int
    state: str  # ACTIVE | OUTAGE

    def to_wire(self) -> dict:
        return {
            "ts_ms": self.ts_ms,
            "pop_latency_ms": None if self.pop_latency_ms is None else round(self.pop_latency_ms, 3),
            "pop_drop_rate": None if self.pop_drop_rate is None else round(self.pop_drop_rate, 5),
            "az_deg": round(self.az_deg, 6),
            "el_deg": round(self.el_deg, 6),
            "bytes_down": self.bytes_down,
            "bytes_up": self.bytes_up,
            "state": self.state,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_wire(), separators=(",", ":"))

    @classmethod
    def from_wire(cls, obj: dict) -> "TelemetrySample":
        missing = [k for k in WIRE_KEYS if k not in obj]
        if missing:
            raise ValueError(f"telemetry record missing keys: {missing}")
        return cls(
            ts_ms=int(obj["ts_ms"]),
            pop_latency_ms=obj["pop_latency_ms"],
            pop_drop_rate=obj["pop_drop_rate"],
            az_deg=float(obj["az_deg"]),
            el_deg=float(obj["el_deg"]),
            bytes_down=int(obj["bytes_down"]),
            bytes_up=int(obj["bytes_up"]),
            state=str(obj["state"]),
        )

    def latency(self) -> float:
        if self.pop_latency_ms is None:
            raise Unavailable(f"terminal in {self.state} at {self.ts_ms}")
        return self.pop_latency_ms


@dataclass
class TerminalModelConfig:
    base_latency_ms: float = 35.0
    spike_multiplier: tuple[float, float] = (2.0, 3.0)
    handover_period_s: int = 15
    p_bad_handover: float = 0.02
    spike_duration_quanta: float = 1.5   # mean of the geometric quanta count
    drift_rate_deg_per_s: float = 1e-4
    az_band: tuple[float, float] = (0.2, 1.8)
    el_band: tuple[float, float] = (64.5, 65.4)
    counter_lag_s: float = 1.0
    rng_seed: int = 0
    # path-composition constants: client LAN hop, PoP scheduling overhead
    # folded into the bent-pipe segment, and the PoP-to-destination tail
    s1_ms: float = 1.0
    s2_sched_ms: float = 9.0
    pop_to_dest_ms: float = 13.0
    noise_ms: float = 1.5
    base_drop_rate: float = 0.004
    edge_drop_rate: tuple[float, float] = (0.05, 0.12)
    p_outage_per_s: float = 0.0
    outage_duration_s: tuple[float, float] = (2.0, 5.0)
    header_overhead_frac: float = 0.14
    elevation_mask_deg: float = 25.0
    gateway_ground_km: float = 600.0
    # handover indices that are always bad, for tests needing known spikes
    forced_bad_handovers: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.p_bad_handover <= 1.0:
            raise ValueError("p_bad_handover must be a probability")
        if not 0.0 <= self.p_outage_per_s <= 1.0:
            raise ValueError("p_outage_per_s must be a probability")
        for name in ("az_band", "el_band"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} is empty: [{lo}, {hi}]")
        if self.spike_duration_quanta < 1.0:
            raise ValueError("mean spike quanta must be >= 1")
        if self.handover_period_s <= 0:
            raise ValueError("handover period must be positive")


@dataclass(frozen=True)
class SpikeEvent:
    start_ms: int
    duration_ms: int
    add_ms: float
    multiplier: float

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.duration_ms


class TerminalSim:
    """Stateful terminal model. Call step(now_ms) at roughly 1 Hz.

    One writer thread steps the model; any number of readers may take
    `latest` (assignment of the frozen sample is the atomic handoff).
    """

    def __init__(self,
                 config: TerminalModelConfig | None = None,
                 site: GroundSite | None = None,
                 catalog: list[TleRecord] | None = None):
        self.config = config or TerminalModelConfig()
        self.site = site or GroundSite(47.6, -122.3)
        self._catalog = catalog
        self._rng = np.random.default_rng(self.config.rng_seed)

        gw_lat = self.site.latitude_deg + math.degrees(
            self.config.gateway_ground_km / EARTH_RADIUS_KM)
        self._gateway = GroundSite(min(gw_lat, 89.0), self.site.longitude_deg)

        self._start_ms: int | None = None
        self._last_ms: int | None = None
        self._next_handover_ms = 0
        self._handover_index = -1
        self._serving: TleRecord | None = None
        self._spike: SpikeEvent | None = None
        self._prev_in_spike = False
        self._outage_until_ms = -1

        az0 = 0.5 * (self.config.az_band[0] + self.config.az_band[1])
        el0 = 0.5 * (self.config.el_band[0] + self.config.el_band[1])
        self._az, self._el = az0, el0

        self._injections: list[tuple[int, int, float]] = []   # (start, end, bps)
        self._experiment_segments: list[tuple[int, float]] = [(0, 0.0)]

        self.spike_log: list[SpikeEvent] = []
        self.handover_log: list[tuple[int, str]] = []
        self.latest: TelemetrySample | None = None

    # -- traffic ----------------------------------------------------------

    def inject_user_traffic(self, rate_bps: float, start_ms: int, duration_ms: int) -> None:
        """Schedule user-side offered load; counters pick it up 1 s stale."""
        if rate_bps < 0:
            raise ValueError("rate must be >= 0")
        if duration_ms <= 0:
            raise ValueError("duration must be positive")
        end_ms = start_ms + duration_ms
        for s, e, _ in self._injections:
            if start_ms < e and s < end_ms:
                raise OverlapRejected(f"[{start_ms}, {end_ms}) overlaps [{s}, {e})")
        self._injections.append((start_ms, end_ms, float(rate_bps)))

    def set_experiment_rate(self, rate_bps: float, now_ms: int) -> None:
        """Offered load from measurement experiments; carries header overhead."""
        if rate_bps < 0:
            raise ValueError("rate must be >= 0")
        last_start, _ = self._experiment_segments[-1]
        if now_ms < last_start:
            raise ClockRegression(f"experiment rate set at {now_ms} < {last_start}")
        self._experiment_segments.append((now_ms, float(rate_bps)))

    def _offered_bytes_down(self, t_ms: int) -> float:
        total = 0.0
        for s, e, bps in self._injections:
            overlap_ms = min(e, t_ms) - s
            if overlap_ms > 0:
                total += bps / 8.0 * min(overlap_ms, e - s) / 1000.0
        overhead = 1.0 + self.config.header_overhead_frac
        segs = self._experiment_segments
        for i, (s, bps) in enumerate(segs):
            e = segs[i + 1][0] if i + 1 < len(segs) else t_ms
            overlap_ms = min(e, t_ms) - s
            if overlap_ms > 0 and bps > 0:
                total += bps * overhead / 8.0 * overlap_ms / 1000.0
        return total

    def _counters_at(self, t_ms: int) -> tuple[int, int]:
        if self._start_ms is None or t_ms < self._start_ms:
            return 0, 0
        down = self._offered_bytes_down(t_ms)
        # uplink is ack/request traffic, a thin fraction of the downlink
        return int(down), int(down * 0.03)

    # -- geometry ---------------------------------------------------------

    def _reselect(self, t_ms: int) -> None:
        t = datetime.fromtimestamp(t_ms / 1000.0, tz=timezone.utc)
        vis = visible_sats(self.site, self._catalog, t, self.config.elevation_mask_deg)
        if vis:
            by_name = {r.name: r for r in self._catalog}
            chosen = by_name[vis[0].sat_id]
            if self._serving is None or chosen.name != self._serving.name:
                self._serving = chosen
                self.handover_log.append((t_ms, chosen.name))
        # when nothing clears the mask, hold the previous lock

    def _bent_pipe_rtt_ms(self, t_ms: int) -> float:
        t = datetime.fromtimestamp(t_ms / 1000.0, tz=timezone.utc)
        pos = propagate(self._serving, t)
        d_user = float(np.linalg.norm(pos - self.site.ecef_km()))
        d_gw = float(np.linalg.norm(pos - self._gateway.ecef_km()))
        return 2.0 * (d_user + d_gw) / SPEED_OF_LIGHT_KM_S * 1000.0

    # -- stepping ---------------------------------------------------------

    def _handover(self, boundary_ms: int) -> None:
        cfg = self.config
        self._handover_index += 1
        self._reselect(boundary_ms)
        bad_draw = self._rng.random()
        bad = bad_draw < cfg.p_bad_handover or self._handover_index in cfg.forced_bad_handovers
        if bad and self._spike is None:
            mult = float(self._rng.uniform(*cfg.spike_multiplier))
            quanta = int(self._rng.geometric(1.0 / cfg.spike_duration_quanta))
            spike = SpikeEvent(
                start_ms=boundary_ms,
                duration_ms=quanta * cfg.handover_period_s * 1000,
                add_ms=(mult - 1.0) * cfg.base_latency_ms,
                multiplier=mult,
            )
            self._spike = spike
            self.spike_log.append(spike)

    def step(self, now_ms: int) -> TelemetrySample:
        cfg = self.config
        now_ms = int(now_ms)
        if self._last_ms is not None and now_ms <= self._last_ms:
            raise ClockRegression(f"step at {now_ms} after {self._last_ms}")
        if self._start_ms is None:
            self._start_ms = now_ms
            self._next_handover_ms = now_ms
            if self._catalog is None:
                self._catalog = synthetic_constellation(
                    epoch=datetime.fromtimestamp(now_ms / 1000.0, tz=timezone.utc))
        self._last_ms = now_ms

        # handover boundaries live on the sim clock (start + k*period), so
        # spike start/duration stay exact 15 s multiples even if the caller's
        # cadence jitters
        while now_ms >= self._next_handover_ms:
            self._handover(self._next_handover_ms)
            self._next_handover_ms += cfg.handover_period_s * 1000

        # fixed per-step draw order keeps the stream seed-deterministic
        noise = float(self._rng.uniform(-cfg.noise_ms, cfg.noise_ms))
        sigma = cfg.drift_rate_deg_per_s / _MEDIAN_ABS_NORMAL
        az_step = float(self._rng.normal(0.0, sigma))
        el_step = float(self._rng.normal(0.0, sigma))
        drop_draw = float(self._rng.uniform(0.0, cfg.base_drop_rate))
        edge_draw = float(self._rng.uniform(*cfg.edge_drop_rate))
        outage_draw = float(self._rng.random())

        self._az = _reflect(self._az + az_step, *cfg.az_band)
        self._el = _reflect(self._el + el_step, *cfg.el_band)

        if self._outage_until_ms < now_ms and outage_draw < cfg.p_outage_per_s:
            dur = float(self._rng.uniform(*cfg.outage_duration_s))
            self._outage_until_ms = now_ms + int(dur * 1000)

        in_spike = self._spike is not None and self._spike.start_ms <= now_ms < self._spike.end_ms
        spike_edge = in_spike != self._prev_in_spike
        add = self._spike.add_ms if in_spike else 0.0
        if self._spike is not None and now_ms >= self._spike.end_ms and not in_spike:
            self._spike = None
        self._prev_in_spike = in_spike

        bytes_down, bytes_up = self._counters_at(now_ms - int(cfg.counter_lag_s * 1000))

        if now_ms < self._outage_until_ms:
            sample = TelemetrySample(now_ms, None, None, self._az, self._el,
                                     bytes_down, bytes_up, "OUTAGE")
        else:
            latency = cfg.s1_ms + self._bent_pipe_rtt_ms(now_ms) + cfg.s2_sched_ms \
                + cfg.pop_to_dest_ms + noise + add
            drop = edge_draw if spike_edge else drop_draw
            sample = TelemetrySample(now_ms, max(latency, 0.1), drop,
                                     self._az, self._el, bytes_down, bytes_up, "ACTIVE")
        self.latest = sample
        return sample

    # -- introspection ----------------------------------------------------

    @property
    def serving_sat_id(self) -> str | None:
        return self._serving.name if self._serving else None

    @property
    def catalog(self) -> list[TleRecord] | None:
        """Constellation in use; materialized on the first step when not
        supplied up front."""
        return self._catalog


def _reflect(x: float, lo: float, hi: float) -> float:
    # bounce off band edges instead of saturating, so step sizes keep their
    # distribution near the walls
    width = hi - lo
    for _ in range(4):
        if x < lo:
            x = lo + (lo - x)
        elif x > hi:
            x = hi - (x - hi)
        else:
            return x
    return min(max(x, lo), hi)


class TelemetryPublisher:
    """Fan out each new sample as a JSON line: to a file, and to any
    connected stream-socket subscribers."""

    def __init__(self, path: str | None = None):
        self._path = path
        self._file = open(path, "a", buffering=1) if path else None
        self._subscribers: list = []
        self._lock = threading.Lock()

    def publish(self, sample: TelemetrySample) -> None:
        line = sample.to_json_line() + "\n"
        if self._file:
            self._file.write(line)
        with self._lock:
            dead = []
            for conn in self._subscribers:
                try:
                    conn.sendall(line.encode())
                except OSError:
                    dead.append(conn)
            for conn in dead:
                self._subscribers.remove(conn)

    def attach(self, conn) -> None:
        with self._lock:
            self._subscribers.append(conn)

    def close(self) -> None:
        if self._file:
            self._file.close()
        with self._lock:
            for conn in self._subscribers:
                try:
                    conn.close()
                except OSError:
                    pass
            self._subscribers.clear()


def serve_telemetry(sim: TerminalSim, publisher: TelemetryPublisher, host: str, port: int):
    """Bind a localhost stream socket; each accepted client gets every
    subsequent sample as line-delimited JSON. Returns (server_socket, thread);
    caller owns shutdown."""
    import socket

    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(8)

    def accept_loop():
        while True:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            if sim.latest is not None:
                try:
                    conn.sendall((sim.latest.to_json_line() + "\n").encode())
                except OSError:
                    conn.close()
                    continue
            publisher.attach(conn)

    thread = threading.Thread(target=accept_loop, daemon=True)
    thread.start()
    return srv, thread
