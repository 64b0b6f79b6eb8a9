"""Deterministic discrete-event core and scenario execution.

Time is integer microseconds throughout; durations are quantized to the
0.1 ms measurement grid only when recorded.  Every repetition draws from
independent, purpose-keyed RNG streams derived from (seed, repetition,
purpose), so a sweep executed in parallel reproduces the serial result
sample for sample.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from . import stack
from .channel import PerCurve, RssiMap, DEFAULT_PER_CURVE, per_from_rssi, rssi_from_attenuation
from .pdu import ControlMCnt, PairingIdentity, SessionKey, CTL_PARAM, COUNTER_WINDOW, decode_output_pdu, encode_output_pdu
from .stack import (
    AckTimeout,
    BeaconReceived,
    BeaconTick,
    CloseOutDone,
    CycleTick,
    DevicePhase,
    DeviceState,
    HandshakeResult,
    LinkEstablished,
    MasterState,
    PairingAck,
    PairingRejected,
    PairingRequest,
    Record,
    Send,
    SetTimer,
    StartHandshake,
    TimingProfile,
    device_step,
    install_session,
    master_step,
    smi_pair,
    smi_unpair,
)

QUANTUM_US = 100  # 10 kS/s measurement grid


class InvalidParameter(ValueError):
    pass


class TooManyDiscards(RuntimeError):
    """The per-curve makes the scenario infeasible within the window."""


class NotConnectedWithinWindow(RuntimeError):
    pass


KIND_CONNECT = "roaming_connect"
KIND_HANDOVER = "handover"


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = KIND_CONNECT
    safety: bool = False
    attenuation_on_db: float = 30.0
    attenuation_off_db: float = 103.0
    on_duration_us: int = 2_000_000
    off_duration_us: int = 2_000_000
    repetitions: int = 300
    seed: int = 1
    profile: TimingProfile = TimingProfile()
    rssi_map: RssiMap = RssiMap()
    per_curve: PerCurve = DEFAULT_PER_CURVE
    # Attempts keep running across attenuator cycles; a repetition is
    # discarded only after this many ON windows elapse unconnected.
    max_on_windows: int = 3
    handover_order: str = "simultaneous"  # or "sequential"
    handover_setup_us: int = 100_000
    disable_contention: bool = False

    def __post_init__(self):
        if self.kind not in (KIND_CONNECT, KIND_HANDOVER):
            raise InvalidParameter(f"unknown scenario kind {self.kind!r}")
        if self.repetitions < 1:
            raise InvalidParameter("repetitions must be >= 1")
        if self.attenuation_off_db <= self.attenuation_on_db:
            raise InvalidParameter("OFF attenuation must exceed ON attenuation")
        if self.handover_order not in ("simultaneous", "sequential"):
            raise InvalidParameter(f"unknown handover order {self.handover_order!r}")

    def digest(self) -> str:
        blob = json.dumps(_config_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _config_dict(cfg: ScenarioConfig) -> dict:
    d = asdict(cfg)
    d["profile"]["backoff_cycles"] = list(cfg.profile.backoff_cycles)
    d["rssi_map"]["anchors"] = [list(a) for a in cfg.rssi_map.anchors]
    return d


@dataclass(frozen=True)
class DurationSeries:
    digest: str
    seed: int
    samples_us: tuple[int, ...]
    discarded: int

    def seconds(self) -> np.ndarray:
        return np.asarray(self.samples_us, dtype=np.float64) / 1e6


def quantize_duration(t_us: int) -> int:
    """Round up to the next 0.1 ms grid point (sampled-edge semantics)."""
    if t_us < 0:
        raise InvalidParameter("duration must be non-negative")
    return -(-t_us // QUANTUM_US) * QUANTUM_US


def attenuator_process(
    off_duration_us: int, on_duration_us: int, cycles: int
) -> list[tuple[int, str]]:
    """Alternating OFF/ON edge events starting at t=0 in OFF state."""
    edges = [(0, "OFF")]
    t = 0
    for _ in range(cycles):
        t += off_duration_us
        edges.append((t, "ON"))
        t += on_duration_us
        edges.append((t, "OFF"))
    return edges


_PURPOSES = ("phase", "link", "serving", "safety", "contention", "keys")


class RepStreams:
    """Purpose-keyed Philox streams for one repetition; lazily created."""

    def __init__(self, seed: int, rep: int):
        self._seed = seed
        self._rep = rep
        self._gens: dict[str, np.random.Generator] = {}

    def get(self, purpose: str) -> np.random.Generator:
        gen = self._gens.get(purpose)
        if gen is None:
            pid = _PURPOSES.index(purpose)
            seq = np.random.SeedSequence(self._seed, spawn_key=(self._rep, pid))
            gen = np.random.Generator(np.random.Philox(seq))
            self._gens[purpose] = gen
        return gen

    def session_key(self) -> SessionKey:
        return SessionKey(self.get("keys").bytes(16))


_PARAM_PAYLOAD = bytes.fromhex("a5" * 8)


class RepSimulation:
    """One measurement repetition: a small event-driven simulation."""

    def __init__(self, cfg: ScenarioConfig, streams: RepStreams, trace=None):
        self.cfg = cfg
        self.profile = cfg.profile
        self.streams = streams
        self.trace = trace
        self.heap: list = []
        self.seq = 0
        self.now = 0
        self.done = False
        self.result_us: int | None = None
        self.measure_start: int | None = None

        self.per_on = per_from_rssi(
            rssi_from_attenuation(cfg.attenuation_on_db, cfg.rssi_map), cfg.per_curve
        )
        self.per_off = per_from_rssi(
            rssi_from_attenuation(
                min(cfg.attenuation_off_db, 120.0), cfg.rssi_map
            ),
            cfg.per_curve,
        )
        self.attenuator_on = False
        self.edges: list[tuple[int, str]] = []

        identity = PairingIdentity(0, 0)
        self.device = DeviceState(identity=identity, safety_mode=cfg.safety)
        self.masters: dict[str, MasterState] = {}
        self.session_keys: dict[str, SessionKey] = {}
        self.pending_key: SessionKey | None = None
        self.attempt_block: np.ndarray | None = None
        self.last_delivered_at: int | None = None
        self.param_mcnt = ControlMCnt(CTL_PARAM, 0)
        self.contention_active = False
        self.deadline = 0

    # -- scheduling ---------------------------------------------------------

    def push(self, at: int, kind: str, payload=None, prio: int = 0):
        self.seq += 1
        heapq.heappush(self.heap, (at, prio, self.seq, kind, payload))

    def record_phase(self, entity: str, old, new, label: str):
        if self.trace is not None and old != new:
            self.trace.append((self.now, entity, old.value, new.value, label))

    # -- channel ------------------------------------------------------------

    def per_now(self) -> float:
        return self.per_on if self.attenuator_on else self.per_off

    def _block_value(self, index: int) -> float:
        assert self.attempt_block is not None
        return float(self.attempt_block[index])

    # -- device/master dispatch ---------------------------------------------

    def dispatch_device(self, event, label: str):
        old_phase = self.device.phase
        self.device, actions = device_step(self.device, event, self.now, self.profile)
        self.record_phase("device", old_phase, self.device.phase, label)
        aborted = (
            old_phase is DevicePhase.PAIRING
            and self.device.phase is DevicePhase.SCANNING
        )
        if aborted and self.contention_active:
            backoff = int(
                self.streams.get("contention").integers(
                    self.profile.backoff_cycles[0], self.profile.backoff_cycles[1] + 1
                )
            )
            self.device = replace(
                self.device,
                ignore_until=self.device.ignore_until + backoff * self.profile.w_cycle_us,
            )
        for action in actions:
            self.apply_device_action(action)

    def apply_device_action(self, action):
        if isinstance(action, SetTimer):
            self.push(action.at_us, "device_event", action.event)
        elif isinstance(action, Send):
            self.push(self.now + action.delay_us, "radio_to_master",
                      (action.to, action.event))
        elif isinstance(action, StartHandshake):
            self.start_handshake(action.master_id, action.attempt)
        elif isinstance(action, Record):
            self.handle_record(action)
        else:
            raise RuntimeError(f"unhandled device action {action!r}")

    def dispatch_master(self, master_id: str, event):
        state = self.masters[master_id]
        state, actions = master_step(state, event, self.now, self.profile,
                                     key_source=self.streams.session_key)
        self.masters[master_id] = state
        for action in actions:
            if isinstance(action, SetTimer):
                self.push(action.at_us, "master_event", (master_id, action.event))
            elif isinstance(action, Send):
                self.push(self.now + action.delay_us, "radio_to_device",
                          (master_id, action.event))
            else:
                raise RuntimeError(f"unhandled master action {action!r}")

    # -- radio hops ----------------------------------------------------------

    def deliver_beacon(self, master_id: str):
        master = self.masters[master_id]
        if not master.powered:
            return
        device = self.device
        eligible = (
            device.phase in (DevicePhase.UNPAIRED, DevicePhase.SCANNING)
            and self.now >= device.ignore_until
            and device.identity in master.enabled
        )
        if not eligible:
            return
        block_len = 3 + self.profile.pairing_handshake_cycles
        self.attempt_block = self.streams.get("link").random(block_len)
        if self._block_value(0) < self.per_now():
            return  # beacon missed
        self.dispatch_device(
            BeaconReceived(master_id, 0.0, advertised=True), "beacon"
        )

    def deliver_to_master(self, master_id: str, event):
        if isinstance(event, PairingRequest):
            if self._block_value(1) < self.per_now():
                return  # request lost
            if self.contention_active and not self.cfg.disable_contention:
                if self.streams.get("contention").random() < self.profile.collision_prob:
                    return  # config-channel collision
        self.dispatch_master(master_id, event)

    def deliver_to_device(self, master_id: str, event):
        if isinstance(event, BeaconReceived):
            self.deliver_beacon(master_id)
            return
        if isinstance(event, PairingAck):
            if self._block_value(2) < self.per_now():
                return  # ack lost
            self.pending_key = event.key
        self.dispatch_device(event, type(event).__name__)

    def start_handshake(self, master_id: str, attempt: int):
        w = self.profile.w_cycle_us
        k = self.profile.pairing_handshake_cycles
        # Frame i travels at now + (i+1) cycles; loss is detected one
        # cycle later.  Attenuation is sampled at each frame instant.
        for i in range(k):
            frame_at = self.now + (i + 1) * w
            per = self.per_on if self._on_at(frame_at) else self.per_off
            if self._block_value(3 + i) < per:
                self.push(frame_at + w, "device_event",
                          HandshakeResult(master_id, attempt, ok=False))
                return
        done_at = self.now + k * w
        self.push(done_at, "handshake_ok", (master_id, attempt))

    def _on_at(self, t: int) -> bool:
        on = False
        for edge_t, state in self.edges:
            if edge_t > t:
                break
            on = state == "ON"
        return on

    # -- records / measurement ------------------------------------------------

    def handle_record(self, action: Record):
        target = "safety_operational" if self.cfg.safety else "connected"
        if action.name == target and self.measure_start is not None:
            self.result_us = action.at_us - self.measure_start
            self.done = True
        if action.name == "connected":
            # Start (or restart) the cyclic process-data exchange.
            self.push(action.at_us + self.profile.w_cycle_us, "cycle")
        if action.name == "connection_lost" and self.cfg.kind == KIND_HANDOVER:
            if self.cfg.handover_order == "sequential" and not self._b_enabled:
                self._enable_b()

    # -- cyclic process data ---------------------------------------------------

    def cycle_tick(self):
        device = self.device
        if device.phase not in (
            DevicePhase.CONNECTED,
            DevicePhase.SAFETY_PARAM_EXCHANGE,
            DevicePhase.SAFETY_OPERATIONAL,
        ):
            return
        master_id = device.current_master
        master = self.masters.get(master_id)
        delivered = False
        payload = None
        if master is not None and master.powered:
            session = master.session_for(device.identity)
            if session is not None:
                in_exchange = device.phase is DevicePhase.SAFETY_PARAM_EXCHANGE
                stream = self.streams.get("safety" if in_exchange else "serving")
                if in_exchange:
                    # The parameter frames go through the real codec.
                    self.param_mcnt = self.param_mcnt.next()
                    frame = encode_output_pdu(
                        _PARAM_PAYLOAD, self.param_mcnt, device.identity, session.key
                    )
                else:
                    frame = None
                lost = float(stream.random()) < self.per_now()
                if not lost:
                    delivered = True
                    if frame is not None:
                        payload, ctl = decode_output_pdu(
                            frame,
                            session.key,
                            device.identity,
                            (device.last_accepted_mcnt, COUNTER_WINDOW),
                        )
                        self.device = replace(device, last_accepted_mcnt=ctl.mcnt)
                    if master_id == "A":
                        self.last_delivered_at = self.now
        self.dispatch_device(CycleTick(master_id or "", delivered, payload), "cycle")
        if self.device.phase in (
            DevicePhase.CONNECTED,
            DevicePhase.SAFETY_PARAM_EXCHANGE,
            DevicePhase.SAFETY_OPERATIONAL,
        ) and not self.done:
            self.push(self.now + self.profile.w_cycle_us, "cycle")

    # -- event loop -------------------------------------------------------------

    def run_loop(self):
        while self.heap and not self.done:
            at, prio, _seq, kind, payload = heapq.heappop(self.heap)
            if at > self.deadline:
                break
            self.now = at
            if kind == "edge":
                self.attenuator_on = payload == "ON"
            elif kind == "device_event":
                self.dispatch_device(payload, type(payload).__name__)
            elif kind == "master_event":
                master_id, event = payload
                self.dispatch_master(master_id, event)
            elif kind == "radio_to_master":
                master_id, event = payload
                self.deliver_to_master(master_id, event)
            elif kind == "radio_to_device":
                master_id, event = payload
                self.deliver_to_device(master_id, event)
            elif kind == "handshake_ok":
                master_id, attempt = payload
                key = self.pending_key or self.streams.session_key()
                self.masters[master_id] = install_session(
                    self.masters[master_id], self.device.identity, key, self.now
                )
                self.dispatch_device(
                    HandshakeResult(master_id, attempt, ok=True), "handshake_ok"
                )
            elif kind == "cycle":
                self.cycle_tick()
            elif kind == "controller":
                payload()
            else:
                raise RuntimeError(f"unknown event kind {kind}")

    # -- scenarios ----------------------------------------------------------------

    def run_connect(self) -> int | None:
        cfg = self.cfg
        self.edges = attenuator_process(
            cfg.off_duration_us, cfg.on_duration_us, cfg.max_on_windows
        )
        for t, state in self.edges:
            self.push(t, "edge", state, prio=-1)
        self.deadline = self.edges[-1][0]
        self.measure_start = cfg.off_duration_us  # first ON edge

        master = MasterState(master_id="A")
        master = smi_pair(master, self.device.identity)
        self.masters["A"] = master
        phi = int(self.streams.get("phase").random() * self.profile.beacon_interval_us)
        self.push(phi, "master_event", ("A", BeaconTick()))

        old = self.device.phase
        self.device = replace(self.device, phase=DevicePhase.SCANNING)
        self.record_phase("device", old, self.device.phase, "activate")

        self.run_loop()
        return self.result_us

    def run_handover(self) -> int | None:
        cfg = self.cfg
        self.edges = [(0, "ON")]
        self.attenuator_on = True
        self.push(0, "edge", "ON", prio=-1)
        t_u = cfg.handover_setup_us
        self.deadline = t_u + cfg.on_duration_us * cfg.max_on_windows
        self.contention_active = not cfg.disable_contention

        identity = self.device.identity
        key = self.streams.session_key()
        master_a = smi_pair(MasterState(master_id="A"), identity)
        master_a = install_session(master_a, identity, key, 0)
        self.masters["A"] = master_a
        self.masters["B"] = MasterState(master_id="B")
        self._b_enabled = False

        start_phase = (
            DevicePhase.SAFETY_OPERATIONAL if cfg.safety else DevicePhase.CONNECTED
        )
        self.device = replace(
            self.device,
            phase=start_phase,
            current_master="A",
            session_key=key,
            param_progress=cfg.profile.safety_param_cycles,
        )
        self.last_delivered_at = 0
        self.push(self.profile.w_cycle_us, "cycle")

        phi_a = int(self.streams.get("phase").random() * self.profile.beacon_interval_us)
        phi_b = int(self.streams.get("phase").random() * self.profile.beacon_interval_us)
        self.push(phi_a, "master_event", ("A", BeaconTick()))
        self.push(t_u + (phi_b % self.profile.beacon_interval_us), "master_event",
                  ("B", BeaconTick()))

        def controller():
            self.masters["A"] = smi_unpair(self.masters["A"], identity)
            if cfg.handover_order == "simultaneous":
                self._enable_b()
            self.measure_start = self.last_delivered_at

        self.push(t_u, "controller", controller, prio=1)
        self.run_loop()
        return self.result_us

    def _enable_b(self):
        self.masters["B"] = smi_pair(self.masters["B"], self.device.identity)
        self._b_enabled = True


def run_scenario(cfg: ScenarioConfig, trace=None) -> DurationSeries:
    """Execute repetitions until the configured number of valid samples exists.

    Repetitions that fail to connect within the window are discarded and
    retried; more than 10x repetitions discards raise TooManyDiscards.
    """
    samples: list[int] = []
    discarded = 0
    rep_index = 0
    while len(samples) < cfg.repetitions:
        streams = RepStreams(cfg.seed, rep_index)
        rep_index += 1
        sim = RepSimulation(cfg, streams, trace=trace)
        if cfg.kind == KIND_CONNECT:
            duration = sim.run_connect()
        else:
            duration = sim.run_handover()
        if duration is None:
            discarded += 1
            if discarded > 10 * cfg.repetitions:
                raise TooManyDiscards(
                    f"{discarded} discards for {len(samples)} valid samples"
                )
            continue
        samples.append(quantize_duration(duration))
    return DurationSeries(
        digest=cfg.digest(),
        seed=cfg.seed,
        samples_us=tuple(samples),
        discarded=discarded,
    )


def measure_connect(cfg: ScenarioConfig, rep: int = 0, trace=None) -> int:
    """Single connect repetition; duration in microseconds (unquantized)."""
    sim = RepSimulation(cfg, RepStreams(cfg.seed, rep), trace=trace)
    duration = sim.run_connect()
    if duration is None:
        raise NotConnectedWithinWindow(
            f"no connection within {cfg.max_on_windows} ON windows"
        )
    return duration


def measure_handover(cfg: ScenarioConfig, rep: int = 0, trace=None) -> int:
    """Single handover repetition; duration in microseconds (unquantized)."""
    sim = RepSimulation(cfg, RepStreams(cfg.seed, rep), trace=trace)
    duration = sim.run_handover()
    if duration is None:
        raise NotConnectedWithinWindow(
            f"no re-connection within {cfg.max_on_windows} windows"
        )
    return duration


# -- persistence ------------------------------------------------------------------


def series_to_csv(series: DurationSeries, path, version: str, extra: dict | None = None):
    with open(path, "w") as fh:
        fh.write(f"# iolwsim {version}\n")
        fh.write(f"# digest: {series.digest}\n")
        fh.write(f"# seed: {series.seed}\n")
        fh.write(f"# discarded: {series.discarded}\n")
        for key, value in (extra or {}).items():
            fh.write(f"# {key}: {value}\n")
        fh.write("rep_index,duration_s\n")
        for idx, us in enumerate(series.samples_us):
            fh.write(f"{idx},{us / 1e6:.4f}\n")


def series_from_csv(path) -> DurationSeries:
    digest = ""
    seed = 0
    discarded = 0
    samples: list[int] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                if line.startswith("# digest:"):
                    digest = line.split(":", 1)[1].strip()
                elif line.startswith("# seed:"):
                    seed = int(line.split(":", 1)[1])
                elif line.startswith("# discarded:"):
                    discarded = int(line.split(":", 1)[1])
                continue
            if not line or line.startswith("rep_index"):
                continue
            _idx, dur = line.split(",")
            samples.append(round(float(dur) * 1e6))
    return DurationSeries(
        digest=digest, seed=seed, samples_us=tuple(samples), discarded=discarded
    )
