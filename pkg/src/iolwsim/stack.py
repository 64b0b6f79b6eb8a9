"""FS-W-Master and FS-W-Device protocol state machines.

Both machines are pure step functions: ``(state, event, now, ...) ->
(new_state, actions)``.  The event loop in :mod:`iolwsim.engine` owns
the clock, the radio loss draws and the action interpretation, so the
transitions here are deterministic and directly unit-testable.

Pairing attempt timeline (times relative to the beacon that starts it)::

    t+0          beacon heard, pairing request sent on the config channel
    t+1 cycle    pairing ack from the master
    t+2..6 cyc   handshake frames, one per W-cycle
    t+floor      link established (scan/sync/ramp-up lumped into the floor)

Any lost frame aborts the attempt; the device ignores beacons for
``pairing_retry_timeout`` before trying again.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

from .pdu import PairingIdentity, SessionKey


class ProtocolViolation(RuntimeError):
    """An event that is malformed for the current phase."""


class SlotOccupied(RuntimeError):
    pass


class UnknownDevice(KeyError):
    pass


class DevicePhase(Enum):
    UNPAIRED = "UNPAIRED"
    SCANNING = "SCANNING"
    PAIRING = "PAIRING"
    CONNECTED = "CONNECTED"
    SAFETY_PARAM_EXCHANGE = "SAFETY_PARAM_EXCHANGE"
    SAFETY_OPERATIONAL = "SAFETY_OPERATIONAL"
    LOST = "LOST"


@dataclass(frozen=True)
class TimingProfile:
    """Protocol timing constants; every value is a calibration knob."""

    w_cycle_us: int = 5_000
    scan_dwell_us: int = 58_000          # beacon listen period per channel
    pairing_handshake_cycles: int = 5
    base_connect_floor_us: int = 429_000  # beacon-to-link deterministic part
    phase_jitter_max_us: int = 58_000     # beacon interval; ON edge lands anywhere in it
    safety_param_cycles: int = 5          # 5 x 5 ms = 25 ms parameter exchange
    loss_threshold: int = 3               # consecutive missed cycles -> LOST
    pairing_retry_timeout_us: int = 50_000
    ack_timeout_cycles: int = 3
    close_out_cycles: int = 7             # tear-down before rescanning after LOST
    collision_prob: float = 0.25          # config-channel clash per attempt, two masters
    backoff_cycles: tuple[int, int] = (1, 4)

    @property
    def beacon_interval_us(self) -> int:
        return self.phase_jitter_max_us


# ---------------------------------------------------------------------------
# Protocol events

@dataclass(frozen=True)
class BeaconReceived:
    master_id: str
    rssi: float
    advertised: bool


@dataclass(frozen=True)
class PairingRequest:
    identity: PairingIdentity
    attempt: int


@dataclass(frozen=True)
class PairingAck:
    master_id: str
    attempt: int
    key: SessionKey


@dataclass(frozen=True)
class PairingRejected:
    master_id: str
    attempt: int


@dataclass(frozen=True)
class AckTimeout:
    attempt: int


@dataclass(frozen=True)
class HandshakeResult:
    master_id: str
    attempt: int
    ok: bool


@dataclass(frozen=True)
class LinkEstablished:
    master_id: str
    attempt: int


@dataclass(frozen=True)
class CycleTick:
    """One W-cycle elapsed; ``delivered`` is the cyclic frame outcome."""

    master_id: str
    delivered: bool
    param_payload: bytes | None = None


@dataclass(frozen=True)
class CloseOutDone:
    pass


@dataclass(frozen=True)
class SmiPair:
    identity: PairingIdentity


@dataclass(frozen=True)
class SmiUnpair:
    identity: PairingIdentity


@dataclass(frozen=True)
class BeaconTick:
    pass


# ---------------------------------------------------------------------------
# Actions emitted by the step functions

@dataclass(frozen=True)
class Send:
    """Over-the-air transmission; the engine applies channel loss."""

    to: str
    event: object
    delay_us: int = 0


@dataclass(frozen=True)
class SetTimer:
    """Local (loss-free) event delivered back to the emitting entity."""

    at_us: int
    event: object


@dataclass(frozen=True)
class StartHandshake:
    master_id: str
    attempt: int


@dataclass(frozen=True)
class Record:
    name: str
    at_us: int


# ---------------------------------------------------------------------------
# Device

@dataclass(frozen=True)
class DeviceState:
    identity: PairingIdentity
    safety_mode: bool = False
    phase: DevicePhase = DevicePhase.UNPAIRED
    current_master: str | None = None
    missed_cycles: int = 0
    last_accepted_mcnt: int = 0
    attempt: int = 0
    attempt_started_at: int = 0
    acked: bool = False
    ignore_until: int = 0
    session_key: SessionKey | None = None
    param_progress: int = 0


def device_step(
    state: DeviceState, event, now: int, profile: TimingProfile
) -> tuple[DeviceState, list]:
    """One deterministic device transition.  ``event=None`` is the identity."""
    if event is None:
        return state, []
    phase = state.phase

    if isinstance(event, BeaconReceived):
        if phase is DevicePhase.UNPAIRED:
            # Normalised to SCANNING on the first activity; beacons are
            # re-evaluated once scanning.
            state = replace(state, phase=DevicePhase.SCANNING)
            phase = DevicePhase.SCANNING
        if phase is not DevicePhase.SCANNING or not event.advertised:
            return state, []
        if now < state.ignore_until:
            return state, []
        attempt = state.attempt + 1
        new = replace(
            state,
            phase=DevicePhase.PAIRING,
            attempt=attempt,
            attempt_started_at=now,
            acked=False,
            current_master=None,
        )
        actions = [
            Send(event.master_id, PairingRequest(state.identity, attempt)),
            SetTimer(
                now + profile.ack_timeout_cycles * profile.w_cycle_us,
                AckTimeout(attempt),
            ),
        ]
        return new, actions

    if isinstance(event, PairingAck):
        if phase is not DevicePhase.PAIRING or event.attempt != state.attempt:
            return state, []
        new = replace(state, acked=True, session_key=event.key)
        return new, [StartHandshake(event.master_id, event.attempt)]

    if isinstance(event, PairingRejected):
        if phase is not DevicePhase.PAIRING or event.attempt != state.attempt:
            return state, []
        return _abort_attempt(state, now, profile)

    if isinstance(event, AckTimeout):
        if phase is not DevicePhase.PAIRING or event.attempt != state.attempt:
            return state, []
        if state.acked:
            return state, []
        return _abort_attempt(state, now, profile)

    if isinstance(event, HandshakeResult):
        if phase is not DevicePhase.PAIRING or event.attempt != state.attempt:
            return state, []
        if not event.ok:
            return _abort_attempt(state, now, profile)
        link_at = state.attempt_started_at + profile.base_connect_floor_us
        return state, [
            SetTimer(max(link_at, now), LinkEstablished(event.master_id, event.attempt))
        ]

    if isinstance(event, LinkEstablished):
        if phase is not DevicePhase.PAIRING or event.attempt != state.attempt:
            return state, []
        new = replace(
            state,
            phase=DevicePhase.CONNECTED,
            current_master=event.master_id,
            missed_cycles=0,
            param_progress=0,
        )
        actions = [Record("connected", now)]
        if state.safety_mode:
            new = replace(new, phase=DevicePhase.SAFETY_PARAM_EXCHANGE)
            actions.append(Record("safety_param_exchange", now))
        return new, actions

    if isinstance(event, CycleTick):
        if phase not in (
            DevicePhase.CONNECTED,
            DevicePhase.SAFETY_PARAM_EXCHANGE,
            DevicePhase.SAFETY_OPERATIONAL,
        ):
            return state, []
        if not event.delivered:
            missed = state.missed_cycles + 1
            if missed >= profile.loss_threshold:
                new = replace(
                    state,
                    phase=DevicePhase.LOST,
                    current_master=None,
                    missed_cycles=missed,
                    session_key=None,
                    param_progress=0,
                )
                return new, [
                    Record("connection_lost", now),
                    SetTimer(
                        now + profile.close_out_cycles * profile.w_cycle_us,
                        CloseOutDone(),
                    ),
                ]
            return replace(state, missed_cycles=missed), []
        new = replace(state, missed_cycles=0)
        if phase is DevicePhase.SAFETY_PARAM_EXCHANGE:
            progress = state.param_progress + 1
            new = replace(new, param_progress=progress)
            if progress >= profile.safety_param_cycles:
                new = replace(new, phase=DevicePhase.SAFETY_OPERATIONAL)
                return new, [Record("safety_operational", now)]
        return new, []

    if isinstance(event, CloseOutDone):
        if phase is not DevicePhase.LOST:
            return state, []
        new = replace(state, phase=DevicePhase.SCANNING, ignore_until=0, acked=False)
        return new, []

    raise ProtocolViolation(f"device in {phase.value} cannot handle {event!r}")


def _abort_attempt(state: DeviceState, now: int, profile: TimingProfile):
    new = replace(
        state,
        phase=DevicePhase.SCANNING,
        acked=False,
        ignore_until=now + profile.pairing_retry_timeout_us,
    )
    return new, []


# ---------------------------------------------------------------------------
# Master

@dataclass(frozen=True)
class Session:
    key: SessionKey
    established_at: int
    safety_armed: bool = False


@dataclass(frozen=True)
class MasterState:
    master_id: str
    enabled: frozenset[PairingIdentity] = frozenset()
    sessions: tuple[tuple[PairingIdentity, Session], ...] = ()
    powered: bool = True
    config_channel_busy: bool = False

    def session_for(self, identity: PairingIdentity) -> Session | None:
        for ident, session in self.sessions:
            if ident == identity:
                return session
        return None


def smi_pair(state: MasterState, identity: PairingIdentity) -> MasterState:
    """Enable pairing for an identity.  Idempotent when already enabled."""
    if identity in state.enabled:
        return state
    if any(ident.track == identity.track and ident.slot == identity.slot
           for ident, _ in state.sessions):
        raise SlotOccupied(f"track {identity.track} slot {identity.slot} in use")
    return replace(state, enabled=state.enabled | {identity})


def smi_unpair(state: MasterState, identity: PairingIdentity) -> MasterState:
    """Disable and tear down; the device discovers the loss via missed cycles."""
    if identity not in state.enabled and state.session_for(identity) is None:
        raise UnknownDevice(f"{identity} was never enabled on {state.master_id}")
    sessions = tuple((i, s) for i, s in state.sessions if i != identity)
    return replace(state, enabled=state.enabled - {identity}, sessions=sessions)


def master_step(
    state: MasterState, event, now: int, profile: TimingProfile, key_source=None
) -> tuple[MasterState, list]:
    """One deterministic master transition."""
    if event is None:
        return state, []

    if isinstance(event, BeaconTick):
        if not state.powered:
            return state, []
        return state, [
            Send("device", BeaconReceived(state.master_id, 0.0, True)),
            SetTimer(now + profile.beacon_interval_us, BeaconTick()),
        ]

    if isinstance(event, PairingRequest):
        if event.identity not in state.enabled:
            return state, [
                Send("device", PairingRejected(state.master_id, event.attempt))
            ]
        if state.session_for(event.identity) is not None:
            # Re-pairing replaces the stale session; no caching across pairings.
            sessions = tuple(
                (i, s) for i, s in state.sessions if i != event.identity
            )
            state = replace(state, sessions=sessions)
        key = key_source() if key_source is not None else SessionKey(bytes(16))
        return state, [
            Send(
                "device",
                PairingAck(state.master_id, event.attempt, key),
                delay_us=profile.w_cycle_us,
            )
        ]

    if isinstance(event, SmiPair):
        return smi_pair(state, event.identity), []

    if isinstance(event, SmiUnpair):
        return smi_unpair(state, event.identity), []

    raise ProtocolViolation(f"master cannot handle {event!r}")


def _install_session(
    state: MasterState, identity: PairingIdentity, key: SessionKey, now: int
) -> MasterState:
    sessions = tuple((i, s) for i, s in state.sessions if i != identity)
    sessions += ((identity, Session(key=key, established_at=now)),)
    return replace(state, sessions=sessions)


def install_session(state, identity, key, now):
    return _install_session(state, identity, key, now)


class ConnectionDropped(RuntimeError):
    """The link was lost mid parameter exchange."""


def safety_connection_establish(
    session: Session,
    profile: TimingProfile,
    loss_sampler,
    max_cycles: int = 10_000,
) -> tuple[Session, int]:
    """Run the safety parameter exchange over the cyclic process data.

    ``loss_sampler()`` returns True when the current cycle's frame is
    lost; a lost frame is retried on the next cycle.  Returns the armed
    session and the elapsed time in microseconds:
    ``(safety_param_cycles + retries) * w_cycle``.  Aborts when
    ``loss_threshold`` consecutive frames are lost.
    """
    progress = 0
    consecutive_losses = 0
    cycles = 0
    while progress < profile.safety_param_cycles:
        cycles += 1
        if cycles > max_cycles:
            raise ConnectionDropped("parameter exchange made no progress")
        if loss_sampler():
            consecutive_losses += 1
            if consecutive_losses >= profile.loss_threshold:
                raise ConnectionDropped(
                    f"{consecutive_losses} consecutive losses during exchange"
                )
            continue
        consecutive_losses = 0
        progress += 1
    return replace(session, safety_armed=True), cycles * profile.w_cycle_us
