"""Safety process-data frame codec.

Wire layout of an output frame (big-endian fields)::

    [ ctl_mcnt (2) | track (1) | slot (1) | payload (1..22) | mac (4) | crc (2) ]

The MAC covers ctl_mcnt + identity + payload; the CRC covers the same
bytes plus the MAC.  Input frames carry exactly six safety octets plus up
to 16 non-safety octets appended *after* the CRC; the non-safety region
is excluded from both MAC and CRC.
"""

from __future__ import annotations

import hmac
import hashlib
from dataclasses import dataclass

import numpy as np

MAX_OUTPUT_PAYLOAD = 22
SAFETY_INPUT_LEN = 6
MAX_NONSAFETY_LEN = 16
HEADER_LEN = 4
MAC_LEN = 4
CRC_LEN = 2
OUTPUT_OVERHEAD = HEADER_LEN + MAC_LEN + CRC_LEN  # 10 octets
MIN_OUTPUT_FRAME = OUTPUT_OVERHEAD + 1
INPUT_SAFETY_FRAME = HEADER_LEN + SAFETY_INPUT_LEN + MAC_LEN + CRC_LEN  # 16

MCNT_BITS = 12
MCNT_MODULUS = 1 << MCNT_BITS
COUNTER_WINDOW = 16

MAX_TRACKS = 5
MAX_SLOTS = 8

# Frame-role flags carried in the 4-bit control field.
CTL_DATA = 0x1
CTL_PARAM = 0x2
CTL_REARM = 0x4

CRC_POLY = 0x1021
CRC_INIT = 0xFFFF


class FrameError(ValueError):
    """Base class for encode-side validation failures."""

    code = "FRAME_ERROR"


class InvalidLength(FrameError):
    code = "INVALID_LENGTH"


class PayloadTooLong(FrameError):
    code = "PAYLOAD_TOO_LONG"


class InvalidParameter(FrameError):
    code = "INVALID_PARAMETER"


class DecodeError(Exception):
    """Base class for receive-side verification failures."""

    code = "DECODE_ERROR"


class CrcFail(DecodeError):
    code = "CRC_FAIL"


class MacFail(DecodeError):
    code = "MAC_FAIL"


class AuthMismatch(DecodeError):
    code = "AUTH_MISMATCH"


class StaleCounter(DecodeError):
    code = "STALE_COUNTER"


@dataclass(frozen=True)
class PairingIdentity:
    """Track/slot address used as the authenticity identifier."""

    track: int
    slot: int

    def __post_init__(self):
        if not 0 <= self.track < MAX_TRACKS:
            raise InvalidParameter(f"track {self.track} outside [0, {MAX_TRACKS})")
        if not 0 <= self.slot < MAX_SLOTS:
            raise InvalidParameter(f"slot {self.slot} outside [0, {MAX_SLOTS})")

    def pack(self) -> bytes:
        return bytes((self.track, self.slot))


@dataclass(frozen=True)
class ControlMCnt:
    """Control flags plus the modulo-2^12 message counter."""

    control_bits: int
    mcnt: int

    def __post_init__(self):
        if not 0 <= self.control_bits < 16:
            raise InvalidParameter(f"control_bits {self.control_bits} outside [0, 16)")
        if not 0 <= self.mcnt < MCNT_MODULUS:
            raise InvalidParameter(f"mcnt {self.mcnt} outside [0, {MCNT_MODULUS})")

    def pack(self) -> bytes:
        return ((self.control_bits << MCNT_BITS) | self.mcnt).to_bytes(2, "big")

    def next(self) -> "ControlMCnt":
        return ControlMCnt(self.control_bits, (self.mcnt + 1) % MCNT_MODULUS)

    @staticmethod
    def unpack(raw: bytes) -> "ControlMCnt":
        word = int.from_bytes(raw, "big")
        return ControlMCnt(word >> MCNT_BITS, word & (MCNT_MODULUS - 1))


@dataclass(frozen=True)
class SessionKey:
    """128-bit key installed during the safety parameter exchange."""

    key_material: bytes

    def __post_init__(self):
        if len(self.key_material) != 16:
            raise InvalidLength("session key must be 16 octets")


def _build_crc_table() -> tuple[int, ...]:
    table = []
    for byte in range(256):
        reg = byte << 8
        for _ in range(8):
            reg = ((reg << 1) ^ CRC_POLY) if reg & 0x8000 else (reg << 1)
        table.append(reg & 0xFFFF)
    return tuple(table)


_CRC_TABLE = _build_crc_table()
_CRC_TABLE_NP = np.asarray(_CRC_TABLE, dtype=np.uint16)


def compute_crc(data: bytes) -> int:
    """16-bit CRC, polynomial 0x1021, init 0xFFFF, no reflection."""
    if len(data) == 0:
        raise InvalidLength("CRC input must be non-empty")
    crc = CRC_INIT
    for byte in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[(crc >> 8) ^ byte]
    return crc


def crc_batch(frames: np.ndarray) -> np.ndarray:
    """Vectorised CRC over a (n, length) uint8 array; returns uint16 per row."""
    crc = np.full(frames.shape[0], CRC_INIT, dtype=np.uint16)
    for col in range(frames.shape[1]):
        idx = (crc >> 8) ^ frames[:, col]
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE_NP[idx]
    return crc


def compute_mac(key: SessionKey, data: bytes) -> bytes:
    """Keyed tag: HMAC-SHA256 truncated to 4 octets."""
    return hmac.new(key.key_material, data, hashlib.sha256).digest()[:MAC_LEN]


def encode_output_pdu(
    payload: bytes, ctl: ControlMCnt, identity: PairingIdentity, key: SessionKey
) -> bytes:
    if len(payload) == 0:
        raise InvalidLength("payload must be at least 1 octet")
    if len(payload) > MAX_OUTPUT_PAYLOAD:
        raise PayloadTooLong(
            f"payload is {len(payload)} octets, limit is {MAX_OUTPUT_PAYLOAD}"
        )
    covered = ctl.pack() + identity.pack() + payload
    mac = compute_mac(key, covered)
    crc = compute_crc(covered + mac)
    return covered + mac + crc.to_bytes(2, "big")


def decode_output_pdu(
    frame: bytes,
    key: SessionKey,
    expected_id: PairingIdentity,
    counter_window: tuple[int, int],
) -> tuple[bytes, ControlMCnt]:
    """Verify and strip an output frame.

    ``counter_window`` is (last accepted mcnt, forward window size); the
    frame is fresh iff its mcnt is 1..window steps ahead modulo 2^12.
    Check order: CRC, identity, MAC, counter.
    """
    if len(frame) < MIN_OUTPUT_FRAME:
        raise InvalidLength(f"frame of {len(frame)} octets below minimum")
    body, mac, crc_raw = frame[:-6], frame[-6:-2], frame[-2:]
    if compute_crc(body + mac) != int.from_bytes(crc_raw, "big"):
        raise CrcFail("checksum mismatch")
    if body[2:4] != expected_id.pack():
        raise AuthMismatch(f"identity {body[2]}/{body[3]} is not the paired track/slot")
    if not hmac.compare_digest(compute_mac(key, body), mac):
        raise MacFail("authentication tag mismatch")
    ctl = ControlMCnt.unpack(body[:2])
    last, window = counter_window
    ahead = (ctl.mcnt - last) % MCNT_MODULUS
    if not 1 <= ahead <= window:
        raise StaleCounter(f"mcnt {ctl.mcnt} not within ({last}, {last} + {window}]")
    return body[HEADER_LEN:], ctl


def encode_input_pdu(
    safety: bytes,
    nonsafety: bytes,
    ctl: ControlMCnt,
    identity: PairingIdentity,
    key: SessionKey,
) -> bytes:
    if len(safety) != SAFETY_INPUT_LEN:
        raise InvalidLength(f"safety input must be exactly {SAFETY_INPUT_LEN} octets")
    if len(nonsafety) > MAX_NONSAFETY_LEN:
        raise InvalidLength(f"non-safety data limited to {MAX_NONSAFETY_LEN} octets")
    covered = ctl.pack() + identity.pack() + safety
    mac = compute_mac(key, covered)
    crc = compute_crc(covered + mac)
    return covered + mac + crc.to_bytes(2, "big") + nonsafety


def decode_input_pdu(
    frame: bytes,
    key: SessionKey,
    expected_id: PairingIdentity,
    counter_window: tuple[int, int],
) -> tuple[bytes, bytes, ControlMCnt]:
    """Returns (safety, nonsafety, ctl); non-safety octets are not verified."""
    if len(frame) < INPUT_SAFETY_FRAME:
        raise InvalidLength(f"frame of {len(frame)} octets below minimum")
    safety_part, nonsafety = frame[:INPUT_SAFETY_FRAME], frame[INPUT_SAFETY_FRAME:]
    if len(nonsafety) > MAX_NONSAFETY_LEN:
        raise InvalidLength(f"non-safety data limited to {MAX_NONSAFETY_LEN} octets")
    body, mac, crc_raw = safety_part[:-6], safety_part[-6:-2], safety_part[-2:]
    if compute_crc(body + mac) != int.from_bytes(crc_raw, "big"):
        raise CrcFail("checksum mismatch")
    if body[2:4] != expected_id.pack():
        raise AuthMismatch(f"identity {body[2]}/{body[3]} is not the paired track/slot")
    if not hmac.compare_digest(compute_mac(key, body), mac):
        raise MacFail("authentication tag mismatch")
    ctl = ControlMCnt.unpack(body[:2])
    last, window = counter_window
    ahead = (ctl.mcnt - last) % MCNT_MODULUS
    if not 1 <= ahead <= window:
        raise StaleCounter(f"mcnt {ctl.mcnt} not within ({last}, {last} + {window}]")
    return body[HEADER_LEN:], nonsafety, ctl


def estimate_undetected_rate(
    ber: float,
    trials: int,
    rng_seed: int,
    checks: str = "full",
    payload_len: int = MAX_OUTPUT_PAYLOAD,
) -> float:
    """Monte-Carlo estimate of the undetected-corruption rate.

    Generates one valid output frame, flips each bit independently with
    probability ``ber`` per trial, and counts trials where the frame was
    altered yet still accepted.  ``checks`` selects the verification
    depth: "full" runs the complete decode, "crc_only" is a test hook
    that stops after the CRC (expected acceptance rate 2^-16).
    """
    if not 0.0 <= ber <= 0.5:
        raise InvalidParameter(f"bit error rate {ber} outside [0, 0.5]")
    if trials < 10_000:
        raise InvalidParameter("at least 10^4 trials required")
    if checks not in ("full", "crc_only"):
        raise InvalidParameter(f"unknown verification depth {checks!r}")
    if ber == 0.0:
        return 0.0

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(rng_seed)))
    key = SessionKey(bytes(range(16)))
    identity = PairingIdentity(1, 2)
    ctl = ControlMCnt(CTL_DATA, 100)
    frame = encode_output_pdu(bytes(range(payload_len)), ctl, identity, key)
    ref = np.frombuffer(frame, dtype=np.uint8)
    nbytes = ref.size
    window = (ctl.mcnt - 1, COUNTER_WINDOW)

    accepted = 0
    chunk = 1 << 16
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        if ber == 0.5:
            corrupted = rng.integers(0, 256, size=(n, nbytes), dtype=np.uint8)
        else:
            flips = rng.random((n, nbytes, 8)) < ber
            mask = np.packbits(flips, axis=-1).reshape(n, nbytes)
            corrupted = ref ^ mask
        changed = (corrupted != ref).any(axis=1)
        crc_ok = crc_batch(corrupted) == 0
        # Appending the transmitted CRC drives the register to zero on a
        # clean frame, so crc_ok is exactly the receiver's first check.
        for row in np.nonzero(changed & crc_ok)[0]:
            if checks == "crc_only":
                accepted += 1
                continue
            try:
                decode_output_pdu(corrupted[row].tobytes(), key, identity, window)
            except DecodeError:
                continue
            accepted += 1
        done += n
    return accepted / trials


def write_corpus(path, entries: list[tuple[bytes, str]]) -> None:
    """One frame per line: hex-encoded bytes, then the expected outcome token."""
    with open(path, "w") as fh:
        for frame, outcome in entries:
            fh.write(f"{frame.hex()} {outcome}\n")


def load_corpus(path) -> list[tuple[bytes, str]]:
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            hexpart, outcome = line.split()
            entries.append((bytes.fromhex(hexpart), outcome))
    return entries


def decode_outcome(
    frame: bytes,
    key: SessionKey,
    expected_id: PairingIdentity,
    counter_window: tuple[int, int],
) -> str:
    """Outcome token for a frame, matching the corpus file vocabulary."""
    try:
        decode_output_pdu(frame, key, expected_id, counter_window)
    except DecodeError as exc:
        return exc.code
    return "OK"
