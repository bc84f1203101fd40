"""Keyed symbol sequences, waiting periods and baseband signal construction.

Every secret quantity in a ranging session (request pattern, response
patterns, waiting periods, SYNC payload) is derived from the shared key with
HMAC-SHA-256, so initiator and reflectors compute identical values without
exchanging them.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from scipy.signal import firwin, max_len_seq, upfirdn

SYNC_PAYLOAD_OCTETS = 16
POSTAMBLE_LENGTH = 64
UPSAMPLE_TAPS_PER_BRANCH = 64


class Role(enum.IntEnum):
    REQ = 1
    RESP = 2
    POSTAMBLE = 3
    WAIT = 4
    SYNC = 5


@dataclass(frozen=True)
class SharedKey:
    """Opaque key material shared out of band by all ranging nodes."""

    value: bytes

    def __post_init__(self):
        if not isinstance(self.value, (bytes, bytearray)):
            raise TypeError("key must be bytes")
        if len(self.value) == 0:
            raise ValueError("empty key")
        if len(self.value) < 16:
            raise ValueError(f"key must be at least 16 octets, got {len(self.value)}")
        object.__setattr__(self, "value", bytes(self.value))

    def __repr__(self):
        return f"SharedKey(<{len(self.value)} octets>)"


@dataclass(frozen=True)
class EpochIndex:
    value: int
    duration: float

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("epoch duration must be positive")
        if self.value < 0:
            raise ValueError("epoch index must be non-negative")

    @classmethod
    def at(cls, t: float, duration: float) -> "EpochIndex":
        if duration <= 0:
            raise ValueError("epoch duration must be positive")
        return cls(int(np.floor(t / duration)), duration)


class SequenceLabel(NamedTuple):
    role: Role
    owner: int
    epoch: int
    n: int = 0


@dataclass(frozen=True)
class SymbolSequence:
    symbols: np.ndarray
    label: SequenceLabel

    def __post_init__(self):
        s = np.asarray(self.symbols, dtype=np.int8)
        if s.ndim != 1 or s.size == 0:
            raise ValueError("sequence must be a non-empty 1-D array")
        if not np.all(np.abs(s) == 1):
            raise ValueError("symbols must be +1 or -1")
        s.flags.writeable = False
        object.__setattr__(self, "symbols", s)

    def __len__(self):
        return self.symbols.size


@dataclass(frozen=True)
class BasebandSignal:
    """Complex samples at a fixed sample period, occupying ``bandwidth`` Hz."""

    samples: np.ndarray
    sample_period: float
    bandwidth: float

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.complex128)
        if x.ndim != 1:
            raise ValueError("samples must be 1-D")
        if self.sample_period <= 0:
            raise ValueError("sample period must be positive")
        if self.bandwidth <= 0 or self.bandwidth > 1.0 / self.sample_period * (1 + 1e-12):
            raise ValueError("bandwidth must lie in (0, 1/T]")
        if not np.all(np.isfinite(x)):
            raise ValueError("samples must be finite")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)

    def __len__(self):
        return self.samples.size

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.sample_period

    @property
    def energy(self) -> float:
        return float(np.sum(np.abs(self.samples) ** 2))

    def scaled(self, c: complex) -> "BasebandSignal":
        return BasebandSignal(self.samples * c, self.sample_period, self.bandwidth)


@dataclass(frozen=True)
class WaitingPeriod:
    value: float
    window: int
    n: int
    samples: int


def encode_label(role: Role, owner: int, epoch: int, n: Optional[int] = None,
                 window: Optional[int] = None) -> bytes:
    """Fixed-width big-endian label: role(1) id(4) epoch(8) [n(4)] [W(4)]."""
    out = struct.pack(">BIQ", int(role), owner, epoch)
    if n is not None:
        out += struct.pack(">I", n)
    if window is not None:
        out += struct.pack(">I", window)
    return out


def prf_bytes(key: SharedKey, label: bytes, n_octets: int) -> bytes:
    """HMAC-SHA-256 in counter mode; the 4-octet block index follows the label."""
    blocks = []
    for i in range((n_octets + 31) // 32):
        blocks.append(hmac.new(key.value, label + struct.pack(">I", i), hashlib.sha256).digest())
    return b"".join(blocks)[:n_octets]


def derive_sequence(key: SharedKey, label: SequenceLabel, length: int) -> SymbolSequence:
    """Derive a secret +/-1 sequence of ``length`` symbols.

    Bits map 0 -> +1 and 1 -> -1. REQ labels do not carry the response
    counter; RESP and POSTAMBLE labels do.
    """
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    role = Role(label.role)
    n = None if role == Role.REQ else label.n
    raw = prf_bytes(key, encode_label(role, label.owner, label.epoch, n), (length + 7) // 8)
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:length]
    symbols = (1 - 2 * bits.astype(np.int8)).astype(np.int8)
    return SymbolSequence(symbols, SequenceLabel(role, label.owner, label.epoch, 0 if n is None else n))


def derive_waiting_period(key: SharedKey, reflector_id: int, epoch: int, n: int,
                          window: int, sample_period: float) -> WaitingPeriod:
    if window < 1:
        raise ValueError("waiting window must be >= 1")
    if sample_period <= 0:
        raise ValueError("sample period must be positive")
    h = int.from_bytes(prf_bytes(key, encode_label(Role.WAIT, reflector_id, epoch, n, window), 8), "big")
    k = h % window
    return WaitingPeriod(value=k * sample_period, window=window, n=n, samples=k)


def derive_waiting_samples(key: SharedKey, reflector_id: int, epoch: int, count: int,
                           window: int) -> np.ndarray:
    """Waiting periods 0..count-1 for one reflector, in whole samples."""
    return np.array([derive_waiting_period(key, reflector_id, epoch, n, window, 1.0).samples
                     for n in range(count)], dtype=np.int64)


def modulate_bpsk(seq: SymbolSequence, sample_period: float) -> BasebandSignal:
    return BasebandSignal(seq.symbols.astype(np.complex128), sample_period, 1.0 / sample_period)


def demodulate_bpsk(sig: BasebandSignal | np.ndarray) -> np.ndarray:
    x = sig.samples if isinstance(sig, BasebandSignal) else np.asarray(sig)
    return np.where(x.real >= 0, 1, -1).astype(np.int8)


def interpolation_filter(factor: int) -> np.ndarray:
    """Hamming windowed-sinc low-pass with cutoff at 1/factor of Nyquist.

    Scaled by sqrt(factor) so that interpolating white symbols keeps their
    energy.
    """
    ntaps = UPSAMPLE_TAPS_PER_BRANCH * factor + 1
    return firwin(ntaps, 1.0 / factor, window="hamming") * np.sqrt(factor)


def upsample(sig: BasebandSignal, factor: int) -> BasebandSignal:
    """Zero-stuff by ``factor`` and low-pass to the new band edge.

    The filter delay is removed so the output stays aligned with the input
    and has exactly ``factor * len(sig)`` samples.
    """
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ValueError("upsampling factor must be a positive integer")
    if factor == 1:
        return sig
    h = interpolation_filter(factor)
    delay = (h.size - 1) // 2
    y = upfirdn(h, sig.samples, up=factor)[delay: delay + factor * len(sig)]
    return BasebandSignal(y, sig.sample_period / factor, sig.bandwidth / factor)


def postamble_sequence() -> SymbolSequence:
    """Public 64-symbol postamble.

    A length-63 m-sequence extended by one zero in its longest zero run
    (balanced de Bruijn sequence).
    """
    bits, _ = max_len_seq(6)
    bits = bits.astype(np.int8)
    s = "".join(map(str, bits))
    i = s.index("0" * 5)
    ext = np.concatenate([bits[:i], [0], bits[i:]])
    return SymbolSequence(1 - 2 * ext, SequenceLabel(Role.POSTAMBLE, 0, 0, 0))


def _sync_cipher_key(key: SharedKey) -> bytes:
    return hmac.new(key.value, b"rangesim/sync-cipher", hashlib.sha256).digest()


def _sync_tag(key: SharedKey, body: bytes) -> bytes:
    return hmac.new(key.value, b"rangesim/sync-tag" + body, hashlib.sha256).digest()[:4]


def _sync_keystream_xor(key: SharedKey, epoch: int, data: bytes) -> bytes:
    nonce = struct.pack(">IQI", 0, epoch, 0)
    enc = Cipher(algorithms.ChaCha20(_sync_cipher_key(key), nonce), mode=None).encryptor()
    return enc.update(data)


def encrypt_sync_payload(key: SharedKey, initiator_id: int, epoch: int) -> bytes:
    body = struct.pack(">IQ", initiator_id, epoch)
    return _sync_keystream_xor(key, epoch, body + _sync_tag(key, body))


def decrypt_sync_payload(key: SharedKey, payload: bytes,
                         candidate_epochs: Sequence[int]) -> Optional[tuple[int, int]]:
    """Try each candidate nonce; return (initiator_id, epoch) or None."""
    if len(payload) != SYNC_PAYLOAD_OCTETS:
        return None
    for e in candidate_epochs:
        if e < 0:
            continue
        plain = _sync_keystream_xor(key, e, payload)
        body, tag = plain[:12], plain[12:]
        initiator_id, epoch = struct.unpack(">IQ", body)
        if epoch == e and hmac.compare_digest(tag, _sync_tag(key, body)):
            return initiator_id, epoch
    return None


def build_sync_frame(key: SharedKey, initiator_id: int, epoch: EpochIndex | int,
                     postamble: SymbolSequence, sample_period: float) -> BasebandSignal:
    """SYNC frame: BPSK ciphertext of (initiator id, epoch) then the postamble."""
    tau = epoch.value if isinstance(epoch, EpochIndex) else int(epoch)
    payload = encrypt_sync_payload(key, initiator_id, tau)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8)).astype(np.int8)
    symbols = np.concatenate([1 - 2 * bits, postamble.symbols])
    return BasebandSignal(symbols.astype(np.complex128), sample_period, 1.0 / sample_period)


def decode_sync_frame(key: SharedKey, symbols: np.ndarray,
                      candidate_epochs: Sequence[int]) -> Optional[tuple[int, int]]:
    """Decode hard-decided frame symbols (payload followed by postamble)."""
    nbits = SYNC_PAYLOAD_OCTETS * 8
    s = np.asarray(symbols)[:nbits]
    if s.size < nbits:
        return None
    bits = (s < 0).astype(np.uint8)
    return decrypt_sync_payload(key, np.packbits(bits).tobytes(), candidate_epochs)
