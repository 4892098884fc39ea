"""MD5 digests, digest-set comparison and hex divergence.

MD5 is computed here from the RFC 1321 algorithm rather than through
``hashlib`` so the challenge protocol has no dependency on the host's
crypto build and behaves bit-identically everywhere.
"""

from __future__ import annotations

import enum
import functools
import math
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

CHALLENGE_SIZE = 64
DIGEST_SIZE = 16

_MASK = 0xFFFFFFFF
_INIT = (0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476)

# Per-step additive constants: floor(|sin(i + 1)| * 2**32).
_T = tuple(int(abs(math.sin(i + 1)) * 2**32) & _MASK for i in range(64))

_SHIFTS = (
    (7, 12, 17, 22),
    (5, 9, 14, 20),
    (4, 11, 16, 23),
    (6, 10, 15, 21),
)

# (message word index, shift, constant) for each of the 16 steps of a round.
_ROUNDS = tuple(
    tuple(
        (
            (i, (5 * i + 1) % 16, (3 * i + 5) % 16, (7 * i) % 16)[r],
            _SHIFTS[r][i % 4],
            _T[16 * r + i],
        )
        for i in range(16)
    )
    for r in range(4)
)
_R1, _R2, _R3, _R4 = _ROUNDS


def _pad(message: bytes) -> bytes:
    bit_len = (8 * len(message)) & 0xFFFFFFFFFFFFFFFF
    tail = b"\x80" + b"\x00" * ((55 - len(message)) % 64)
    return message + tail + struct.pack("<Q", bit_len)


def _compress(state: tuple, block: bytes) -> tuple:
    x = struct.unpack("<16I", block)
    a, b, c, d = state
    for k, s, t in _R1:
        v = (a + ((b & c) | (~b & d)) + x[k] + t) & _MASK
        a, d, c = d, c, b
        b = (b + ((v << s) | (v >> (32 - s)))) & _MASK
    for k, s, t in _R2:
        v = (a + ((b & d) | (c & ~d)) + x[k] + t) & _MASK
        a, d, c = d, c, b
        b = (b + ((v << s) | (v >> (32 - s)))) & _MASK
    for k, s, t in _R3:
        v = (a + (b ^ c ^ d) + x[k] + t) & _MASK
        a, d, c = d, c, b
        b = (b + ((v << s) | (v >> (32 - s)))) & _MASK
    for k, s, t in _R4:
        v = (a + (c ^ (b | (~d & _MASK))) + x[k] + t) & _MASK
        a, d, c = d, c, b
        b = (b + ((v << s) | (v >> (32 - s)))) & _MASK
    return (
        (state[0] + a) & _MASK,
        (state[1] + b) & _MASK,
        (state[2] + c) & _MASK,
        (state[3] + d) & _MASK,
    )


@functools.lru_cache(maxsize=4096)
def _md5_raw(message: bytes) -> bytes:
    padded = _pad(message)
    state = _INIT
    for off in range(0, len(padded), 64):
        state = _compress(state, padded[off:off + 64])
    return struct.pack("<4I", *state)


@dataclass(frozen=True)
class Digest128:
    """A 128-bit MD5 digest; compares byte-wise."""

    bytes: bytes

    def __post_init__(self):
        if not isinstance(self.bytes, (bytes, bytearray)) or len(self.bytes) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes")
        object.__setattr__(self, "bytes", bytes(self.bytes))

    @property
    def hex(self) -> str:
        return self.bytes.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Digest128":
        if len(text) != 2 * DIGEST_SIZE:
            raise ValueError(f"expected {2 * DIGEST_SIZE} hex characters, got {len(text)}")
        return cls(bytes.fromhex(text))

    def flip_bit(self, index: int) -> "Digest128":
        """Return a copy with bit ``index`` (0..127) inverted."""
        buf = bytearray(self.bytes)
        buf[index // 8] ^= 1 << (index % 8)
        return Digest128(bytes(buf))

    def __str__(self):
        return self.hex


@dataclass(frozen=True)
class ChallengeMessage:
    """The 512-bit message M every node must hash."""

    payload: bytes

    def __post_init__(self):
        if len(self.payload) != CHALLENGE_SIZE:
            raise ValueError(
                f"challenge message must be exactly {CHALLENGE_SIZE} bytes, got {len(self.payload)}"
            )
        object.__setattr__(self, "payload", bytes(self.payload))

    @classmethod
    def random(cls, rng: random.Random) -> "ChallengeMessage":
        return cls(rng.randbytes(CHALLENGE_SIZE))

    def flip_bit(self, index: int) -> "ChallengeMessage":
        buf = bytearray(self.payload)
        buf[index // 8] ^= 1 << (index % 8)
        return ChallengeMessage(bytes(buf))


def md5_digest(message) -> Digest128:
    """MD5 of ``message`` (bytes, bytearray or a :class:`ChallengeMessage`)."""
    if isinstance(message, ChallengeMessage):
        message = message.payload
    return Digest128(_md5_raw(bytes(message)))


def hex_divergence(a: Digest128, b: Digest128) -> float:
    """Fraction of the 32 hex positions at which ``a`` and ``b`` differ."""
    ha, hb = a.hex, b.hex
    return sum(x != y for x, y in zip(ha, hb)) / len(ha)


class Verdict(enum.Enum):
    ALL_MATCH = "AllMatch"
    MISMATCH = "Mismatch"
    DISJOINT = "Disjoint"


@dataclass(frozen=True)
class SetComparison:
    verdict: Verdict
    erroneous_ids: frozenset = field(default_factory=frozenset)


def compare_digest_sets(expected: Digest128, observed: Sequence) -> SetComparison:
    """Compare observed ``(node_id, digest)`` pairs against the expected digest.

    Disjoint means no node agreed with ``expected``; callers should then
    suspect the supervisor as well as the nodes.
    """
    observed = list(observed)
    if not observed:
        raise ValueError("compare_digest_sets needs at least one observed digest")
    bad = frozenset(node for node, digest in observed if digest != expected)
    if not bad:
        return SetComparison(Verdict.ALL_MATCH, bad)
    if len(bad) == len({node for node, _ in observed}):
        return SetComparison(Verdict.DISJOINT, bad)
    return SetComparison(Verdict.MISMATCH, bad)


@dataclass(frozen=True)
class AvalancheSummary:
    trials: int
    mean: float
    minimum: float
    maximum: float
    fraction_at_least_half: float


def avalanche_study(
    trials: int,
    seed: int = 0,
    message: Optional[ChallengeMessage] = None,
) -> list:
    """Hex divergence between digest(M) and digest(M with one bit flipped).

    A fresh random M is drawn per trial unless ``message`` pins it.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = random.Random(seed)
    out = []
    for _ in range(trials):
        m = message if message is not None else ChallengeMessage.random(rng)
        flipped = m.flip_bit(rng.randrange(8 * CHALLENGE_SIZE))
        out.append(hex_divergence(md5_digest(m), md5_digest(flipped)))
    return out


def summarize_divergence(values: Iterable[float]) -> AvalancheSummary:
    values = list(values)
    if not values:
        return AvalancheSummary(0, 0.0, 0.0, 0.0, 0.0)
    return AvalancheSummary(
        trials=len(values),
        mean=sum(values) / len(values),
        minimum=min(values),
        maximum=max(values),
        fraction_at_least_half=sum(v >= 0.5 for v in values) / len(values),
    )
