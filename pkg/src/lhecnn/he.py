"""Exact-arithmetic simulation of a leveled SIMD homomorphic encryption scheme.

A ciphertext is a fixed-length vector of float64 slots plus level bookkeeping.
Six primitives are exposed (key generation, encrypt, decrypt, add, multiply,
plaintext multiply, rotate) behind a small backend interface that a real HE
library could satisfy later. The simulation is noise-free: decrypt(encrypt(v))
is exactly v, and every slot operation is ordinary IEEE arithmetic.

Level accounting follows lazy rescaling. ``Ciphertext.level`` is the effective
remaining multiplication budget: a fresh ciphertext starts at L-1 and every
ciphertext-ciphertext or ciphertext-plaintext multiply lowers it by one.
Internally a multiply result carries a pending rescale; additions and
rotations applied to it before the next multiply still run (and are recorded)
at the pre-rescale modulus level, while the consuming multiply rescales first
and is recorded at the post-rescale operand level. This attribution is what
makes the per-level operation counts come out right: a conv layer entered at
level 5 books both its multiplies and its accumulation adds at level 5, the
following square activation books at level 4, and so on down to the last
multiply at level 1.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numpy as np

from .errors import (
    AuthorizationError,
    DepthBudgetError,
    KeyMismatchError,
    ValidationError,
)
from .ledger import OpLedger


def _as_slots(values, slot_count: int) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != slot_count:
        raise ValidationError(
            f"slot vector must have exactly {slot_count} entries, got shape {arr.shape}"
        )
    out = arr.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class KeyMaterial:
    """Session key handle: slot count, level budget, and an opaque key id.

    ``secret`` marks whether this handle carries decryption capability. The
    TEE keeps the secret handle; everyone else gets ``public()``.
    """

    slot_count: int
    levels: int
    security: int
    key_id: str
    secret: bool = True

    def public(self) -> "KeyMaterial":
        return replace(self, secret=False)


@dataclass(frozen=True)
class Ciphertext:
    """Immutable packed ciphertext: payload slots plus level bookkeeping.

    ``level`` is the effective remaining multiplication budget; ``pending``
    marks a multiply result whose rescale has not been consumed yet (its
    modulus is still one step higher than ``level``).
    """

    payload: np.ndarray
    level: int
    key_id: str
    pending: bool = False

    @property
    def slot_count(self) -> int:
        return self.payload.shape[0]

    @property
    def modulus_level(self) -> int:
        return self.level + (1 if self.pending else 0)


class HeBackend(Protocol):
    """The primitive set every backend must provide."""

    def keygen(self, security: int, levels: int, slot_count: int) -> KeyMaterial: ...
    def encrypt(self, values, keys: KeyMaterial, ledger: OpLedger | None = None) -> Ciphertext: ...
    def decrypt(self, ct: Ciphertext, keys: KeyMaterial, ledger: OpLedger | None = None) -> np.ndarray: ...
    def add(self, a: Ciphertext, b: Ciphertext, ledger: OpLedger | None = None) -> Ciphertext: ...
    def multiply(self, a: Ciphertext, b: Ciphertext, ledger: OpLedger | None = None) -> Ciphertext: ...
    def cmult(self, ct: Ciphertext, values, ledger: OpLedger | None = None) -> Ciphertext: ...
    def rotate(self, ct: Ciphertext, m: int, ledger: OpLedger | None = None) -> Ciphertext: ...
    def level_align(self, ct: Ciphertext, target: int) -> Ciphertext: ...


class ExactBackend:
    """Noise-free reference backend over float64 slot vectors."""

    def __init__(self, key_prefix: str = "key"):
        self._key_prefix = key_prefix
        self._key_counter = itertools.count()

    # -- keys and encryption ------------------------------------------------

    def keygen(self, security: int, levels: int, slot_count: int) -> KeyMaterial:
        if levels < 1:
            raise ValidationError(f"level budget must be >= 1, got {levels}")
        if slot_count < 1 or (slot_count & (slot_count - 1)) != 0:
            raise ValidationError(f"slot count must be a power of two, got {slot_count}")
        key_id = f"{self._key_prefix}-{next(self._key_counter)}"
        return KeyMaterial(slot_count=slot_count, levels=levels,
                           security=security, key_id=key_id)

    def encrypt(self, values, keys: KeyMaterial, ledger: OpLedger | None = None) -> Ciphertext:
        payload = _as_slots(values, keys.slot_count)
        if ledger is not None:
            ledger.record("enc", keys.levels - 1)
        return Ciphertext(payload=payload, level=keys.levels - 1, key_id=keys.key_id)

    def decrypt(self, ct: Ciphertext, keys: KeyMaterial, ledger: OpLedger | None = None) -> np.ndarray:
        if not keys.secret:
            raise AuthorizationError(
                "decryption requires the secret key handle held by the TEE"
            )
        if ct.key_id != keys.key_id:
            raise KeyMismatchError(
                f"ciphertext under key {ct.key_id!r}, decrypting with {keys.key_id!r}"
            )
        if ledger is not None:
            ledger.record("dec", ct.modulus_level)
        return ct.payload.copy()

    # -- homomorphic operations ----------------------------------------------

    def _check_pair(self, a: Ciphertext, b: Ciphertext) -> None:
        if a.key_id != b.key_id:
            raise KeyMismatchError(
                f"operands under different keys: {a.key_id!r} vs {b.key_id!r}"
            )
        if a.slot_count != b.slot_count:
            raise ValidationError("operands have different slot counts")

    def add(self, a: Ciphertext, b: Ciphertext, ledger: OpLedger | None = None) -> Ciphertext:
        self._check_pair(a, b)
        target = min(a.level, b.level)
        a = self.level_align(a, target)
        b = self.level_align(b, target)
        if a.pending != b.pending:
            # Normalize by performing the outstanding rescale (payload-free
            # in the simulation); both operands then share a modulus.
            a = replace(a, pending=False)
            b = replace(b, pending=False)
        if ledger is not None:
            ledger.record("add", target + (1 if a.pending else 0))
        payload = a.payload + b.payload
        payload.flags.writeable = False
        return Ciphertext(payload=payload, level=target, key_id=a.key_id,
                          pending=a.pending)

    def multiply(self, a: Ciphertext, b: Ciphertext, ledger: OpLedger | None = None) -> Ciphertext:
        self._check_pair(a, b)
        target = min(a.level, b.level)
        if target < 1:
            phase = ledger.current_phase if ledger is not None else ""
            raise DepthBudgetError(
                "multiplication attempted at level 0; the depth budget is exhausted",
                phase=phase,
            )
        if ledger is not None:
            ledger.record("mul", target)
        payload = a.payload * b.payload
        payload.flags.writeable = False
        return Ciphertext(payload=payload, level=target - 1, key_id=a.key_id,
                          pending=True)

    def cmult(self, ct: Ciphertext, values, ledger: OpLedger | None = None) -> Ciphertext:
        mask = _as_slots(values, ct.slot_count)
        if ct.level < 1:
            phase = ledger.current_phase if ledger is not None else ""
            raise DepthBudgetError(
                "plaintext multiplication attempted at level 0",
                phase=phase,
            )
        if ledger is not None:
            ledger.record("cmult", ct.level)
        payload = ct.payload * mask
        payload.flags.writeable = False
        return Ciphertext(payload=payload, level=ct.level - 1, key_id=ct.key_id,
                          pending=True)

    def rotate(self, ct: Ciphertext, m: int, ledger: OpLedger | None = None) -> Ciphertext:
        if not 0 <= m < ct.slot_count:
            raise ValidationError(
                f"rotation amount must be in [0, {ct.slot_count}), got {m}"
            )
        if ledger is not None:
            ledger.record("rot", ct.modulus_level)
        payload = np.roll(ct.payload, -m)  # cyclic left shift: out[i] = in[(i+m) % S]
        payload.flags.writeable = False
        return Ciphertext(payload=payload, level=ct.level, key_id=ct.key_id,
                          pending=ct.pending)

    def level_align(self, ct: Ciphertext, target: int) -> Ciphertext:
        """Drop a ciphertext to a lower effective level at no ledger cost."""
        if target > ct.level:
            raise ValidationError(
                f"cannot align level {ct.level} ciphertext up to {target}"
            )
        if target == ct.level:
            return ct
        return replace(ct, level=target)


def decrypt_many(backend, cts: Sequence[Ciphertext], keys: KeyMaterial,
                 ledger: OpLedger | None = None) -> np.ndarray:
    return np.stack([backend.decrypt(ct, keys, ledger) for ct in cts])
