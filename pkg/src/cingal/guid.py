"""Globally unique identifiers in ``urn:cingal:<hex>`` form.

A Guid is a digest-valued identity: store keys are the digest of the
stored bytes, machine ids are digests of fresh randomness. The digest
algorithm is per-node configuration (all nodes of one deployment must
agree); MD5 is the historical default, SHA-256 is selectable.
"""

from __future__ import annotations

import hashlib
import os
import string

from .errors import SchemaViolation

URN_PREFIX = "urn:cingal:"

DIGEST_ALGORITHMS = ("md5", "sha256")

_HEX = set(string.hexdigits.lower())


class Guid:
    """Normalized identifier; equality is string equality of the hex part."""

    __slots__ = ("hex",)

    def __init__(self, value: str):
        raw = value.strip()
        if raw.lower().startswith(URN_PREFIX):
            raw = raw[len(URN_PREFIX):]
        raw = raw.lower()
        if not raw or len(raw) % 2 != 0 or not set(raw) <= _HEX:
            raise SchemaViolation(f"not a valid guid: {value!r}")
        self.hex = raw

    @property
    def urn(self) -> str:
        return URN_PREFIX + self.hex

    def __str__(self) -> str:
        return self.urn

    def __repr__(self) -> str:
        return f"Guid({self.urn!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Guid) and self.hex == other.hex

    def __hash__(self) -> int:
        return hash(self.hex)


def compute_guid(data: bytes, algorithm: str = "md5") -> Guid:
    """Digest arbitrary bytes into a Guid. Deterministic; empty input allowed."""
    if algorithm not in DIGEST_ALGORITHMS:
        raise ValueError(f"unsupported digest algorithm: {algorithm}")
    return Guid(hashlib.new(algorithm, data).hexdigest())


def fresh_guid(algorithm: str = "md5") -> Guid:
    """A new identifier from fresh randomness (machine ids, task ids)."""
    return compute_guid(os.urandom(16), algorithm)
