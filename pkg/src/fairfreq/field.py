"""Prime-field arithmetic and one-hot encoding of categorical items.

Residues are held in ``int64`` numpy arrays.  Every modulus used here is
small (well under ``2**31``), so the sum of two reduced residues never
overflows before reduction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "FieldMismatchError",
    "FieldSpec",
    "EncodedRecord",
    "is_prime",
    "smallest_prime_above",
    "encode_one_hot",
    "zero_record",
    "field_add",
    "field_sub",
    "field_neg",
]

# q must stay below this so that q**2 fits in int64
_MAX_MODULUS = 3_037_000_499


class FieldMismatchError(ValueError):
    """Operands were reduced under different moduli."""


def is_prime(k: int) -> bool:
    """Deterministic trial division."""
    if k < 2:
        return False
    if k < 4:
        return True
    if k % 2 == 0 or k % 3 == 0:
        return False
    r = math.isqrt(k)
    d = 5
    while d <= r:
        if k % d == 0 or k % (d + 2) == 0:
            return False
        d += 6
    return True


@dataclass(frozen=True)
class FieldSpec:
    """The prime field F_q used to count ``n_bound`` users without wraparound."""

    q: int
    n_bound: int = 0

    def __post_init__(self):
        if not is_prime(self.q):
            raise ValueError(f"modulus {self.q} is not prime")
        if self.q <= self.n_bound:
            raise ValueError(f"modulus {self.q} must exceed n_bound={self.n_bound}")
        if self.q > _MAX_MODULUS:
            raise OverflowError(f"modulus {self.q} too large for int64 residues")

    def reduce(self, x):
        if isinstance(x, (int, np.integer)):
            return int(x) % self.q
        return np.mod(np.asarray(x, dtype=np.int64), self.q)

    def add(self, a, b):
        return self.reduce(_raw(a) + _raw(b))

    def sub(self, a, b):
        return self.reduce(_raw(a) - _raw(b))

    def neg(self, a):
        return self.reduce(-_raw(a))

    def sum(self, vectors, axis=0):
        """Field sum of a stack of residue vectors along ``axis``."""
        arr = np.asarray(vectors, dtype=np.int64)
        if arr.size == 0:
            return arr.sum(axis=axis)
        # reduce as we go; a plain int64 sum could overflow for long stacks
        if arr.shape[axis] * (self.q - 1) < np.iinfo(np.int64).max:
            return np.mod(arr.sum(axis=axis), self.q)
        return np.mod(np.add.reduce(np.mod(arr, self.q), axis=axis), self.q)

    def uniform(self, rng: np.random.Generator, size=None):
        """Uniform residues; numpy's bounded integer sampler is rejection-based."""
        return rng.integers(0, self.q, size=size, dtype=np.int64)


def smallest_prime_above(n: int) -> FieldSpec:
    """Smallest prime ``q > n`` wrapped as a :class:`FieldSpec`.

    >>> smallest_prime_above(1000).q
    1009
    """
    n = int(n)
    if n < 1:
        raise ValueError("n must be a positive integer")
    q = n + 1
    while not is_prime(q):
        q += 1
        if q > _MAX_MODULUS:
            raise OverflowError(f"no usable prime above {n}")
    return FieldSpec(q=q, n_bound=n)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EncodedRecord:
    """A user's response vector: ``e_j`` (one-hot) or the zero vector.

    ``item`` is 1-based, matching the item labels ``1..N``; it is ``None``
    for the zero record.  ``field`` may be left unset: 0/1 entries are valid
    residues in every field.
    """

    entries: np.ndarray
    field: Optional[FieldSpec] = None
    item: Optional[int] = None

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.int64)
        if entries.ndim != 1 or entries.size == 0:
            raise ValueError("entries must be a non-empty 1-d sequence")
        nonzero = np.flatnonzero(entries)
        if self.item is None:
            if nonzero.size:
                raise ValueError("record without an item must be all zero")
        elif nonzero.tolist() != [self.item - 1] or entries[self.item - 1] != 1:
            raise ValueError(f"record is not the one-hot vector for item {self.item}")
        object.__setattr__(self, "entries", _frozen(entries))

    @property
    def N(self) -> int:
        return self.entries.size

    @property
    def is_zero(self) -> bool:
        return self.item is None

    def __eq__(self, other):
        if not isinstance(other, EncodedRecord):
            return NotImplemented
        return (
            self.field == other.field
            and self.item == other.item
            and np.array_equal(self.entries, other.entries)
        )

    def __hash__(self):
        return hash((self.field, self.item, self.N))

    def __repr__(self):
        q = self.field.q if self.field else None
        return f"EncodedRecord(item={self.item}, N={self.N}, q={q})"


def encode_one_hot(item: int, N: int, field: Optional[FieldSpec] = None) -> EncodedRecord:
    if N < 1:
        raise ValueError("domain size N must be at least 1")
    if not 1 <= item <= N:
        raise ValueError(f"item {item} outside the domain 1..{N}")
    entries = np.zeros(N, dtype=np.int64)
    entries[item - 1] = 1
    return EncodedRecord(entries, field, item=int(item))


def zero_record(N: int, field: Optional[FieldSpec] = None) -> EncodedRecord:
    if N < 1:
        raise ValueError("domain size N must be at least 1")
    return EncodedRecord(np.zeros(N, dtype=np.int64), field)


Operand = Union[int, np.ndarray, Sequence[int], EncodedRecord]


def _raw(x):
    if isinstance(x, EncodedRecord):
        return x.entries
    if isinstance(x, (int, np.integer)):
        return int(x)
    return np.asarray(x, dtype=np.int64)


def _resolve(field: Optional[FieldSpec], *operands) -> FieldSpec:
    specs = {op.field for op in operands if isinstance(op, EncodedRecord) and op.field}
    if field is not None:
        specs.add(field)
    if len(specs) > 1:
        raise FieldMismatchError(f"operands live in different fields: {sorted(s.q for s in specs)}")
    if not specs:
        raise TypeError("a FieldSpec is required for raw residues")
    return specs.pop()


def _check_reduced(spec: FieldSpec, *operands):
    for op in operands:
        raw = _raw(op)
        if np.any(np.asarray(raw) < 0) or np.any(np.asarray(raw) >= spec.q):
            raise ValueError(f"operand not reduced mod {spec.q}")


def field_add(a: Operand, b: Operand, field: Optional[FieldSpec] = None):
    spec = _resolve(field, a, b)
    _check_reduced(spec, a, b)
    return spec.add(_raw(a), _raw(b))


def field_sub(a: Operand, b: Operand, field: Optional[FieldSpec] = None):
    spec = _resolve(field, a, b)
    _check_reduced(spec, a, b)
    return spec.sub(_raw(a), _raw(b))


def field_neg(a: Operand, field: Optional[FieldSpec] = None):
    spec = _resolve(field, a)
    _check_reduced(spec, a)
    return spec.neg(_raw(a))
