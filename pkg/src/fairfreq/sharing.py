"""Additive secret sharing over F_q.

A secret vector ``s`` is split into ``m`` shares: the first ``m - 1`` are
uniform over F_q^N, the last is ``s`` minus their sum.  Any ``m - 1`` shares
are jointly uniform and independent of ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .field import FieldMismatchError, FieldSpec

__all__ = [
    "IncompleteBundleError",
    "ShareBundle",
    "CoalitionView",
    "share",
    "reconstruct",
    "aggregate_shares",
    "aggregate_bundles",
    "coalition_view",
]


class IncompleteBundleError(ValueError):
    """Reconstruction attempted without all ``m`` shares."""


@dataclass(frozen=True, eq=False)
class ShareBundle:
    """``m`` additive shares of one secret vector; row ``t`` belongs to party ``t``.

    A missing share is represented by ``None`` in ``shares`` (for instance a
    bundle rebuilt from a partial view).
    """

    shares: Tuple[Optional[np.ndarray], ...]
    field: FieldSpec

    def __post_init__(self):
        if len(self.shares) < 2:
            raise ValueError("a bundle needs at least two parties")
        if all(s is not None for s in self.shares):
            block = np.array(self.shares, dtype=np.int64).reshape(len(self.shares), -1)
            block.setflags(write=False)
            object.__setattr__(self, "shares", tuple(block))
            return
        frozen = []
        for s in self.shares:
            if s is None:
                frozen.append(None)
                continue
            a = np.array(s, dtype=np.int64).reshape(-1)
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "shares", tuple(frozen))

    @property
    def m(self) -> int:
        return len(self.shares)

    @property
    def N(self) -> int:
        return next(s.size for s in self.shares if s is not None)

    @property
    def complete(self) -> bool:
        return all(s is not None for s in self.shares)

    def __getitem__(self, party):
        return self.shares[party]


def share(secret, m: int, field: FieldSpec, rng: np.random.Generator) -> ShareBundle:
    """Split ``secret`` into ``m`` additive shares.

    Consumes exactly ``(m - 1) * N`` uniform residues from ``rng`` in the
    order share 0 entry 0, share 0 entry 1, ..., share m-2 entry N-1.  The
    last share (index ``m - 1``) is the dependent one.
    """
    if m < 2:
        raise ValueError(f"need at least 2 parties, got m={m}")
    secret = np.atleast_1d(np.asarray(secret, dtype=np.int64))
    if np.any(secret < 0) or np.any(secret >= field.q):
        raise ValueError(f"secret not reduced mod {field.q}")
    random_part = field.uniform(rng, size=(m - 1, secret.size))
    last = np.mod(secret - random_part.sum(axis=0), field.q)
    return ShareBundle(tuple(random_part) + (last,), field)


def reconstruct(bundle: ShareBundle) -> np.ndarray:
    if not bundle.complete:
        missing = [t for t, s in enumerate(bundle.shares) if s is None]
        raise IncompleteBundleError(f"shares missing for parties {missing}")
    return bundle.field.sum(np.stack(bundle.shares))


def aggregate_shares(per_party_shares: Sequence[Sequence], field: FieldSpec) -> ShareBundle:
    """Each party sums the shares it received; the result shares the sum of secrets.

    ``per_party_shares[t]`` lists the shares party ``t`` received, one per
    contributed secret.  Every party must have received the same number.
    """
    counts = {len(received) for received in per_party_shares}
    if len(counts) != 1:
        raise ValueError(f"ragged input: parties received {sorted(counts)} shares")
    if counts == {0}:
        raise ValueError("no contributions to aggregate")
    summed = [field.sum(np.asarray(received, dtype=np.int64).reshape(len(received), -1))
              for received in per_party_shares]
    return ShareBundle(tuple(summed), field)


def aggregate_bundles(bundles: Iterable[ShareBundle]) -> ShareBundle:
    """Convenience wrapper: aggregate a collection of full bundles party-wise."""
    bundles = list(bundles)
    if not bundles:
        raise ValueError("no bundles to aggregate")
    fields = {b.field for b in bundles}
    if len(fields) != 1:
        raise FieldMismatchError("bundles were shared over different fields")
    ms = {b.m for b in bundles}
    if len(ms) != 1:
        raise ValueError(f"bundles shared to differing party counts {sorted(ms)}")
    m = ms.pop()
    per_party = [[b[t] for b in bundles] for t in range(m)]
    return aggregate_shares(per_party, fields.pop())


@dataclass(frozen=True)
class CoalitionView:
    """What a set of parties holds: ``observed[k][t]`` is party ``t``'s share of secret ``k``."""

    party_ids: frozenset
    observed: Tuple[Mapping[int, np.ndarray], ...]

    def as_array(self) -> np.ndarray:
        """Shape ``(secrets, len(party_ids), N)``, parties in ascending order."""
        ids = sorted(self.party_ids)
        if not ids or not self.observed:
            return np.zeros((len(self.observed), 0, 0), dtype=np.int64)
        return np.array([[obs[t] for t in ids] for obs in self.observed], dtype=np.int64)

    def to_bundles(self, m: int, field: FieldSpec) -> Tuple[ShareBundle, ...]:
        return tuple(
            ShareBundle(tuple(obs.get(t) for t in range(m)), field) for obs in self.observed
        )


def coalition_view(bundles, party_ids: Iterable[int]) -> CoalitionView:
    """The shares held by ``party_ids`` across one bundle or a collection of them."""
    if isinstance(bundles, ShareBundle):
        bundles = [bundles]
    ids = frozenset(int(t) for t in party_ids)
    observed = []
    for b in bundles:
        bad = [t for t in ids if not 0 <= t < b.m]
        if bad:
            raise ValueError(f"parties {sorted(bad)} not in 0..{b.m - 1}")
        observed.append({t: b[t] for t in sorted(ids)})
    return CoalitionView(ids, tuple(observed))
