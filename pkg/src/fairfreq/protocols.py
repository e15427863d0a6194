"""In-process simulation of the decentralized sampling protocols.

Three protocols are simulated message by message:

* ``run_dpds``        users secret-share their (possibly zeroed) one-hot
                      vectors among all users; a server sums the aggregated
                      shares.
* ``run_tss``         two-stage sampling: users also pick a subset of items
                      to report; helper server ``S1`` tallies the subsets and
                      elects aggregators per item; ``S2`` reconstructs.
* ``run_tss_prime``   as ``run_tss`` but every item gets at least ``phi + 1``
                      elected aggregators.

Rounds are barrier-synchronized: a message sent in round ``r`` is visible to
its receiver only after :meth:`_Network.deliver` closes the round.  Payloads
are copied into tuples of Python ints, so parties never share state.

Randomness follows :mod:`fairfreq.streams`: participation coins and report
sets come from the coin stream (user order), share randomness from one
stream per user, the election from its own stream.  Feeding the coin stream
of the same master seed to :func:`fairfreq.mechanisms.dpcs` or
:func:`fairfreq.mechanisms.two_stage_sample` reproduces the protocol
estimate exactly.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field as dc_field
from types import MappingProxyType
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np

from . import streams
from .field import FieldSpec, smallest_prime_above
from .mechanisms import (
    FrequencyEstimate,
    MechanismParams,
    _require_one_hot,
    as_items,
    participation,
    sample_report_sets,
)
from .sharing import share

__all__ = [
    "SERVER",
    "S1",
    "S2",
    "UnsupportedCoalition",
    "Message",
    "Party",
    "Transcript",
    "ElectionResult",
    "AdversaryView",
    "run_dpds",
    "run_tss",
    "run_tss_prime",
    "adversary_view",
    "audit_complexity",
    "expected_complexity",
]

SERVER = "server"
S1 = "S1"
S2 = "S2"

PartyId = Union[int, str]


class UnsupportedCoalition(ValueError):
    """The coalition lies outside what the protocol protects against."""


class Message(NamedTuple):
    round: int
    sender: PartyId
    receiver: PartyId
    category: str
    payload: tuple

    def digest(self) -> str:
        return hashlib.sha256(repr(self.payload).encode()).hexdigest()[:16]


@dataclass
class Party:
    """A protocol participant: a user (int id) or a server (string id)."""

    id: PartyId
    inbox: List[Message] = dc_field(default_factory=list)
    counters: Counter = dc_field(default_factory=Counter)

    def received(self, category: str) -> List[Message]:
        return [m for m in self.inbox if m.category == category]


class _Network:
    def __init__(self, n_users: int, servers: Iterable[str]):
        self.parties: Dict[PartyId, Party] = {i: Party(i) for i in range(n_users)}
        for s in servers:
            self.parties[s] = Party(s)
        self.round = 1
        self._pending: List[Message] = []
        self.log: List[Tuple[Message, ...]] = []

    def __getitem__(self, pid) -> Party:
        return self.parties[pid]

    def send(self, sender, receiver, category, payload, *, q=0, N=0, n=0, b=0):
        msg = Message(self.round, sender, receiver, category, payload)
        self._pending.append(msg)
        sc = self.parties[sender].counters
        rc = self.parties[receiver].counters
        if q:
            sc["sent_q"] += q
            rc["recv_q"] += q
        if N:
            sc["sent_N"] += N
            rc["recv_N"] += N
        if n:
            sc["sent_n"] += n
            rc["recv_n"] += n
        if b:
            sc["sent_b"] += b
            rc["recv_b"] += b

    def send_each(self, sender, receivers, category, payloads, *, q=0):
        """One message per receiver, each carrying ``q`` field elements."""
        r = self.round
        before = len(self._pending)
        self._pending.extend(Message(r, sender, rc, category, pl) for rc, pl in zip(receivers, payloads))
        count = len(self._pending) - before
        if q:
            self.parties[sender].counters["sent_q"] += q * count
            for rc in receivers[:count]:
                self.parties[rc].counters["recv_q"] += q

    def deliver(self):
        for msg in self._pending:
            self.parties[msg.receiver].inbox.append(msg)
        self.log.append(tuple(self._pending))
        self._pending = []
        self.round += 1

    def frozen_counters(self):
        return MappingProxyType(
            {pid: MappingProxyType(dict(p.counters)) for pid, p in self.parties.items()}
        )


@dataclass(frozen=True)
class ElectionResult:
    """Per item: reporters ``m_j``, elected count ``m'_j`` and the elected user ids."""

    reporter_counts: Tuple[int, ...]
    elected_counts: Tuple[int, ...]
    elected: Tuple[Tuple[int, ...], ...]


@dataclass(frozen=True)
class Transcript:
    """Everything a protocol run produced.

    ``plaintext_counts`` is simulation-side ground truth (active holders
    of each item that reached the aggregate); no party observes it.
    """

    protocol: str
    n: int
    N: int
    q: int
    master_seed: int
    rounds: Tuple[Tuple[Message, ...], ...]
    estimate: FrequencyEstimate
    counters: Mapping[PartyId, Mapping[str, int]]
    plaintext_counts: Tuple[int, ...]
    election: Optional[ElectionResult] = None
    params: Optional[MechanismParams] = None

    @property
    def messages(self) -> Tuple[Message, ...]:
        return tuple(m for rnd in self.rounds for m in rnd)

    def to_lines(self) -> List[str]:
        """Line-delimited JSON log: round, sender, receiver, category, digest.

        Debugging aid only; the format may change.
        """
        return [
            json.dumps(
                {
                    "round": m.round,
                    "sender": m.sender,
                    "receiver": m.receiver,
                    "category": m.category,
                    "digest": m.digest(),
                },
                sort_keys=True,
            )
            for m in self.messages
        ]

    def write_log(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.to_lines():
                fh.write(line + "\n")

    def summary(self) -> dict:
        return {
            "protocol": self.protocol,
            "n": self.n,
            "N": self.N,
            "q": self.q,
            "rounds": len(self.rounds),
            "messages": sum(len(r) for r in self.rounds),
            "raw_counts": [int(c) for c in self.estimate.raw_counts],
            "estimate": [float(v) for v in self.estimate.normalized],
        }


class ProtocolRun(NamedTuple):
    estimate: FrequencyEstimate
    transcript: Transcript
    election: Optional[ElectionResult] = None


def _setup(records, field):
    items, N, rec_field = as_items(records)
    _require_one_hot(items)
    n = items.size
    if n < 2:
        raise ValueError("the protocols need at least two users")
    spec = field or rec_field or smallest_prime_above(n)
    if spec.q <= n:
        raise ValueError(f"field modulus {spec.q} must exceed the population {n}")
    return items, n, N, spec


def run_dpds(records, p: float, master_seed: int = streams.DEFAULT_SEED,
             field: Optional[FieldSpec] = None) -> ProtocolRun:
    """Distributed sampling via additive sharing among all ``n`` users."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    items, n, N, spec = _setup(records, field)
    net = _Network(n, [SERVER])

    active = participation(n, p, streams.coin_stream(master_seed))
    encoded = np.where(active, items, 0)

    # round 1: every user shares its response among all users
    for i in range(n):
        me = net[i]
        me.counters["BS"] += 1
        t_hat = np.zeros(N, dtype=np.int64)
        if encoded[i]:
            t_hat[encoded[i] - 1] = 1
        bundle = share(t_hat, n, spec, streams.user_stream(master_seed, i))
        me.counters["FS"] += (n - 1) * N
        me.counters["FA"] += (n - 1) * N
        rows = np.stack(bundle.shares).tolist()
        net.send_each(i, range(n), "share", map(tuple, rows), q=N)
    net.deliver()

    # round 2: each user sums what it received and forwards it
    for i in range(n):
        me = net[i]
        got = [m.payload for m in me.received("share")]
        agg = spec.sum(np.array(got, dtype=np.int64))
        me.counters["FA"] += (len(got) - 1) * N
        net.send(i, SERVER, "aggregate", tuple(agg.tolist()), q=N)
    net.deliver()

    server = net[SERVER]
    parts = [m.payload for m in server.received("aggregate")]
    tau = spec.sum(np.array(parts, dtype=np.int64))
    server.counters["FA"] += (len(parts) - 1) * N
    server.counters["RM"] += N
    est = FrequencyEstimate(tau, tau / (p * n), p * n)

    plain = np.bincount(encoded, minlength=N + 1)[1:]
    transcript = Transcript(
        protocol="dpds", n=n, N=N, q=spec.q, master_seed=int(master_seed),
        rounds=tuple(net.log), estimate=est, counters=net.frozen_counters(),
        plaintext_counts=tuple(int(c) for c in plain),
        params=MechanismParams(p=p),
    )
    return ProtocolRun(est, transcript)


def _run_two_stage(records, params: MechanismParams, master_seed, field, padded: bool) -> ProtocolRun:
    items, n, N, spec = _setup(records, field)
    k = params.report_size(N)
    if padded and params.phi + 1 > n:
        raise ValueError(f"phi + 1 = {params.phi + 1} exceeds the population {n}")
    net = _Network(n, [S1, S2])

    coins = streams.coin_stream(master_seed)
    active = participation(n, params.p, coins)
    encoded = np.where(active, items, 0)
    reports = sample_report_sets(encoded, N, k, params.chi, params.gamma, coins)

    # round 1: report indicators go to S1
    for i in range(n):
        net[i].counters["BS"] += 1
        net[i].counters["aS"] += 1
        net.send(i, S1, "indicator", tuple(int(x) for x in reports[i]), b=N)
    net.deliver()

    # round 2: S1 tallies, elects and publishes
    s1 = net[S1]
    indicators = np.array([m.payload for m in s1.received("indicator")], dtype=np.int64)
    m_counts = indicators.sum(axis=0)
    s1.counters["nA"] += (len(indicators) - 1) * N
    elect_rng = streams.stream(master_seed, streams.ELECTION)
    elected: List[Tuple[int, ...]] = []
    m_prime: List[int] = []
    for j in range(N):
        mj = int(m_counts[j])
        size = max(params.phi + 1, mj) if padded else mj
        chosen = tuple(int(u) for u in elect_rng.choice(n, size=size, replace=False)) if size else ()
        s1.counters["nS"] += size
        elected.append(chosen)
        m_prime.append(size)
        payload = (j + 1, mj) + chosen if padded else (j + 1,) + chosen
        n_elems = len(chosen) + (1 if padded else 0)
        for rcpt in list(range(n)) + [S2]:
            net.send(S1, rcpt, "election", payload, N=1, n=n_elems)
    net.deliver()

    # round 3: reporters share their entry for each reported item to its aggregators
    for i in range(n):
        me = net[i]
        published = {m.payload[0]: m.payload[(2 if padded else 1):] for m in me.received("election")}
        rng_i = streams.user_stream(master_seed, i)
        for j in np.flatnonzero(reports[i]):
            label = int(j) + 1
            aggregators = published[label]
            value = 1 if encoded[i] == label else 0
            bundle = share([value], len(aggregators), spec, rng_i) if len(aggregators) > 1 else None
            if bundle is None:
                pieces = [value]
            else:
                pieces = [int(s[0]) for s in bundle.shares]
                me.counters["FS"] += len(aggregators) - 1
                me.counters["FA"] += len(aggregators) - 1
            for t, agg_user in enumerate(aggregators):
                net.send(i, agg_user, "item_share", (label, pieces[t]), N=1, q=1)
    net.deliver()

    # round 4: elected users aggregate per item and forward to S2
    duties: Dict[int, List[int]] = defaultdict(list)
    for j, chosen in enumerate(elected):
        for u in chosen:
            duties[u].append(j + 1)
    for i in range(n):
        me = net[i]
        per_item: Dict[int, List[int]] = defaultdict(list)
        for m in me.received("item_share"):
            per_item[m.payload[0]].append(m.payload[1])
        for label in duties.get(i, ()):
            got = per_item.get(label, [])
            me.counters["FA"] += max(len(got) - 1, 0)
            net.send(i, S2, "item_aggregate", (label, int(sum(got) % spec.q)), N=1, q=1)
    net.deliver()

    s2 = net[S2]
    sums: Dict[int, List[int]] = defaultdict(list)
    for m in s2.received("item_aggregate"):
        sums[m.payload[0]].append(m.payload[1])
    raw = np.zeros(N, dtype=np.int64)
    for label, vals in sums.items():
        raw[label - 1] = sum(vals) % spec.q
        s2.counters["FA"] += len(vals) - 1
    s2.counters["RM"] += N
    scale = params.q_chi * n
    est = FrequencyEstimate(raw, raw / scale, scale)

    hit = encoded > 0
    reported_true = reports[np.flatnonzero(hit), encoded[hit] - 1]
    plain = np.bincount(encoded[hit][reported_true], minlength=N + 1)[1:]
    election = ElectionResult(tuple(int(c) for c in m_counts), tuple(m_prime), tuple(elected))
    transcript = Transcript(
        protocol="tss_prime" if padded else "tss", n=n, N=N, q=spec.q,
        master_seed=int(master_seed), rounds=tuple(net.log), estimate=est,
        counters=net.frozen_counters(), plaintext_counts=tuple(int(c) for c in plain),
        election=election, params=params,
    )
    return ProtocolRun(est, transcript, election)


def run_tss(records, params: MechanismParams, master_seed: int = streams.DEFAULT_SEED,
            field: Optional[FieldSpec] = None) -> ProtocolRun:
    """Two-stage sampling with helper servers S1 (election) and S2 (aggregation).

    Items nobody reports get no aggregators and an estimate of zero.
    """
    return _run_two_stage(records, params, master_seed, field, padded=False)


def run_tss_prime(records, params: MechanismParams, master_seed: int = streams.DEFAULT_SEED,
                  field: Optional[FieldSpec] = None) -> ProtocolRun:
    """Two-stage sampling with at least ``params.phi + 1`` aggregators per item."""
    return _run_two_stage(records, params, master_seed, field, padded=True)


# ---------------------------------------------------------------------------
# adversarial views


@dataclass(frozen=True)
class AdversaryView:
    """Messages a coalition sent or received, in transcript order."""

    parties: frozenset
    messages: Tuple[Message, ...]

    def received(self, category: Optional[str] = None, sender=None) -> Tuple[Message, ...]:
        return tuple(
            m for m in self.messages
            if m.receiver in self.parties and m.sender not in self.parties
            and (category is None or m.category == category)
            and (sender is None or m.sender == sender)
        )


def _validate_coalition(transcript: Transcript, parties: frozenset):
    servers = {p for p in parties if isinstance(p, str)}
    users = {p for p in parties if not isinstance(p, str)}
    if any(not 0 <= u < transcript.n for u in users):
        raise ValueError("coalition names users outside the population")
    proto = transcript.protocol
    if proto == "dpds":
        if servers - {SERVER}:
            raise ValueError(f"unknown parties {sorted(servers - {SERVER})}")
        if servers and users:
            raise UnsupportedCoalition("server colluding with users is outside the model")
        if len(users) > transcript.n - 1:
            raise UnsupportedCoalition("at most n - 1 users may collude")
        return
    if servers - {S1, S2}:
        raise ValueError(f"unknown parties {sorted(servers - {S1, S2})}")
    if len(servers) > 1:
        raise UnsupportedCoalition("S1 and S2 must not collude")
    if servers and users:
        raise UnsupportedCoalition("a server colluding with users is outside the model")
    if users:
        if proto != "tss_prime":
            raise UnsupportedCoalition("plain two-stage sampling gives no guarantee against users")
        if len(users) > transcript.params.phi:
            raise UnsupportedCoalition(f"at most phi = {transcript.params.phi} users may collude")


def adversary_view(transcript: Transcript, coalition: Iterable[PartyId]) -> AdversaryView:
    """Restrict a transcript to what an honest-but-curious coalition observes."""
    parties = frozenset(coalition)
    _validate_coalition(transcript, parties)
    msgs = tuple(m for m in transcript.messages if m.sender in parties or m.receiver in parties)
    return AdversaryView(parties, msgs)


# ---------------------------------------------------------------------------
# complexity accounting

_USER = "user"


def _user_mean(transcript: Transcript, key: str) -> float:
    return sum(transcript.counters[i].get(key, 0) for i in range(transcript.n)) / transcript.n


def audit_complexity(transcript: Transcript) -> Dict[str, Dict[str, float]]:
    """Observed operation counts grouped like the protocols' cost table.

    Server rows are exact totals; the user row is the mean over users.
    Communication categories: ``qd`` field elements, ``Nd`` item labels,
    ``nd`` user ids, ``bd`` bits.  For the all-user protocol ``qd`` counts
    field elements sent and received; elsewhere only elements sent.
    """
    c = transcript.counters
    if transcript.protocol == "dpds":
        server = c[SERVER]
        return {
            SERVER: {"FA": server.get("FA", 0), "RM": server.get("RM", 0), "comm": server.get("sent_q", 0)},
            _USER: {
                "FA": _user_mean(transcript, "FA"),
                "BS": _user_mean(transcript, "BS"),
                "FS": _user_mean(transcript, "FS"),
                "qd": _user_mean(transcript, "sent_q") + _user_mean(transcript, "recv_q"),
            },
        }
    s1, s2 = c[S1], c[S2]
    return {
        S1: {"nA": s1.get("nA", 0), "nS": s1.get("nS", 0), "nd": s1.get("sent_n", 0), "Nd": s1.get("sent_N", 0)},
        S2: {"FA": s2.get("FA", 0), "RM": s2.get("RM", 0), "comm": s2.get("sent_q", 0) + s2.get("sent_N", 0)},
        _USER: {
            "FA": _user_mean(transcript, "FA"),
            "BS": _user_mean(transcript, "BS"),
            "aS": _user_mean(transcript, "aS"),
            "FS": _user_mean(transcript, "FS"),
            "bd": _user_mean(transcript, "sent_b"),
            "Nd": _user_mean(transcript, "sent_N"),
            "qd": _user_mean(transcript, "sent_q"),
        },
    }


def expected_complexity(protocol: str, n: int, N: int, alpha: float = 1.0,
                        p_chi: Optional[float] = None) -> Dict[str, Dict[str, float]]:
    """Closed-form costs; user rows of the two-stage protocol are expectations."""
    if protocol == "dpds":
        return {
            SERVER: {"FA": (n - 1) * N, "RM": N, "comm": 0},
            _USER: {"FA": 2 * (n - 1) * N, "BS": 1, "FS": (n - 1) * N, "qd": 2 * n * N + N},
        }
    if protocol == "tss":
        if p_chi is None:
            raise ValueError("p_chi is required for the two-stage protocol")
        a = alpha
        return {
            S1: {"nA": (n - 1) * N, "nS": a * n * N, "nd": a * n * N * (n + 1), "Nd": (n + 1) * N},
            S2: {"FA": (a * n - 1) * N, "RM": N, "comm": 0},
            _USER: {
                "FA": (p_chi * n - 1) * (p_chi + a) * N,
                "BS": 1,
                "aS": 1,
                "FS": (p_chi * n - 1) * a * N,
                "bd": N,
                "Nd": a * N * (1 + p_chi * n),
                "qd": a * N * (1 + p_chi * n),
            },
        }
    raise ValueError(f"no closed form for protocol {protocol!r}")
