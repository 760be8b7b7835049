"""Structured P2P overlay: 128-bit id space, prefix routing, churn repair.

Ids live on a circular space [0, 2^128). Each node keeps a 32x16 routing
table (row = shared hex-prefix length, column = next digit) and a leaf set
of the 12 numerically closest ids per side (with wraparound). Lookups are
greedy: leaf-set window first, then the exact routing-table cell, then any
known peer that keeps the shared prefix and strictly shrinks the numeric
distance.
"""

from __future__ import annotations

import hashlib
import json
import random
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from typing import Iterator, Optional

ID_BITS = 128
ID_SPACE = 1 << ID_BITS
DIGIT_BITS = 4
N_DIGITS = ID_BITS // DIGIT_BITS  # 32
RADIX = 1 << DIGIT_BITS  # 16
LEAF_SIDE = 12  # 24-entry leaf set, 12 per side

MAX_ROUTE_HOPS = 64


class RoutingLoopError(RuntimeError):
    """Raised when a route exceeds the hop guard; indicates corrupted state."""


def id_from_name(name: str) -> int:
    """Deterministic 128-bit digest of a textual name (blake2b-128)."""
    if not name:
        raise ValueError("name must be non-empty")
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "big")


def hex_id(value: int) -> str:
    """Canonical text form: 32 lowercase hex digits."""
    return format(value, "032x")


def parse_id(text: str) -> int:
    if len(text) != N_DIGITS:
        raise ValueError("id text must be exactly 32 hex digits")
    return int(text, 16)


def circular_distance(a: int, b: int) -> int:
    d = (a - b) % ID_SPACE
    return min(d, ID_SPACE - d)


def shared_prefix_len(a: int, b: int) -> int:
    """Number of leading base-16 digits equal in a and b (32 iff a == b)."""
    if a == b:
        return N_DIGITS
    # Position of the highest differing bit decides the first differing digit.
    diff_bits = (a ^ b).bit_length()
    return (ID_BITS - diff_bits) // DIGIT_BITS


def digit_at(value: int, pos: int) -> int:
    """Hex digit of `value` at position `pos` (0 = most significant)."""
    shift = DIGIT_BITS * (N_DIGITS - 1 - pos)
    return (value >> shift) & (RADIX - 1)


def random_ids(n: int, seed: int) -> list[int]:
    """n distinct uniform ids from a seeded generator (stable across runs)."""
    rng = random.Random(seed)
    ids: set[int] = set()
    while len(ids) < n:
        ids.add(rng.getrandbits(ID_BITS))
    return sorted(ids)


@dataclass
class PeerRecord:
    id: int
    addr: str
    last_seen: float = 0.0


class RoutingTable:
    """32 rows x 16 columns of optional peer records.

    A record in row r, column c shares exactly r leading digits with the
    owner and has digit c at position r; the owner's own digit column in
    each row stays empty.
    """

    def __init__(self, owner: int):
        self.owner = owner
        self.rows: list[list[Optional[PeerRecord]]] = [
            [None] * RADIX for _ in range(N_DIGITS)
        ]

    def get(self, row: int, col: int) -> Optional[PeerRecord]:
        return self.rows[row][col]

    def remove(self, peer: int) -> None:
        row = shared_prefix_len(self.owner, peer)
        if row >= N_DIGITS:
            return
        col = digit_at(peer, row)
        cell = self.rows[row][col]
        if cell is not None and cell.id == peer:
            self.rows[row][col] = None

    def consider(self, peer: int, addr: str = "", now: float = 0.0) -> bool:
        """Place a peer in its (row, col) cell if that cell is empty."""
        if peer == self.owner:
            return False
        row = shared_prefix_len(self.owner, peer)
        col = digit_at(peer, row)
        if self.rows[row][col] is None:
            self.rows[row][col] = PeerRecord(peer, addr or f"node:{hex_id(peer)}", now)
            return True
        return False

    def entries(self) -> Iterator[PeerRecord]:
        for row in self.rows:
            for cell in row:
                if cell is not None:
                    yield cell


class LeafSet:
    """The up-to-12 numerically closest live ids per side, wrapping at 0.

    Offers are cheap: anything can be proposed via add(); the set trims
    itself back to the true 12-nearest per side among everything offered.
    """

    def __init__(self, owner: int, per_side: int = LEAF_SIDE):
        self.owner = owner
        self.per_side = per_side
        self._members: list[int] = []  # sorted by id

    def __contains__(self, nid: int) -> bool:
        i = bisect_left(self._members, nid)
        return i < len(self._members) and self._members[i] == nid

    def __len__(self) -> int:
        return len(self._members)

    def members(self) -> list[int]:
        return list(self._members)

    def add(self, nid: int) -> None:
        if nid == self.owner or nid in self:
            return
        insort(self._members, nid)
        self._trim()

    def add_many(self, ids) -> None:
        for nid in ids:
            if nid != self.owner and nid not in self:
                insort(self._members, nid)
        self._trim()

    def remove(self, nid: int) -> None:
        i = bisect_left(self._members, nid)
        if i < len(self._members) and self._members[i] == nid:
            self._members.pop(i)

    def _offset_up(self, nid: int) -> int:
        return (nid - self.owner) % ID_SPACE

    def _offset_down(self, nid: int) -> int:
        return (self.owner - nid) % ID_SPACE

    def _trim(self) -> None:
        if len(self._members) <= 2 * self.per_side:
            return
        up = sorted(self._members, key=self._offset_up)[: self.per_side]
        down = sorted(self._members, key=self._offset_down)[: self.per_side]
        keep = set(up) | set(down)
        self._members = sorted(keep)

    def larger_side(self) -> list[int]:
        return sorted(self._members, key=self._offset_up)[: self.per_side]

    def smaller_side(self) -> list[int]:
        return sorted(self._members, key=self._offset_down)[: self.per_side]

    def covers(self, key: int) -> bool:
        """True iff key falls inside the circular window spanned by the set."""
        if not self._members:
            return True  # alone: everything is local
        up_span = max(self._offset_up(m) for m in self.larger_side())
        down_span = max(self._offset_down(m) for m in self.smaller_side())
        return self._offset_up(key) <= up_span or self._offset_down(key) <= down_span


@dataclass
class Node:
    id: int
    routing_table: RoutingTable
    leaf_set: LeafSet
    alive: bool = True
    memberships: dict = field(default_factory=dict)  # group id -> TreeMembership

    @property
    def addr(self) -> str:
        return f"node:{hex_id(self.id)}"


@dataclass
class RouteResult:
    source: int
    key: int
    hops: list[int]
    destination: int

    @property
    def hop_count(self) -> int:
        return len(self.hops)


def write_hop_traces(results, path: str) -> None:
    """Line-delimited hop records: {source, key, hops, destination}."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "source": hex_id(r.source),
                "key": hex_id(r.key),
                "hops": [hex_id(h) for h in r.hops],
                "destination": hex_id(r.destination),
            }) + "\n")


class Overlay:
    """All nodes of one simulated overlay, plus join/fail/repair machinery.

    Routing only ever reads the local state of the node doing the hop; the
    global node map exists so the simulator can dispatch messages and so
    build() can construct converged state directly.
    """

    def __init__(self, leaf_side: int = LEAF_SIDE):
        self.nodes: dict[int, Node] = {}
        self.leaf_side = leaf_side

    # -- basic accessors ---------------------------------------------------

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, nid: int) -> bool:
        return nid in self.nodes

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def is_alive(self, nid: int) -> bool:
        n = self.nodes.get(nid)
        return n is not None and n.alive

    def live_ids(self) -> list[int]:
        return sorted(nid for nid, n in self.nodes.items() if n.alive)

    # -- construction ------------------------------------------------------

    def _new_node(self, nid: int) -> Node:
        return Node(nid, RoutingTable(nid), LeafSet(nid, self.leaf_side))

    @classmethod
    def build(cls, ids: list[int], leaf_side: int = LEAF_SIDE) -> "Overlay":
        """Construct a converged overlay: exact leaf sets, full routing tables.

        Every cell that any live node could fill is filled, with the
        candidate closest to the owner (ties to the smaller id). This is
        the canonical seeded overlay used by experiments; incremental
        join() below builds the same structures protocol-style.
        """
        ov = cls(leaf_side)
        ordered = sorted(ids)
        if len(set(ordered)) != len(ordered):
            raise ValueError("duplicate node ids")
        for nid in ordered:
            ov.nodes[nid] = ov._new_node(nid)
        n = len(ordered)
        if n <= 1:
            return ov

        # Exact leaf sets from ring adjacency.
        for i, nid in enumerate(ordered):
            node = ov.nodes[nid]
            if n - 1 <= 2 * leaf_side:
                node.leaf_set.add_many(x for x in ordered if x != nid)
            else:
                neigh = [ordered[(i + k) % n] for k in range(1, leaf_side + 1)]
                neigh += [ordered[(i - k) % n] for k in range(1, leaf_side + 1)]
                node.leaf_set.add_many(neigh)

        # Prefix buckets deep enough to cover the longest shared prefix.
        max_shared = max(
            shared_prefix_len(ordered[i], ordered[(i + 1) % n]) for i in range(n)
        )
        buckets: dict[str, list[int]] = {}
        for nid in ordered:
            h = hex_id(nid)
            for depth in range(1, max_shared + 2):
                buckets.setdefault(h[:depth], []).append(nid)

        hexdigits = "0123456789abcdef"
        for nid in ordered:
            node = ov.nodes[nid]
            h = hex_id(nid)
            for row in range(max_shared + 1):
                own_digit = h[row]
                for col in range(RADIX):
                    cd = hexdigits[col]
                    if cd == own_digit:
                        continue
                    bucket = buckets.get(h[:row] + cd)
                    if not bucket:
                        continue
                    best = _closest_in_sorted(bucket, nid)
                    node.routing_table.rows[row][col] = PeerRecord(
                        best, f"node:{hex_id(best)}"
                    )
        return ov

    @classmethod
    def build_random(cls, n: int, seed: int, leaf_side: int = LEAF_SIDE) -> "Overlay":
        return cls.build(random_ids(n, seed), leaf_side)

    # -- membership changes ------------------------------------------------

    def join(self, new_id: int, bootstrap: Optional[int] = None) -> Node:
        """Protocol-level join: route toward the new id, copy state, announce.

        The new node's leaf set comes from the delivery node (its ring
        neighbor), which provably contains the joiner's true neighborhood;
        routing rows are copied from the nodes on the join path.
        """
        if new_id in self.nodes:
            raise ValueError("node id already present")
        node = self._new_node(new_id)
        if not self.nodes:
            self.nodes[new_id] = node
            return node

        if bootstrap is None:
            bootstrap = self.live_ids()[0]
        res = self.route(bootstrap, new_id)
        path = [res.source] + res.hops
        target = self.nodes[res.destination]

        node.leaf_set.add_many(target.leaf_set.members())
        node.leaf_set.add(target.id)

        # Classic bootstrap: row i from the i-th node on the path, then the
        # delivery node's full state. consider() recomputes true placement.
        for i, pid in enumerate(path):
            peer = self.nodes[pid]
            node.routing_table.consider(pid)
            row = min(i, N_DIGITS - 1)
            for cell in peer.routing_table.rows[row]:
                if cell is not None:
                    node.routing_table.consider(cell.id)
        for cell in target.routing_table.entries():
            node.routing_table.consider(cell.id)
        for m in target.leaf_set.members():
            node.routing_table.consider(m)

        self.nodes[new_id] = node

        # Announce: neighbors fold the joiner into their own state.
        for m in node.leaf_set.members():
            peer = self.nodes[m]
            peer.leaf_set.add(new_id)
            peer.routing_table.consider(new_id)
        for pid in path:
            peer = self.nodes[pid]
            peer.leaf_set.add(new_id)
            peer.routing_table.consider(new_id)
        return node

    def fail(self, nid: int) -> None:
        node = self.nodes.get(nid)
        if node is None or not node.alive:
            raise ValueError("cannot fail a node that is not alive")
        node.alive = False

    def rejoin(self, nid: int) -> None:
        """Bring a failed node back with fresh state."""
        node = self.nodes.get(nid)
        if node is None or node.alive:
            raise ValueError("cannot rejoin a node that is not dead")
        del self.nodes[nid]
        self.join(nid)

    def repair(self) -> int:
        """Eagerly rebuild leaf sets around dead nodes, to fixpoint.

        Each sweep lets every live node replace dead leaf entries with live
        candidates learned from its live leaf neighbors; sweeps repeat until
        nothing changes. Routing tables are repaired lazily on use.
        """
        sweeps = 0
        changed = True
        while changed:
            changed = False
            sweeps += 1
            for nid in sorted(self.nodes):
                node = self.nodes[nid]
                if not node.alive:
                    continue
                members = node.leaf_set.members()
                if all(self.is_alive(m) for m in members):
                    continue
                pool: set[int] = set(m for m in members if self.is_alive(m))
                for m in list(pool):
                    for mm in self.nodes[m].leaf_set.members():
                        if self.is_alive(mm):
                            pool.add(mm)
                if not pool:  # no live leaf neighbor at all: fall back to table
                    pool = {
                        e.id for e in node.routing_table.entries()
                        if self.is_alive(e.id)
                    }
                before = set(members)
                node.leaf_set._members = []
                node.leaf_set.add_many(sorted(pool))
                if set(node.leaf_set.members()) != before:
                    changed = True
        return sweeps

    # -- routing -----------------------------------------------------------

    def next_hop(self, local_id: int, key: int) -> Optional[int]:
        """One greedy routing decision; None means deliver locally.

        Order: leaf-set window, exact routing-table cell, then any known
        peer with a shared prefix at least as long that is strictly closer
        to the key. Dead table entries are dropped and patched on the way.
        """
        node = self.nodes[local_id]
        if not node.alive:
            raise ValueError("routing at a dead node")
        if key == local_id:
            return None

        if node.leaf_set.covers(key):
            best = min(
                [local_id] + [m for m in node.leaf_set.members() if self.is_alive(m)],
                key=lambda m: (circular_distance(m, key), m),
            )
            return None if best == local_id else best

        row = shared_prefix_len(local_id, key)
        col = digit_at(key, row)
        cell = node.routing_table.get(row, col)
        if cell is not None:
            if self.is_alive(cell.id):
                return cell.id
            node.routing_table.remove(cell.id)
            repl = self._find_replacement(node, row, col)
            if repl is not None:
                node.routing_table.consider(repl)
                return repl

        best = None
        best_rank = None
        own_dist = circular_distance(local_id, key)
        for peer in self._known_peers(node):
            if not self.is_alive(peer):
                continue
            p = shared_prefix_len(peer, key)
            if p < row:
                continue
            d = circular_distance(peer, key)
            if d >= own_dist:
                continue
            rank = (-p, d, peer)
            if best_rank is None or rank < best_rank:
                best_rank = rank
                best = peer
        return best

    def _known_peers(self, node: Node) -> Iterator[int]:
        for m in node.leaf_set.members():
            yield m
        for e in node.routing_table.entries():
            yield e.id

    def _find_replacement(self, node: Node, row: int, col: int) -> Optional[int]:
        """A live known peer satisfying a vacated cell's prefix constraint."""
        for peer in sorted(set(self._known_peers(node))):
            if not self.is_alive(peer):
                continue
            if shared_prefix_len(node.id, peer) == row and digit_at(peer, row) == col:
                return peer
        return None

    def route(self, source: int, key: int) -> RouteResult:
        """Apply next_hop until delivery, recording every hop."""
        if not self.is_alive(source):
            raise ValueError("route source must be alive")
        cur = source
        hops: list[int] = []
        while True:
            nxt = self.next_hop(cur, key)
            if nxt is None:
                return RouteResult(source, key, hops, cur)
            hops.append(nxt)
            cur = nxt
            if len(hops) > MAX_ROUTE_HOPS:
                raise RoutingLoopError(
                    f"no delivery after {MAX_ROUTE_HOPS} hops for key {hex_id(key)}"
                )


def _closest_in_sorted(sorted_ids: list[int], target: int) -> int:
    """Member of a sorted id list minimizing circular distance to target.

    The circular minimum is always at one of the two ring neighbors of the
    target's insertion point. Ties go to the smaller id.
    """
    n = len(sorted_ids)
    i = bisect_left(sorted_ids, target)
    a = sorted_ids[(i - 1) % n]
    b = sorted_ids[i % n]
    return min((a, b), key=lambda m: (circular_distance(m, target), m))
