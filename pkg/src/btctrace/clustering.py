"""Multi-input address clustering with CoinJoin exclusion, plus dust flags."""
from __future__ import annotations

import csv
import hashlib
from collections import Counter
from dataclasses import dataclass

from .chainstore import ChainStore, Transaction

DUST_MIN_OUTPUTS = 100
COINJOIN_MIN_GROUP = 3


@dataclass(frozen=True)
class TxFlags:
    txid: str
    is_coinjoin: bool
    is_dust: bool


def _equal_output_counts(tx: Transaction) -> Counter:
    return Counter(s.value for s in tx.outputs if not s.is_data)


def detect_coinjoin(tx: Transaction) -> bool:
    """Equal-output-group heuristic.

    Fires when some value v is paid to n >= 3 address outputs, n does not
    exceed the number of inputs, and there are at least 2n - 1 outputs in total.
    """
    if tx.is_coinbase:
        return False
    n_in = len(tx.inputs)
    n_out = len(tx.outputs)
    for _, n in _equal_output_counts(tx).items():
        if n >= COINJOIN_MIN_GROUP and n <= n_in and n_out >= 2 * n - 1:
            return True
    return False


def detect_dust(tx: Transaction, threshold: int = DUST_MIN_OUTPUTS) -> bool:
    counts = _equal_output_counts(tx)
    return bool(counts) and max(counts.values()) >= threshold


def address_id(address: str) -> int:
    """Stable 63-bit id derived from an address string."""
    digest = hashlib.blake2b(address.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


class DisjointSet:
    def __init__(self):
        self.parent: dict[str, str] = {}
        self.size: dict[str, int] = {}

    def add(self, x: str) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1

    def find(self, x: str) -> str:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: str, b: str) -> str:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra


class ClusterMap:
    """Frozen partition of addresses into multi-input clusters."""

    def __init__(self, dsu: DisjointSet, flags: dict[str, TxFlags] | None = None):
        members: dict[str, list[str]] = {}
        for addr in dsu.parent:
            members.setdefault(dsu.find(addr), []).append(addr)
        self._cluster_of: dict[str, int] = {}
        self._members: dict[int, tuple[str, ...]] = {}
        for group in members.values():
            group.sort()
            cid = address_id(group[0])
            self._members[cid] = tuple(group)
            for addr in group:
                self._cluster_of[addr] = cid
        self.flags: dict[str, TxFlags] = dict(flags or {})

    def cluster_of(self, address: str) -> int:
        cid = self._cluster_of.get(address)
        return address_id(address) if cid is None else cid

    def members(self, cluster_id: int) -> tuple[str, ...]:
        return self._members.get(cluster_id, ())

    def members_of(self, address: str) -> tuple[str, ...]:
        """All addresses clustered with `address`, including itself."""
        group = self._members.get(self.cluster_of(address))
        return group if group else (address,)

    def size(self, cluster_id: int) -> int:
        return len(self._members.get(cluster_id, ())) or 1

    def clusters(self) -> list[tuple[str, ...]]:
        return sorted(self._members.values())

    def addresses(self) -> list[str]:
        return sorted(self._cluster_of)

    def is_filtered(self, txid: str) -> bool:
        f = self.flags.get(txid)
        return bool(f and (f.is_coinjoin or f.is_dust))

    def export_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["address", "cluster_id"])
            for addr in self.addresses():
                w.writerow([addr, self._cluster_of[addr]])


def compute_flags(store: ChainStore, dust_threshold: int = DUST_MIN_OUTPUTS) -> dict[str, TxFlags]:
    return {tx.txid: TxFlags(tx.txid, detect_coinjoin(tx), detect_dust(tx, dust_threshold))
            for tx in store}


def build_clusters(store: ChainStore, dust_threshold: int = DUST_MIN_OUTPUTS) -> ClusterMap:
    flags = compute_flags(store, dust_threshold)
    dsu = DisjointSet()
    for addr in store.addresses():
        dsu.add(addr)
    for tx in store:
        if tx.is_coinbase or flags[tx.txid].is_coinjoin:
            continue
        ins = tx.input_addresses()
        for other in ins[1:]:
            dsu.union(ins[0], other)
    return ClusterMap(dsu, flags)


def cluster_of(cmap: ClusterMap, address: str) -> int:
    return cmap.cluster_of(address)
