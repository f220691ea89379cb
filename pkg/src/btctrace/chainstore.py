"""Immutable, indexed store of transactions loaded from a JSON Lines file.

Each line of the interchange file is one transaction::

    {"txid": <64 hex>, "height": int, "time": int, "coinbase": bool,
     "in": [{"addr": str, "value": int}, ...],
     "out": [{"addr": str, "value": int} | {"data": hex, "value": int}, ...],
     "addr_types": {addr: type}, "equiv": {addr: int},      # optional
     "size": int, "weight": int}                            # optional

Input slots may also carry ``"prev": txid`` naming the funding transaction.
All values are integer satoshis.
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

SATOSHIS_PER_BTC = 100_000_000

ADDRESS_TYPES = ("pubkeyhash", "scripthash", "multisig", "segwit", "other")

_TXID_RE = re.compile(r"^[0-9a-f]{64}$")
_HEX_RE = re.compile(r"^[0-9a-f]*$")


class ChainError(Exception):
    pass


class MalformedLine(ChainError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateTxid(ChainError):
    def __init__(self, txid: str, line_no: int | None = None):
        where = f" (line {line_no})" if line_no is not None else ""
        super().__init__(f"duplicate txid {txid}{where}")
        self.txid = txid
        self.line_no = line_no


class NonMonotonicTimestamp(ChainError):
    def __init__(self, txid: str):
        super().__init__(f"timestamp of {txid} decreases with block height")
        self.txid = txid


class NegativeFee(ChainError):
    def __init__(self, txid: str):
        super().__init__(f"outputs exceed inputs in {txid}")
        self.txid = txid


@dataclass(frozen=True)
class TxSlot:
    address: str | None
    value: int
    slot_index: int
    data: str | None = None
    prev: str | None = None

    @property
    def is_data(self) -> bool:
        return self.address is None


@dataclass(frozen=True)
class Transaction:
    txid: str
    block_height: int
    timestamp: int
    is_coinbase: bool
    inputs: tuple[TxSlot, ...]
    outputs: tuple[TxSlot, ...]
    size: int | None = None
    weight: int | None = None

    @property
    def in_value(self) -> int:
        return sum(s.value for s in self.inputs)

    @property
    def out_value(self) -> int:
        return sum(s.value for s in self.outputs)

    @property
    def fee(self) -> int:
        return tx_fee(self)

    @property
    def n_slots(self) -> int:
        return len(self.inputs) + len(self.outputs)

    def input_addresses(self) -> list[str]:
        """Distinct input addresses in slot order."""
        return list(dict.fromkeys(s.address for s in self.inputs if s.address is not None))

    def output_addresses(self) -> list[str]:
        """Distinct output addresses in slot order."""
        return list(dict.fromkeys(s.address for s in self.outputs if s.address is not None))


@dataclass(frozen=True)
class AddressRecord:
    address: str
    deposit_txids: tuple[str, ...] = ()
    withdrawal_txids: tuple[str, ...] = ()
    addr_type: str = "other"
    equiv_count: int = 0


@dataclass(frozen=True)
class IngestOptions:
    strict_timestamps: bool = False


def tx_fee(tx: Transaction) -> int:
    """Fee in satoshis; 0 for coinbase transactions."""
    if tx.is_coinbase:
        return 0
    fee = tx.in_value - tx.out_value
    if fee < 0:
        raise NegativeFee(tx.txid)
    return fee


def infer_address_type(address: str) -> str:
    # Only a fallback for files without explicit addr_types.
    if address.startswith(("bc1", "tb1")):
        return "segwit"
    if address.startswith("1"):
        return "pubkeyhash"
    if address.startswith("3"):
        return "scripthash"
    return "other"


class ChainStore:
    """Read-only view over an ingested chain.

    Transactions keep file order; per-address lists are ordered by
    (block height, position in file).
    """

    def __init__(self, transactions: Iterable[Transaction],
                 addr_types: dict[str, str] | None = None,
                 equiv: dict[str, int] | None = None):
        self._txs: dict[str, Transaction] = {}
        self._pos: dict[str, int] = {}
        for i, tx in enumerate(transactions):
            if tx.txid in self._txs:
                raise DuplicateTxid(tx.txid)
            self._txs[tx.txid] = tx
            self._pos[tx.txid] = i
        self._declared_types = dict(addr_types or {})
        self._equiv = dict(equiv or {})

        deposits: dict[str, list[str]] = {}
        withdrawals: dict[str, list[str]] = {}
        for tx in sorted(self._txs.values(), key=self.chrono_key):
            for addr in tx.input_addresses():
                withdrawals.setdefault(addr, []).append(tx.txid)
            for addr in tx.output_addresses():
                deposits.setdefault(addr, []).append(tx.txid)
        self._deposits = {a: tuple(v) for a, v in deposits.items()}
        self._withdrawals = {a: tuple(v) for a, v in withdrawals.items()}
        self._addresses = sorted(set(deposits) | set(withdrawals))

    def chrono_key(self, tx: Transaction) -> tuple[int, int]:
        return (tx.block_height, self._pos[tx.txid])

    def __len__(self) -> int:
        return len(self._txs)

    def __iter__(self) -> Iterator[Transaction]:
        return iter(self._txs.values())

    def __contains__(self, txid: object) -> bool:
        return txid in self._txs

    def tx(self, txid: str) -> Transaction:
        return self._txs[txid]

    def transactions(self) -> list[Transaction]:
        return list(self._txs.values())

    def addresses(self) -> list[str]:
        return list(self._addresses)

    def has_address(self, address: str) -> bool:
        return address in self._deposits or address in self._withdrawals

    def deposit_txids(self, address: str) -> tuple[str, ...]:
        return self._deposits.get(address, ())

    def withdrawal_txids(self, address: str) -> tuple[str, ...]:
        return self._withdrawals.get(address, ())

    def address_txs(self, address: str) -> list[Transaction]:
        """Every transaction touching the address, chronologically, no repeats."""
        txids = set(self.deposit_txids(address)) | set(self.withdrawal_txids(address))
        return sorted((self._txs[t] for t in txids), key=self.chrono_key)

    def record(self, address: str) -> AddressRecord:
        return AddressRecord(
            address=address,
            deposit_txids=self.deposit_txids(address),
            withdrawal_txids=self.withdrawal_txids(address),
            addr_type=self._declared_types.get(address) or infer_address_type(address),
            equiv_count=self._equiv.get(address, 0),
        )

    # -- canonical serialization -------------------------------------------------

    def export_lines(self) -> Iterator[str]:
        """Interchange lines reproducing this store (file order kept)."""
        emitted_types: set[str] = set()
        for tx in self._txs.values():
            obj = _tx_to_obj(tx)
            types = {}
            equiv = {}
            for addr in tx.input_addresses() + tx.output_addresses():
                if addr in emitted_types:
                    continue
                emitted_types.add(addr)
                if addr in self._declared_types:
                    types[addr] = self._declared_types[addr]
                if addr in self._equiv:
                    equiv[addr] = self._equiv[addr]
            if types:
                obj["addr_types"] = types
            if equiv:
                obj["equiv"] = equiv
            yield json.dumps(obj, sort_keys=True, separators=(",", ":"))

    def export(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for line in self.export_lines():
                fh.write(line + "\n")

    def canonical_index(self) -> str:
        """Serialized form of all indexes; equal stores give equal strings."""
        payload = {
            "txs": [_tx_to_obj(tx) for tx in self._txs.values()],
            "addresses": {
                a: {
                    "d": list(self.deposit_txids(a)),
                    "w": list(self.withdrawal_txids(a)),
                    "type": self.record(a).addr_type,
                    "equiv": self.record(a).equiv_count,
                }
                for a in self._addresses
            },
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def get_address_context(store: ChainStore, address: str
                        ) -> tuple[list[Transaction], list[Transaction], AddressRecord]:
    """Deposits, withdrawals (both chronological) and the address record.

    Unknown addresses yield empty lists and a zero-activity record.
    """
    deposits = [store.tx(t) for t in store.deposit_txids(address)]
    withdrawals = [store.tx(t) for t in store.withdrawal_txids(address)]
    return deposits, withdrawals, store.record(address)


def _tx_to_obj(tx: Transaction) -> dict:
    ins = []
    for s in tx.inputs:
        slot = {"addr": s.address, "value": s.value}
        if s.prev is not None:
            slot["prev"] = s.prev
        ins.append(slot)
    outs = []
    for s in tx.outputs:
        if s.is_data:
            outs.append({"data": s.data, "value": s.value})
        else:
            outs.append({"addr": s.address, "value": s.value})
    obj = {"txid": tx.txid, "height": tx.block_height, "time": tx.timestamp,
           "coinbase": tx.is_coinbase, "in": ins, "out": outs}
    if tx.size is not None:
        obj["size"] = tx.size
    if tx.weight is not None:
        obj["weight"] = tx.weight
    return obj


def _nonneg_int(value, what: str, line_no: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise MalformedLine(line_no, f"{what} must be a non-negative integer")
    return value


def parse_tx(obj: dict, line_no: int = 0) -> tuple[Transaction, dict[str, str], dict[str, int]]:
    if not isinstance(obj, dict):
        raise MalformedLine(line_no, "not a JSON object")
    for key in ("txid", "height", "time", "coinbase", "in", "out"):
        if key not in obj:
            raise MalformedLine(line_no, f"missing key {key!r}")
    txid = obj["txid"]
    if not isinstance(txid, str) or not _TXID_RE.match(txid):
        raise MalformedLine(line_no, "txid must be 64 lowercase hex characters")
    height = _nonneg_int(obj["height"], "height", line_no)
    ts = _nonneg_int(obj["time"], "time", line_no)
    coinbase = obj["coinbase"]
    if not isinstance(coinbase, bool):
        raise MalformedLine(line_no, "coinbase must be a boolean")
    if not isinstance(obj["in"], list) or not isinstance(obj["out"], list):
        raise MalformedLine(line_no, "in/out must be lists")

    inputs = []
    for i, s in enumerate(obj["in"]):
        if not isinstance(s, dict) or not isinstance(s.get("addr"), str) or not s["addr"]:
            raise MalformedLine(line_no, f"input {i} needs a non-empty 'addr'")
        prev = s.get("prev")
        if prev is not None and (not isinstance(prev, str) or not _TXID_RE.match(prev)):
            raise MalformedLine(line_no, f"input {i} has a malformed 'prev'")
        inputs.append(TxSlot(s["addr"], _nonneg_int(s.get("value"), f"input {i} value", line_no),
                             i, prev=prev))
    outputs = []
    for i, s in enumerate(obj["out"]):
        if not isinstance(s, dict):
            raise MalformedLine(line_no, f"output {i} is not an object")
        value = _nonneg_int(s.get("value"), f"output {i} value", line_no)
        has_addr, has_data = "addr" in s, "data" in s
        if has_addr == has_data:
            raise MalformedLine(line_no, f"output {i} needs exactly one of 'addr'/'data'")
        if has_addr:
            if not isinstance(s["addr"], str) or not s["addr"]:
                raise MalformedLine(line_no, f"output {i} has an empty address")
            outputs.append(TxSlot(s["addr"], value, i))
        else:
            data = s["data"]
            if not isinstance(data, str) or not _HEX_RE.match(data):
                raise MalformedLine(line_no, f"output {i} data must be lowercase hex")
            outputs.append(TxSlot(None, value, i, data=data))

    if coinbase != (len(inputs) == 0):
        raise MalformedLine(line_no, "coinbase flag must match an empty input list")
    if not coinbase and sum(s.value for s in inputs) < sum(s.value for s in outputs):
        raise MalformedLine(line_no, "outputs exceed inputs")

    size = obj.get("size")
    weight = obj.get("weight")
    if size is not None:
        size = _nonneg_int(size, "size", line_no)
    if weight is not None:
        weight = _nonneg_int(weight, "weight", line_no)

    types = obj.get("addr_types") or {}
    equiv = obj.get("equiv") or {}
    if not isinstance(types, dict) or any(t not in ADDRESS_TYPES for t in types.values()):
        raise MalformedLine(line_no, f"addr_types values must be one of {ADDRESS_TYPES}")
    if not isinstance(equiv, dict):
        raise MalformedLine(line_no, "equiv must be an object")
    for a, n in equiv.items():
        _nonneg_int(n, f"equiv[{a}]", line_no)

    tx = Transaction(txid, height, ts, coinbase, tuple(inputs), tuple(outputs), size, weight)
    return tx, types, equiv


def load_transactions(lines: Iterable[str], options: IngestOptions = IngestOptions()) -> ChainStore:
    txs: list[Transaction] = []
    seen: set[str] = set()
    types: dict[str, str] = {}
    equiv: dict[str, int] = {}
    for line_no, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedLine(line_no, f"invalid JSON: {e.msg}") from None
        tx, t, q = parse_tx(obj, line_no)
        if tx.txid in seen:
            raise DuplicateTxid(tx.txid, line_no)
        seen.add(tx.txid)
        for a, v in t.items():
            types.setdefault(a, v)
        for a, v in q.items():
            equiv.setdefault(a, v)
        txs.append(tx)

    if options.strict_timestamps:
        ordered = sorted(enumerate(txs), key=lambda p: (p[1].block_height, p[0]))
        last = None
        for _, tx in ordered:
            if last is not None and tx.timestamp < last:
                raise NonMonotonicTimestamp(tx.txid)
            last = tx.timestamp
    return ChainStore(txs, types, equiv)


def ingest_chain(path, options: IngestOptions = IngestOptions()) -> ChainStore:
    """Parse and index a JSON Lines chain file; the whole file is rejected on error."""
    with open(path, encoding="utf-8") as fh:
        store = load_transactions(fh, options)
    log.debug("ingested %d transactions, %d addresses", len(store), len(store.addresses()))
    return store
