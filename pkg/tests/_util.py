"""Small builders shared by the test modules."""
from __future__ import annotations

import hashlib

from btctrace.chainstore import ChainStore, Transaction, TxSlot


def txid(n) -> str:
    return hashlib.sha256(f"test-tx-{n}".encode()).hexdigest()


def mk_tx(n, ins, outs, height=1, ts=None, coinbase=None, size=None, weight=None) -> Transaction:
    """ins/outs: [(addr, value)]; an output ("data", hex, value) is an OP_RETURN slot."""
    i = tuple(TxSlot(a, v, k) for k, (a, v) in enumerate(ins))
    o = []
    for k, s in enumerate(outs):
        if s[0] == "data":
            o.append(TxSlot(None, s[2], k, data=s[1]))
        else:
            o.append(TxSlot(s[0], s[1], k))
    if coinbase is None:
        coinbase = not ins
    return Transaction(txid(n), height, ts if ts is not None else 1_500_000_000 + 600 * height,
                       coinbase, i, tuple(o), size, weight)


def store_of(*txs, types=None) -> ChainStore:
    return ChainStore(txs, types)


def line(tx: Transaction) -> dict:
    d = {"txid": tx.txid, "height": tx.block_height, "time": tx.timestamp,
         "coinbase": tx.is_coinbase,
         "in": [{"addr": s.address, "value": s.value} for s in tx.inputs],
         "out": [({"data": s.data, "value": s.value} if s.is_data else
                  {"addr": s.address, "value": s.value}) for s in tx.outputs]}
    return d
