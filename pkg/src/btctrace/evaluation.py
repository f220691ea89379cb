"""Synthetic chains with planted ground truth, and the experiment harnesses.

Everything here is deterministic per seed: generation uses `random.Random`
and derives txids/addresses by hashing (seed, counter).
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import random
import statistics
import time
from dataclasses import asdict, dataclass, field

from .chainstore import ChainStore, Transaction, TxSlot
from .classifier import assemble_dataset
from .explorer import ExplorationConfig, explore
from .oracles import DEFAULT_CODEC, aes_gcm_encrypt_payload, is_public
from .relations import diff_reports, find_relations
from .tagdb import (TagDatabase, TagRecord, build_tag_db, make_tag, propagate_to_clusters,
                    write_tags)

log = logging.getLogger(__name__)

T0 = 1_500_000_000          # 2017-07-14 UTC
BLOCK_SECONDS = 600
COIN = 100_000_000
FEE = 100_000               # 0.001 BTC
EPSILONS = tuple(round(0.05 * i, 2) for i in range(1, 9))
MODES = ("inject_cfp", "inject_cfn")

_B58 = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"
_BECH = "qpzry9x8gf2tvdw0s3jn54khce6mua7l"


class ModelRequired(ValueError):
    pass


def _b58(data: bytes) -> str:
    n = int.from_bytes(data, "big")
    out = []
    while n:
        n, r = divmod(n, 58)
        out.append(_B58[r])
    return "".join(reversed(out)) or "1"


# -- chain construction ------------------------------------------------------------

class ChainBuilder:
    """Accumulates transactions; block time is T0 + height * 600."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = random.Random(seed)
        self.txs: list[Transaction] = []
        self.addr_types: dict[str, str] = {}
        self.height = 0
        self._n_addr = 0
        self._n_tx = 0

    def address(self, kind: str = "pubkeyhash") -> str:
        self._n_addr += 1
        h = hashlib.blake2b(f"{self.seed}:addr:{self._n_addr}".encode(), digest_size=20).digest()
        if kind == "segwit":
            addr = "bc1q" + "".join(_BECH[b % 32] for b in h)
        else:
            addr = ("3" if kind == "scripthash" else "1") + _b58(h)
        self.addr_types[addr] = kind
        return addr

    def name(self, name: str, kind: str = "other") -> str:
        self.addr_types[name] = kind
        return name

    def tx(self, inputs, outputs, height: int | None = None, coinbase: bool = False) -> Transaction:
        """inputs: [(addr, value)]; outputs: [(addr, value)] or [("data", hex, value)]."""
        self._n_tx += 1
        if height is None:
            height = self.height
        self.height = max(self.height, height)
        ins = tuple(TxSlot(a, v, i) for i, (a, v) in enumerate(inputs))
        outs = []
        for i, o in enumerate(outputs):
            if o[0] == "data":
                outs.append(TxSlot(None, o[2], i, data=o[1]))
            else:
                outs.append(TxSlot(o[0], o[1], i))
        txid = hashlib.sha256(f"{self.seed}:tx:{self._n_tx}".encode()).hexdigest()
        size = 10 + 148 * len(ins) + 34 * len(outs)
        t = Transaction(txid, height, T0 + height * BLOCK_SECONDS, coinbase, ins, tuple(outs),
                        size, 4 * size)
        assert coinbase or t.in_value >= t.out_value, "generator produced a negative fee"
        self.txs.append(t)
        return t

    def coinbase(self, addr: str, value: int, height: int | None = None) -> Transaction:
        return self.tx([], [(addr, value)], height, coinbase=True)

    def step(self, blocks: int = 1) -> int:
        self.height += blocks
        return self.height

    def store(self) -> ChainStore:
        return ChainStore(self.txs, self.addr_types)

    def write(self, path) -> None:
        self.store().export(path)


# -- background economy ------------------------------------------------------------

@dataclass
class Wallet:
    addrs: list[str]
    fresh_change: bool


class Economy:
    """Users paying each other and exchanges sweeping deposits and batching payouts.

    Exchange addresses end up in one multi-input cluster per exchange and carry
    far more slots and a far higher tx rate than user addresses.
    """

    def __init__(self, b: ChainBuilder, n_users: int, n_exchanges: int, rng: random.Random,
                 opreturn_rate: float = 0.03):
        self.b = b
        self.rng = rng
        self.bal: dict[str, int] = {}
        self.opreturn_rate = opreturn_rate
        self.users = [Wallet([b.address(rng.choice(("pubkeyhash", "segwit")))], rng.random() < 0.5)
                      for _ in range(n_users)]
        self.exchanges = []
        for i in range(n_exchanges):
            hot = b.address("scripthash")
            self.exchanges.append({"name": f"exch{i}", "hot": hot, "pending": [], "members": [hot]})
            self._credit(b.coinbase(hot, 5000 * COIN, 0))
        self.miners = rng.sample(range(n_users), max(1, n_users // 50)) if n_users else []

    def _credit(self, tx: Transaction) -> None:
        for s in tx.inputs:
            self.bal[s.address] -= s.value
        for s in tx.outputs:
            if s.address is not None:
                self.bal[s.address] = self.bal.get(s.address, 0) + s.value

    def user_addresses(self) -> list[str]:
        return [a for w in self.users for a in w.addrs]

    def exchange_addresses(self) -> list[str]:
        return [a for e in self.exchanges for a in e["members"]]

    def receive_addr(self, w: Wallet) -> str:
        return w.addrs[-1]

    def _spend(self, w: Wallet, height: int, pay_to: list[tuple[str, int]] | None,
               frac=(0.1, 0.6), data: str | None = None) -> Transaction | None:
        funded = sorted((a for a in w.addrs if self.bal.get(a, 0) > 0),
                        key=lambda a: (-self.bal[a], a))[: self.rng.randint(1, 2)]
        total = sum(self.bal[a] for a in funded)
        if total < 50_000:
            return None
        fee = self.rng.randint(1_000, 20_000)
        outs = []
        if pay_to is None:
            return None
        amount_total = 0
        for addr, amt in pay_to:
            if amt is None:
                amt = int(total * self.rng.uniform(*frac))
            outs.append((addr, amt))
            amount_total += amt
        change = total - amount_total - fee
        if change < 0:
            return None
        if change >= 546:
            if w.fresh_change:
                ca = self.b.address(self.b.addr_types[w.addrs[0]])
                w.addrs.append(ca)
            else:
                ca = w.addrs[0]
            outs.append((ca, change))
        if data is not None:
            outs.append(("data", data, 0))
        tx = self.b.tx([(a, self.bal[a]) for a in funded], outs, height)
        self._credit(tx)
        return tx

    def pay(self, height: int) -> None:
        w = self.rng.choice(self.users)
        to = self.rng.choice(self.users)
        if to is w:
            return
        data = None
        if self.rng.random() < self.opreturn_rate:
            n = self.rng.choice((40, 56, 64, 80))
            data = "%0*x" % (n, self.rng.getrandbits(4 * n))
        self._spend(w, height, [(self.receive_addr(to), None)], data=data)

    def new_deposit_address(self, ex: dict) -> str:
        d = self.b.address(self.rng.choice(("pubkeyhash", "segwit")))
        ex["pending"].append(d)
        ex["members"].append(d)
        return d

    def deposit(self, height: int) -> None:
        w = self.rng.choice(self.users)
        ex = self.rng.choice(self.exchanges)
        d = self.new_deposit_address(ex)
        if self._spend(w, height, [(d, None)], frac=(0.2, 0.9)) is None:
            ex["pending"].remove(d)
            ex["members"].remove(d)

    def consolidate(self, ex: dict, height: int, force: bool = False) -> None:
        pend = [a for a in ex["pending"] if self.bal.get(a, 0) > 0]
        if len(pend) < 3 and not force:
            return
        if not pend:
            return
        batch = pend[:60]
        ins = [(a, self.bal[a]) for a in batch]
        if self.bal.get(ex["hot"], 0) > 0:
            ins.append((ex["hot"], self.bal[ex["hot"]]))
        total = sum(v for _, v in ins)
        fee = 1_000 * len(ins)
        tx = self.b.tx(ins, [(ex["hot"], total - fee)], height)
        self._credit(tx)
        ex["pending"] = [a for a in ex["pending"] if a not in set(batch)]

    def payout(self, ex: dict, height: int) -> None:
        hot = ex["hot"]
        bal = self.bal.get(hot, 0)
        k = self.rng.randint(20, 100)
        if bal < 10 * COIN or not self.users:
            return
        recips = self.rng.sample(self.users, min(k, len(self.users)))
        outs = [(self.receive_addr(w), self.rng.randint(50_000, 2 * COIN // 10)) for w in recips]
        outs = list({a: v for a, v in outs}.items())
        fee = 10_000 + 100 * len(outs)
        change = bal - sum(v for _, v in outs) - fee
        if change < 0:
            return
        tx = self.b.tx([(hot, bal)], outs + [(hot, change)], height)
        self._credit(tx)

    def mine(self, height: int) -> None:
        w = self.users[self.rng.choice(self.miners)]
        self._credit(self.b.coinbase(self.receive_addr(w), 625_000_000, height))

    def run(self, n_events: int, start: int, end: int) -> None:
        heights = sorted(self.rng.randint(start, end) for _ in range(n_events))
        kinds = ("pay", "deposit", "consolidate", "payout", "mine")
        weights = (0.55, 0.18, 0.07, 0.15, 0.05)
        for h in heights:
            k = self.rng.choices(kinds, weights)[0]
            if k == "pay":
                self.pay(h)
            elif k == "deposit" and self.exchanges:
                self.deposit(h)
            elif k == "consolidate" and self.exchanges:
                self.consolidate(self.rng.choice(self.exchanges), h)
            elif k == "payout" and self.exchanges:
                self.payout(self.rng.choice(self.exchanges), h)
            elif k == "mine" and self.miners:
                self.mine(h)
        self.b.height = max(self.b.height, end)

    def sweep_all(self, height: int) -> None:
        for ex in self.exchanges:
            while any(self.bal.get(a, 0) > 0 for a in ex["pending"]):
                self.consolidate(ex, height, force=True)


# -- planted structures ----------------------------------------------------------

def plant_cerber(b: ChainBuilder, height: int, cycles: int = 3, return_delta: int = 0) -> dict:
    """Signaler S sends its balance to a fresh temporary address that returns it minus the fee.

    return_delta shifts the return transaction's input total (and output) by that many
    satoshis, breaking the round-trip equality without touching the fee.
    """
    s = b.address()
    b.coinbase(s, COIN, height)
    value = COIN
    txids, temps = [], []
    h = height + 1
    for _ in range(cycles):
        t = b.address()
        sent = value - FEE
        tx1 = b.tx([(s, value)], [(t, sent)], h)
        back_in = sent + return_delta
        tx2 = b.tx([(t, back_in)], [(s, back_in - FEE)], h + 1)
        txids += [tx1.txid, tx2.txid]
        temps.append(t)
        value = sent - FEE
        h += 3
    return {"kind": "cerber_cycle", "address": s, "temporaries": temps, "txids": txids,
            "domains": [t[:6] for t in temps]}


def plant_pony(b: ChainBuilder, height: int, ips=("8.8.4.4", "93.184.216.34"),
               codec=DEFAULT_CODEC) -> dict:
    """Deposit pairs one block apart whose values carry the C&C IP."""
    p = b.address()
    funder = b.address()
    b.coinbase(funder, 50 * COIN, height)
    bal = 50 * COIN
    h = height + 10
    txids = []
    for ip in ips:
        for v in codec.encode(ip):
            amount = v + 65536 * b.rng.randint(1, 50)
            nxt = b.address()
            tx = b.tx([(funder, bal)], [(p, amount), (nxt, bal - amount - 1000)], h)
            txids.append(tx.txid)
            bal = bal - amount - 1000
            funder = nxt
            h += 1
        h += 20
    return {"kind": "pony_pair_series", "address": p, "ips": list(ips), "txids": txids}


def plant_glupteba(b: ChainBuilder, height: int, key: bytes, domain: str = "my.test.domain") -> dict:
    g = b.address()
    b.coinbase(g, COIN, height)
    iv = hashlib.sha256(f"{b.seed}:iv:{g}".encode()).digest()[:12]
    payload = aes_gcm_encrypt_payload(domain.encode(), key, iv)
    change = b.address()
    tx = b.tx([(g, COIN)], [("data", payload, 0), (change, COIN - FEE)], height + 2)
    return {"kind": "glupteba_opreturn", "address": g, "domain": domain, "txids": [tx.txid],
            "payload": payload}


def plant_dust(b: ChainBuilder, height: int, recipients: list[str], n: int = 100,
               value: int = 546) -> dict:
    attacker = b.address()
    b.coinbase(attacker, COIN, height)
    outs = list(recipients[:n])
    while len(outs) < n:
        outs.append(b.address())
    tx = b.tx([(attacker, COIN)], [(a, value) for a in outs] + [(attacker, COIN - n * value - FEE)],
              height + 1)
    return {"kind": "dust_blast", "txid": tx.txid, "attacker": attacker, "recipients": outs}


def plant_coinjoin(b: ChainBuilder, height: int, participants: list[str], value: int = COIN // 10
                   ) -> dict:
    """Each participant funds one input; equal outputs plus one change output each."""
    parts = list(participants)
    ins, outs = [], []
    for p in parts:
        amt = value + 2 * FEE + b.rng.randint(0, 10**6)
        ins.append((p, amt))
        outs.append((b.address(), value))
        outs.append((b.address(), amt - value - FEE))
    tx = b.tx(ins, outs, height)
    return {"kind": "coinjoin", "txid": tx.txid, "participants": parts}


# -- fixtures --------------------------------------------------------------------

def two_seed_fixture() -> tuple[ChainStore, dict]:
    """The two-seed example: seeds s and g; b is an untagged exchange, c is tagged poloniex."""
    b = ChainBuilder(seed=2)
    n = {x: b.name(x) for x in "sabcdefghi"}
    cb_i = b.coinbase(n["i"], 10 * COIN, 1)
    cb_e = b.coinbase(n["e"], 2 * COIN, 1)
    cb_f = b.coinbase(n["f"], 2 * COIN, 1)
    cb_c = b.coinbase(n["c"], 5 * COIN, 1)
    t6 = b.tx([(n["i"], 10 * COIN)], [(n["d"], 3 * COIN), (n["d"], 3 * COIN), (n["g"], 4 * COIN - FEE)], 2)
    t5 = b.tx([(n["d"], 3 * COIN), (n["e"], 2 * COIN), (n["f"], 2 * COIN)], [(n["s"], 7 * COIN - FEE)], 3)
    t1 = b.tx([(n["s"], 7 * COIN - FEE)], [(n["a"], 4 * COIN), (n["b"], 3 * COIN - 2 * FEE)], 4)
    t2 = b.tx([(n["a"], 4 * COIN), (n["d"], 3 * COIN)], [(n["h"], 7 * COIN - FEE)], 5)
    t4 = b.tx([(n["g"], 4 * COIN - FEE)], [(n["h"], 4 * COIN - 2 * FEE)], 5)
    t3 = b.tx([(n["h"], 11 * COIN - 3 * FEE)], [(n["c"], 11 * COIN - 4 * FEE)], 6)
    t7 = b.tx([(n["b"], 3 * COIN - 2 * FEE), (n["c"], 5 * COIN)], [(n["c"], 8 * COIN - 3 * FEE)], 7)
    store = b.store()
    ids = {"T1": t1.txid, "T2": t2.txid, "T3": t3.txid, "T4": t4.txid, "T5": t5.txid,
           "T6": t6.txid, "T7": t7.txid, "CBi": cb_i.txid, "CBe": cb_e.txid, "CBf": cb_f.txid,
           "CBc": cb_c.txid}
    meta = {
        "seeds": ["s", "g"],
        "tags": [make_tag("c", "exchange", "poloniex", urls=("https://example.org/poloniex",))],
        "classifier_exchanges": ["b"],
        "txids": ids,
        "baf_addresses": sorted("sabcdefghi"),
        "baf_txs": sorted(ids[k] for k in ("T1", "T2", "T3", "T4", "T5", "T6", "CBi", "CBe", "CBf")),
        "fwd_addresses": sorted("sgabhc"),
        "fwd_txs": sorted(ids[k] for k in ("T1", "T2", "T3", "T4")),
    }
    return store, meta


def two_seed_tagdb(meta: dict) -> TagDatabase:
    return tags_to_db(meta["tags"])


def back_only_relation_fixture() -> tuple[ChainStore, dict]:
    """Exchange E funds X; X co-spends with seed s and later pays s.

    The path E -> X -> s only exists when deposits into the campaign are followed.
    """
    b = ChainBuilder(seed=3)
    e, x, s, y, u = (b.name(n) for n in ("E", "X", "s", "Y", "U"))
    b.coinbase(e, 10 * COIN, 1)
    b.coinbase(u, 2 * COIN, 1)
    t1 = b.tx([(e, 10 * COIN)], [(x, 3 * COIN), (e, 7 * COIN - FEE)], 2)
    t0 = b.tx([(u, 2 * COIN)], [(s, 2 * COIN - FEE)], 2)
    t3 = b.tx([(x, 3 * COIN)], [(s, COIN), (x, 2 * COIN - FEE)], 3)
    t2 = b.tx([(s, COIN), (x, 2 * COIN - FEE)], [(y, 3 * COIN - 3 * FEE)], 4)
    store = b.store()
    return store, {"seeds": ["s"], "tags": [make_tag("E", "exchange", "cashout")],
                   "txids": {"t0": t0.txid, "t1": t1.txid, "t2": t2.txid, "t3": t3.txid}}


def filter_fixture() -> tuple[ChainStore, dict]:
    """A seed hit by a 100-output dust blast, a CoinJoin, and a 99-output batch payment."""
    b = ChainBuilder(seed=10)
    s = b.address()
    b.coinbase(s, 5 * COIN, 1)
    others = [b.address() for _ in range(4)]
    for o in others:
        b.coinbase(o, COIN, 1)
    dust = plant_dust(b, 2, [s])
    cj = plant_coinjoin(b, 4, [s] + others, value=COIN // 2)
    payer = b.address()
    b.coinbase(payer, 10 * COIN, 5)
    near = [s] + [b.address() for _ in range(98)]
    t99 = b.tx([(payer, 10 * COIN)], [(a, 1000) for a in near], 6)
    return b.store(), {"seeds": [s], "dust": dust, "coinjoin": cj, "near_dust_txid": t99.txid,
                       "coinjoin_participants": others}


def relation_rich_fixture(n_seeds: int = 8, fwd_per_seed: int = 4, back_per_seed: int = 4,
                          hub_services: int = 2, seed: int = 7) -> tuple[ChainStore, dict]:
    """Many one-hop relations per seed through untagged users, plus one exchange hub per seed.

    Ground-truth exchanges are the hubs; expanding a hub reaches extra tagged services.
    """
    b = ChainBuilder(seed)
    tags: list[TagRecord] = []
    exchanges: list[str] = []
    seeds: list[str] = []
    endpoints: list[dict] = []
    h = 1
    for i in range(n_seeds):
        s = b.address()
        seeds.append(s)
        tags.append(make_tag(s, "ransomware", "synthlock"))
        # victims pay the seed; untagged users fund and are funded by it
        for j in range(back_per_seed):
            svc = b.address()
            tags.append(make_tag(svc, "exchange", f"src{i}x{j}"))
            endpoints.append({"seed": s, "address": svc, "tag": f"exchange:src{i}x{j}",
                              "direction": "entity_to_seed", "via": "user"})
            v = b.address()
            b.coinbase(svc, 10 * COIN, h)
            b.tx([(svc, 10 * COIN)], [(v, 2 * COIN), (svc, 8 * COIN - FEE)], h + 1)
            b.tx([(v, 2 * COIN)], [(s, 2 * COIN - FEE)], h + 2)
        bal = back_per_seed * (2 * COIN - FEE)
        direct = b.address()
        tags.append(make_tag(direct, "mixer", f"mix{i}"))
        endpoints.append({"seed": s, "address": direct, "tag": f"mixer:mix{i}",
                          "direction": "seed_to_entity", "via": "direct"})
        hub = b.address()
        exchanges.append(hub)
        outs = [(direct, COIN // 10), (hub, COIN // 10)]
        users = [b.address() for _ in range(fwd_per_seed)]
        outs += [(u, COIN // 10) for u in users]
        b.tx([(s, bal)], outs + [(s, bal - (len(outs)) * (COIN // 10) - FEE)], h + 3)
        for j, u in enumerate(users):
            svc = b.address()
            tags.append(make_tag(svc, "gambling", f"dst{i}x{j}"))
            endpoints.append({"seed": s, "address": svc, "tag": f"gambling:dst{i}x{j}",
                              "direction": "seed_to_entity", "via": "user"})
            b.tx([(u, COIN // 10)], [(svc, COIN // 10 - FEE)], h + 4)
        # the hub pays out to services only reachable through it
        hub_outs = []
        for k in range(hub_services):
            svc = b.address()
            tags.append(make_tag(svc, "exchange", f"hub{i}x{k}"))
            endpoints.append({"seed": s, "address": svc, "tag": f"exchange:hub{i}x{k}",
                              "direction": "seed_to_entity", "via": "hub"})
            hub_outs.append((svc, COIN // 100))
        b.tx([(hub, COIN // 10)], hub_outs + [(hub, COIN // 10 - hub_services * (COIN // 100) - FEE)],
             h + 5)
        h += 10
    return b.store(), {"seeds": seeds, "tags": tags, "exchanges": exchanges,
                       "endpoints": endpoints}


def tags_to_db(tags, clusters=None) -> TagDatabase:
    raw: dict[str, list[TagRecord]] = {}
    for t in tags:
        raw.setdefault(t.address, []).append(t)
    db = build_tag_db(raw)
    if clusters is not None:
        propagate_to_clusters(db, clusters)
    return db


@dataclass
class EconomyChain:
    store: ChainStore
    exchanges: list[dict]
    users: list[list[str]]
    planted: list[dict] = field(default_factory=list)
    builder: ChainBuilder | None = None


def economy_chain(seed: int, n_users: int, n_exchanges: int, n_events: int, horizon: int,
                  planted: list[dict] | None = None, glupteba_key: bytes | None = None
                  ) -> EconomyChain:
    """Background economy with optional planted structures in the middle of the timeline.

    planted: list of {"kind": ..., "count": n, ...}.
    """
    b = ChainBuilder(seed)
    rng = random.Random(seed + 1)
    eco = Economy(b, n_users, n_exchanges, rng)
    mid = horizon // 2
    eco.run(n_events // 2, 1, mid)
    records = []
    h = mid
    for spec in planted or []:
        for _ in range(int(spec.get("count", 1))):
            kind = spec["kind"]
            if kind == "cerber_cycle":
                records.append(plant_cerber(b, h, int(spec.get("cycles", 3))))
            elif kind == "pony_pair_series":
                ips = spec.get("ips") or [_random_public_ip(rng) for _ in range(int(spec.get("pairs", 3)))]
                records.append(plant_pony(b, h, ips))
            elif kind == "glupteba_opreturn":
                records.append(plant_glupteba(b, h, glupteba_key, spec.get("domain", "my.test.domain")))
            elif kind == "dust_blast":
                records.append(plant_dust(b, h, rng.sample(eco.user_addresses(), 10)))
            elif kind == "coinjoin":
                parts = [b.address() for _ in range(int(spec.get("participants", 5)))]
                for p in parts:
                    b.coinbase(p, COIN, h)
                records.append(plant_coinjoin(b, h + 1, parts))
            elif kind == "ransomware_cashout":
                records.append(_plant_cashout(b, eco, h, int(spec.get("victims", 20))))
            else:
                raise ValueError(f"unsupported planted kind {kind!r}")
            h += 100
    eco.run(n_events - n_events // 2, h, max(h + 1, horizon))
    eco.sweep_all(b.height + 1)
    return EconomyChain(b.store(), eco.exchanges, [w.addrs for w in eco.users], records, b)


def economy_dataset(eco: EconomyChain, clusters, target_size: int | None = None,
                    seed: int = 0):
    """Balanced exchange/user dataset: hot wallets and each user's first address as seeds."""
    positives = [x["hot"] for x in eco.exchanges]
    negatives = [addrs[0] for addrs in eco.users if addrs]
    return assemble_dataset(eco.store, clusters, positives, negatives, target_size, seed)


def _random_public_ip(rng: random.Random) -> str:
    while True:
        ip = ".".join(str(rng.randint(1, 254)) for _ in range(4))
        if is_public(ip):
            return ip


def _plant_cashout(b: ChainBuilder, eco: Economy, h: int, n_victims: int) -> dict:
    """A ransomware seed paid by fresh victims, cashing out once into every exchange."""
    s = b.address()
    victims = []
    for _ in range(n_victims):
        v = b.address()
        b.coinbase(v, COIN, h)
        b.tx([(v, COIN)], [(s, COIN // 2), (b.address(), COIN // 2 - FEE)], h + 1)
        victims.append(v)
    total = n_victims * (COIN // 2)
    outs = []
    deposits = []
    share = total // (len(eco.exchanges) + 1)
    for ex in eco.exchanges:
        d = eco.new_deposit_address(ex)
        deposits.append(d)
        outs.append((d, share))
    rest = total - share * len(deposits) - FEE
    tx = b.tx([(s, total)], outs + [(b.address(), rest)], h + 2)
    eco.bal[s] = eco.bal.get(s, 0) + total
    eco._credit(tx)
    return {"kind": "ransomware_cashout", "address": s, "deposits": deposits,
            "victims": victims, "txids": [tx.txid]}


# -- generation from a chain description ----------------------------------------------------------

@dataclass
class SynthChainSpec:
    seed: int
    n_users: int = 500
    n_exchanges: int = 3
    n_events: int = 2000
    horizon_blocks: int = 50_000
    planted: list[dict] = field(default_factory=list)
    glupteba_key: str = "00" * 32

    @classmethod
    def from_dict(cls, d: dict) -> "SynthChainSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def generate_chain(spec: SynthChainSpec, out_dir) -> dict:
    """Write chain.jsonl, tags.csv and manifest.json; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    chain_path = os.path.join(out_dir, "chain.jsonl")
    tags_path = os.path.join(out_dir, "tags.csv")
    manifest_path = os.path.join(out_dir, "manifest.json")
    two_seed = [p for p in spec.planted if p["kind"] == "fig2_topology"]
    rel = [p for p in spec.planted if p["kind"] == "relation_path"]
    others = [p for p in spec.planted if p["kind"] not in ("fig2_topology", "relation_path")]
    if two_seed and (rel or others or spec.n_users):
        raise ValueError("fig2_topology must be the only structure in its chain")
    if two_seed:
        store, meta = two_seed_fixture()
        tags = meta["tags"]
        manifest = {"spec": spec.to_dict(), "seeds": meta["seeds"],
                    "planted": [{"kind": "fig2_topology", "classifier_exchanges": ["b"],
                                 "txids": meta["txids"]}]}
    elif rel:
        p = rel[0]
        store, meta = relation_rich_fixture(seed=spec.seed, **{k: v for k, v in p.items() if k != "kind"})
        tags = meta["tags"]
        manifest = {"spec": spec.to_dict(), "seeds": meta["seeds"],
                    "planted": [{"kind": "relation_path", "exchanges": meta["exchanges"],
                                 "endpoints": meta["endpoints"]}]}
    else:
        eco = economy_chain(spec.seed, spec.n_users, spec.n_exchanges, spec.n_events,
                            spec.horizon_blocks, others, bytes.fromhex(spec.glupteba_key))
        store = eco.store
        tags = [make_tag(ex["hot"], "exchange", ex["name"]) for ex in eco.exchanges]
        manifest = {"spec": spec.to_dict(),
                    "exchanges": [{"name": ex["name"], "hot": ex["hot"],
                                   "members": sorted(ex["members"])} for ex in eco.exchanges],
                    "users": [sorted(u) for u in eco.users],
                    "planted": eco.planted}
    store.export(chain_path)
    write_tags(tags_path, tags)
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


# -- experiments -----------------------------------------------------------------

def relation_f1(baseline: set, found: set) -> dict:
    tp = len(baseline & found)
    fp = len(found - baseline)
    fn = len(baseline - found)
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return {"tp": tp, "fp": fp, "fn": fn, "precision": p, "recall": r, "f1": f1}


def _unit_draw(key: str) -> float:
    h = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(h, "big") / 2**64


class FlipClassifier:
    """Flips decisions of one polarity with probability epsilon.

    The per-address draw depends only on (run seed, address), so for a fixed run
    seed the flipped set grows monotonically with epsilon.
    """

    def __init__(self, base, epsilon: float, mode: str, seed: int):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.base = base
        self.epsilon = epsilon
        self.mode = mode
        self.seed = seed
        self.calls = 0
        self.flips = 0
        self.eligible = 0

    def is_exchange(self, address: str) -> bool:
        self.calls += 1
        verdict = self.base.is_exchange(address)
        target = (not verdict) if self.mode == "inject_cfp" else verdict
        if not target:
            return verdict
        self.eligible += 1
        if _unit_draw(f"{self.seed}:{address}") < self.epsilon:
            self.flips += 1
            return not verdict
        return verdict


def run_epsilon_study(store, clusters, tagdb, model, seeds, epsilons=EPSILONS, modes=MODES,
                      repeats: int = 20, config: ExplorationConfig | None = None,
                      seed: int = 0) -> dict:
    if model is None:
        raise ModelRequired("the epsilon study perturbs a classifier; none was given")
    cfg = config or ExplorationConfig()
    base_graph = explore(store, clusters, tagdb, model, seeds, cfg)
    baseline = find_relations(base_graph, tagdb).keys()
    rows = [{"epsilon": 0.0, "mode": m, "mean_f1": 1.0, "std_f1": 0.0} for m in modes]
    runs = []
    for mode in modes:
        for eps in epsilons:
            f1s = []
            for r in range(repeats):
                flip = FlipClassifier(model, eps, mode, seed * 1000 + r)
                g = explore(store, clusters, tagdb, flip, seeds, cfg)
                m = relation_f1(baseline, find_relations(g, tagdb).keys())
                f1s.append(m["f1"])
                runs.append({"epsilon": eps, "mode": mode, "repeat": r, **m,
                             "flips": flip.flips, "eligible": flip.eligible})
            rows.append({"epsilon": eps, "mode": mode, "mean_f1": statistics.fmean(f1s),
                         "std_f1": statistics.pstdev(f1s)})
    return {"baseline_relations": len(baseline), "curve": rows, "runs": runs}


def write_curve(path, curve: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "mode", "mean_f1", "std_f1"])
        for r in sorted(curve, key=lambda r: (r["mode"], r["epsilon"])):
            w.writerow([f"{r['epsilon']:.2f}", r["mode"], f"{r['mean_f1']:.6f}", f"{r['std_f1']:.6f}"])


def run_ablation(store, clusters, tagdb, model, seeds, limit: int = 20_000,
                 config: ExplorationConfig | None = None) -> dict:
    base = config or ExplorationConfig()
    out = {}
    for name, enabled in (("enabled", True), ("disabled", False)):
        cfg = ExplorationConfig(**{**base.to_dict(), "classifier_enabled": enabled,
                                   "max_addresses": None if enabled else limit})
        t0 = time.perf_counter()
        g = explore(store, clusters, tagdb, model if enabled else None, seeds, cfg)
        runtime = time.perf_counter() - t0
        out[name] = {"runtime": runtime, "addresses": g.stats["addresses"],
                     "txes": g.stats["txes"], "limit_hit": g.stats["status"] == "LimitReached",
                     "status": g.stats["status"],
                     "classifier_exchanges": g.stats["classifier_exchanges"]}
        out[name + "_graph"] = g
    e, d = out["enabled"], out["disabled"]
    out["ratios"] = {k: (d[k] / e[k] if e[k] else None) for k in ("runtime", "addresses", "txes")}
    return out


def ablation_json(result: dict) -> str:
    slim = {k: v for k, v in result.items() if not k.endswith("_graph")}
    return json.dumps(slim, sort_keys=True, indent=1) + "\n"


def compare_directions(store, clusters, tagdb, model, seeds,
                       config: ExplorationConfig | None = None) -> dict:
    base = (config or ExplorationConfig()).to_dict()
    graphs, reports = {}, {}
    for d in ("back_and_forth", "forward_only"):
        cfg = ExplorationConfig(**{**base, "direction": d})
        graphs[d] = explore(store, clusters, tagdb, model, seeds, cfg)
        reports[d] = find_relations(graphs[d], tagdb)
    baf, fwd = graphs["back_and_forth"], graphs["forward_only"]

    def ratio(a, b):
        return a / b if b else 1.0

    return {
        "back_and_forth": {k: v for k, v in baf.stats.items() if k != "runtime"},
        "forward_only": {k: v for k, v in fwd.stats.items() if k != "runtime"},
        "address_ratio": ratio(len(fwd.addresses), len(baf.addresses)),
        "tx_ratio": ratio(len(fwd.txs), len(baf.txs)),
        "edge_ratio": ratio(len(fwd.edges), len(baf.edges)),
        "relations": {"back_and_forth": len(reports["back_and_forth"].relations),
                      "forward_only": len(reports["forward_only"].relations)},
        "diff": diff_reports(reports["back_and_forth"], reports["forward_only"]),
        "graphs": graphs,
        "reports": reports,
    }


# -- random chains for property tests -----------------------------------------------

class _FundedSet:
    """Addresses with positive balance; O(1) add, remove and uniform sampling."""

    def __init__(self):
        self.items: list[str] = []
        self.pos: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.items)

    def add(self, a: str) -> None:
        if a not in self.pos:
            self.pos[a] = len(self.items)
            self.items.append(a)

    def discard(self, a: str) -> None:
        i = self.pos.pop(a, None)
        if i is None:
            return
        last = self.items.pop()
        if i < len(self.items):
            self.items[i] = last
            self.pos[last] = i

    def sample(self, rng: random.Random, k: int) -> list[str]:
        return [self.items[i] for i in rng.sample(range(len(self.items)), k)]


def random_chain(rng: random.Random, n_tx: int, n_addr: int | None = None,
                 coinjoin_rate: float = 0.0) -> ChainStore:
    """Arbitrary valid chain: random shapes, values and address reuse."""
    b = ChainBuilder(rng.getrandbits(32))
    pool = [b.address(rng.choice(("pubkeyhash", "scripthash", "segwit")))
            for _ in range(n_addr or max(4, n_tx // 2))]
    bal: dict[str, int] = {}
    funded = _FundedSet()

    def credit(tx):
        for s in tx.inputs:
            bal[s.address] = 0
            funded.discard(s.address)
        for s in tx.outputs:
            if s.address is not None and s.value > 0:
                bal[s.address] = bal.get(s.address, 0) + s.value
                funded.add(s.address)

    h = 0
    for _ in range(n_tx):
        h += rng.randint(0, 3)
        if len(funded) < 3 or rng.random() < 0.15:
            credit(b.coinbase(rng.choice(pool), rng.randint(1, 50) * COIN, h))
            continue
        if coinjoin_rate and rng.random() < coinjoin_rate:
            parts = funded.sample(rng, min(len(funded), rng.randint(3, 5)))
            v = min(bal[p] for p in parts) // 2
            if v > 1000:
                outs = [(rng.choice(pool), v) for _ in parts]
                outs += [(rng.choice(pool), bal[p] - v - 10) for p in parts]
                credit(b.tx([(p, bal[p]) for p in parts], outs, h))
                continue
        ins = funded.sample(rng, min(len(funded), rng.randint(1, 3)))
        total = sum(bal[a] for a in ins)
        n_out = rng.randint(1, 4)
        outs = []
        remaining = total - rng.randint(0, min(1000, total))
        for k in range(n_out):
            v = remaining if k == n_out - 1 else rng.randint(0, remaining)
            remaining -= v
            outs.append((rng.choice(pool), v))
        if rng.random() < 0.05:
            outs.append(("data", "%064x" % rng.getrandbits(256), 0))
        credit(b.tx([(a, bal[a]) for a in ins], outs, h))
    return b.store()
