"""Worklist exploration of the transaction graph from a set of seed addresses."""
from __future__ import annotations

import heapq
import json
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass

from .chainstore import SATOSHIS_PER_BTC, ChainStore, Transaction
from .clustering import detect_coinjoin, detect_dust
from .tagdb import ResolvedTag, is_exploration_stop, lookup

log = logging.getLogger(__name__)

DIRECTIONS = ("back_and_forth", "forward_only", "backwards_only")
CLASSIFIER_SCOPES = ("cluster", "address")

# Address node kinds
SEED = "seed"
EXPLORED = "explored"
TAGGED_STOP = "tagged-stop"
CLASSIFIER_STOP = "classifier-stop"
UNEXPLORED = "unexplored"
ORACLE = "oracle-detected"
_QUEUED = "queued"

STATUS_COMPLETE = "Complete"
STATUS_LIMIT = "LimitReached"


class SeedNotFound(UserWarning):
    pass


@dataclass
class ExplorationConfig:
    direction: str = "back_and_forth"
    sdd: bool = False
    max_addresses: int | None = None
    max_seconds: float | None = None
    classifier_enabled: bool = True
    dust_filter_enabled: bool = True
    coinjoin_filter_enabled: bool = True
    rng_seed: int | None = None
    classifier_scope: str = "cluster"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.classifier_scope not in CLASSIFIER_SCOPES:
            raise ValueError(f"classifier_scope must be one of {CLASSIFIER_SCOPES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Decision:
    action: str                      # "trace", "tag-stop" or "classifier-stop"
    tag: ResolvedTag | None = None


def compute_priority(total_slots: int) -> float:
    return 1.0 / (1 + total_slots)


def tag_details(tag: ResolvedTag | None) -> list[dict]:
    if tag is None:
        return []
    out = []
    for role, rec in (("owner", tag.owner), ("beneficiary", tag.beneficiary)):
        if rec is not None:
            out.append({"role": role, "category": rec.category, "label": rec.label,
                        "subtype": rec.subtype, "provenance": tag.provenance})
    return out


class ClassifierCache:
    """Per-cluster memo of classifier verdicts."""

    def __init__(self):
        self.positive_clusters: set[int] = set()
        self.negative_clusters: set[int] = set()


def _cluster_verdict(address: str, clusters, model) -> bool:
    """True when the model flags the address or, failing that, any co-cluster member."""
    if model.is_exchange(address):
        return True
    for m in clusters.members_of(address):
        if m != address and model.is_exchange(m):
            return True
    return False


def classify_address(address: str, tagdb, clusters, model, cache: ClassifierCache,
                     use_classifier: bool = True, scope: str = "cluster") -> Decision:
    """Tag lookup first, then the classifier.

    scope="cluster" gives the whole multi-input cluster one verdict, positive if any
    member is classified as an exchange; the verdict is independent of the order in
    which addresses are met.  scope="address" classifies the address alone and only
    marks its cluster after a positive, so the outcome depends on visiting order.
    """
    tag = lookup(tagdb, address, clusters) if tagdb is not None else None
    if tag is not None:
        return Decision("tag-stop" if is_exploration_stop(tag) else "trace", tag)
    if not use_classifier or model is None:
        return Decision("trace")
    cid = clusters.cluster_of(address) if clusters is not None else None
    if cid is not None and cid in cache.positive_clusters:
        return Decision("classifier-stop")
    if scope == "cluster" and cid is not None:
        if cid in cache.negative_clusters:
            return Decision("trace")
        positive = _cluster_verdict(address, clusters, model)
        (cache.positive_clusters if positive else cache.negative_clusters).add(cid)
        return Decision("classifier-stop" if positive else "trace")
    if model.is_exchange(address):
        if cid is not None:
            cache.positive_clusters.add(cid)
        return Decision("classifier-stop")
    return Decision("trace")


class ExplorationGraph:
    def __init__(self):
        self.addresses: dict[str, dict] = {}
        self.txs: dict[str, dict] = {}
        self.edges: dict[tuple[str, str], dict] = {}
        self.seeds: list[str] = []
        self.stats: dict = {}
        self.meta: dict = {}

    # -- queries

    def address_kind(self, addr: str) -> str | None:
        node = self.addresses.get(addr)
        return node["kind"] if node else None

    def out_neighbors(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {}
        for (src, dst) in self.edges:
            adj.setdefault(src, []).append(dst)
        for v in adj.values():
            v.sort()
        return adj

    def in_neighbors(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {}
        for (src, dst) in self.edges:
            adj.setdefault(dst, []).append(src)
        for v in adj.values():
            v.sort()
        return adj

    def components(self) -> list[set[str]]:
        adj: dict[str, set[str]] = {n: set() for n in list(self.addresses) + list(self.txs)}
        for (src, dst) in self.edges:
            adj[src].add(dst)
            adj[dst].add(src)
        seen: set[str] = set()
        comps = []
        for start in sorted(adj):
            if start in seen:
                continue
            comp = {start}
            seen.add(start)
            q = deque([start])
            while q:
                for nb in adj[q.popleft()]:
                    if nb not in seen:
                        seen.add(nb)
                        comp.add(nb)
                        q.append(nb)
            comps.append(comp)
        return comps

    def copy(self) -> "ExplorationGraph":
        g = ExplorationGraph()
        g.addresses = {a: json.loads(json.dumps(n)) for a, n in self.addresses.items()}
        g.txs = {t: dict(n) for t, n in self.txs.items()}
        g.edges = {k: json.loads(json.dumps(e)) for k, e in self.edges.items()}
        g.seeds = list(self.seeds)
        g.stats = dict(self.stats)
        g.meta = json.loads(json.dumps(self.meta))
        return g

    # -- export

    def to_dict(self) -> dict:
        received: dict[str, int] = {}
        for (src, dst), e in self.edges.items():
            if dst in self.addresses:
                received[dst] = received.get(dst, 0) + e["satoshis"]
        nodes = []
        for addr, n in self.addresses.items():
            sat = received.get(addr, 0)
            node = {"id": addr, "kind": "address", "addr_kind": n["kind"],
                    "tags": [f"{d['category']}:{d['label']}" for d in n["tags"]],
                    "tag_detail": n["tags"], "cluster": n["cluster"],
                    "total_btc": _btc(sat), "satoshis": sat, "seed": n.get("seed", False)}
            if n.get("seed"):
                node["explored"] = bool(n.get("explored"))
            if n.get("classified_by"):
                node["classified_by"] = n["classified_by"]
            if n.get("oracle"):
                node["oracle"] = n["oracle"]
            nodes.append(node)
        for txid, n in self.txs.items():
            nodes.append({"id": txid, "kind": "tx", "total_btc": _btc(n["satoshis"]),
                          "satoshis": n["satoshis"], "height": n["height"], "time": n["time"]})
        nodes.sort(key=lambda n: n["id"])
        edges = [{"from": s, "to": d, "txid": e["txid"], "slot": e["slots"][0],
                  "slots": e["slots"], "satoshis": e["satoshis"]}
                 for (s, d), e in sorted(self.edges.items())]
        stats = {k: v for k, v in self.stats.items() if k != "runtime"}
        return {"nodes": nodes, "edges": edges, "stats": stats,
                "seeds": sorted(self.seeds), "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_dot(self) -> str:
        lines = ["digraph exploration {", "  rankdir=LR;"]
        for addr in sorted(self.addresses):
            n = self.addresses[addr]
            kind = n["kind"]
            if n.get("seed"):
                style = 'style=filled, fillcolor="gray"'
            elif kind in (TAGGED_STOP, CLASSIFIER_STOP):
                style = 'style=filled, fillcolor="black", fontcolor="white"'
            elif kind == ORACLE:
                style = 'style=filled, fillcolor="red"'
            else:
                style = 'style=solid'
            label = addr if not n["tags"] else addr + "\\n" + ",".join(
                f"{d['category']}:{d['label']}" for d in n["tags"])
            lines.append(f'  "{addr}" [shape=circle, {style}, label="{label}", kind="{kind}"];')
        for txid in sorted(self.txs):
            lines.append(f'  "{txid}" [shape=box, label="{txid[:8]}\\n'
                         f'{_btc(self.txs[txid]["satoshis"])} BTC"];')
        for (s, d), e in sorted(self.edges.items()):
            lines.append(f'  "{s}" -> "{d}" [label="{e["satoshis"]}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def export(self, path, fmt: str = "json") -> None:
        text = self.to_json() if fmt == "json" else self.to_dot()
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    @classmethod
    def from_dict(cls, d: dict) -> "ExplorationGraph":
        g = cls()
        for n in d["nodes"]:
            if n["kind"] == "address":
                node = {"kind": n["addr_kind"], "tags": n.get("tag_detail", []),
                        "cluster": n.get("cluster"), "seed": n.get("seed", False)}
                if n.get("seed"):
                    node["explored"] = n.get("explored", False)
                if n.get("classified_by"):
                    node["classified_by"] = n["classified_by"]
                if n.get("oracle"):
                    node["oracle"] = n["oracle"]
                g.addresses[n["id"]] = node
            else:
                g.txs[n["id"]] = {"satoshis": n["satoshis"], "height": n.get("height"),
                                  "time": n.get("time")}
        for e in d["edges"]:
            g.edges[(e["from"], e["to"])] = {"txid": e["txid"], "slots": e["slots"],
                                            "satoshis": e["satoshis"]}
        g.seeds = list(d.get("seeds", []))
        g.stats = dict(d.get("stats", {}))
        g.meta = dict(d.get("meta", {}))
        return g

    @classmethod
    def load(cls, path) -> "ExplorationGraph":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _btc(sat: int) -> str:
    return f"{sat // SATOSHIS_PER_BTC}.{sat % SATOSHIS_PER_BTC:08d}"


class _Explorer:
    def __init__(self, store: ChainStore, clusters, tagdb, model, seeds, config: ExplorationConfig,
                 denylist=()):
        self.store = store
        self.clusters = clusters
        self.tagdb = tagdb
        self.model = model if config.classifier_enabled else None
        self.cfg = config
        self.denylist = set(denylist)
        self.seeds = list(dict.fromkeys(seeds))
        self.seed_set = set(self.seeds)
        self.g = ExplorationGraph()
        self.cache = ClassifierCache()
        self.heap: list[tuple[int, int, str]] = []
        self.seq = 0
        self.expanded: set[str] = set()
        # element keys added by each expansion, for rollback
        self.expansions: dict[str, set[tuple]] = {}
        self.backward_only_seeds: set[str] = set()
        self.explored_seeds: set[str] = set()
        self.status = STATUS_COMPLETE
        self.classifier_calls = 0

    # -- helpers

    def _filtered(self, tx: Transaction) -> bool:
        if tx.txid in self.denylist:
            return True
        flags = self.clusters.flags.get(tx.txid) if self.clusters is not None else None
        cj = flags.is_coinjoin if flags else detect_coinjoin(tx)
        dust = flags.is_dust if flags else detect_dust(tx)
        return (self.cfg.coinjoin_filter_enabled and cj) or (self.cfg.dust_filter_enabled and dust)

    def _context(self, addr: str) -> list[Transaction]:
        return [t for t in self.store.address_txs(addr) if not self._filtered(t)]

    def _cluster(self, addr: str):
        return self.clusters.cluster_of(addr) if self.clusters is not None else None

    def _push(self, addr: str) -> None:
        slots = sum(t.n_slots for t in self._context(addr))
        self.g.addresses[addr]["priority"] = compute_priority(slots)
        heapq.heappush(self.heap, (slots, self.seq, addr))
        self.seq += 1

    def _classify(self, addr: str) -> Decision:
        calls_before = getattr(self.model, "calls", None)
        d = classify_address(addr, self.tagdb, self.clusters, self.model, self.cache,
                             self.cfg.classifier_enabled, self.cfg.classifier_scope)
        if calls_before is not None and self.model.calls != calls_before:
            self.classifier_calls += self.model.calls - calls_before
        return d

    def _new_address(self, addr: str) -> list[str]:
        """Add a newly discovered address; returns co-cluster nodes to roll back."""
        d = self._classify(addr)
        node = {"kind": _QUEUED, "tags": tag_details(d.tag), "cluster": self._cluster(addr)}
        self.g.addresses[addr] = node
        if d.action == "tag-stop":
            node["kind"] = TAGGED_STOP
            node["classified_by"] = "tag"
            return []
        if d.action == "classifier-stop":
            node["kind"] = CLASSIFIER_STOP
            node["classified_by"] = "classifier"
            return self._cluster_siblings(addr)
        self._push(addr)
        return []

    def _cluster_siblings(self, addr: str) -> list[str]:
        cid = self._cluster(addr)
        if cid is None:
            return []
        return [a for a, n in self.g.addresses.items()
                if a != addr and n["cluster"] == cid and not n.get("seed") and not n["tags"]
                and n["kind"] in (_QUEUED, EXPLORED)]

    def _add_tx_node(self, tx: Transaction, owner: set) -> None:
        if tx.txid not in self.g.txs:
            self.g.txs[tx.txid] = {"satoshis": tx.out_value, "height": tx.block_height,
                                   "time": tx.timestamp}
        owner.add(("t", tx.txid))

    def _add_edge(self, src: str, dst: str, txid: str, slots: list[int], sat: int, owner: set) -> None:
        key = (src, dst)
        if key not in self.g.edges:
            self.g.edges[key] = {"txid": txid, "slots": slots, "satoshis": sat}
        owner.add(("e", src, dst))

    def _touch(self, addr: str, owner: set, pending: list[str], rollback: list[str]) -> None:
        owner.add(("a", addr))
        if addr not in self.g.addresses:
            rollback.extend(self._new_address(addr))
            pending.append(addr)

    def _link_inputs(self, tx, addrs, owner, pending, rollback):
        for a in addrs:
            slots = [s.slot_index for s in tx.inputs if s.address == a]
            self._touch(a, owner, pending, rollback)
            self._add_edge(a, tx.txid, tx.txid, slots, sum(tx.inputs[i].value for i in slots), owner)

    def _link_outputs(self, tx, addrs, owner, pending, rollback):
        for a in addrs:
            slots = [s.slot_index for s in tx.outputs if s.address == a]
            self._touch(a, owner, pending, rollback)
            self._add_edge(tx.txid, a, tx.txid, slots, sum(tx.outputs[i].value for i in slots), owner)

    # -- main loop

    def _expand(self, x: str) -> list[str]:
        owner = self.expansions.setdefault(x, set())
        pending: list[str] = []
        rollback: list[str] = []
        direction = "backwards_only" if x in self.backward_only_seeds else self.cfg.direction
        is_seed = x in self.seed_set
        for tx in self._context(x):
            ins = tx.input_addresses()
            outs = tx.output_addresses()
            x_in, x_out = x in ins, x in outs
            if direction == "back_and_forth":
                if self.cfg.sdd and is_seed and x_out and not x_in:
                    continue
                self._add_tx_node(tx, owner)
                self._link_inputs(tx, ins, owner, pending, rollback)
                self._link_outputs(tx, outs, owner, pending, rollback)
            elif direction == "forward_only":
                if not x_in:
                    continue
                self._add_tx_node(tx, owner)
                self._link_inputs(tx, [x], owner, pending, rollback)
                self._link_outputs(tx, outs, owner, pending, rollback)
            else:
                if not x_out or (self.cfg.sdd and is_seed):
                    continue
                self._add_tx_node(tx, owner)
                self._link_inputs(tx, ins, owner, pending, rollback)
                self._link_outputs(tx, [x], owner, pending, rollback)
        return rollback

    def _rollback(self, nodes: list[str]) -> None:
        """Turn co-cluster traced nodes into classifier stops and prune what only they supported."""
        needs_prune = False
        for a in dict.fromkeys(nodes):
            n = self.g.addresses.get(a)
            if n is None or n["kind"] not in (_QUEUED, EXPLORED):
                continue
            if a in self.expanded:
                needs_prune = True
            n["kind"] = CLASSIFIER_STOP
            n["classified_by"] = "classifier-cluster"
            n.pop("priority", None)
        if needs_prune:
            self._prune()

    def _prune(self) -> None:
        live: set[tuple] = set()
        q = deque()
        for s in self.seeds:
            live.add(("a", s))
            q.append(s)
        while q:
            a = q.popleft()
            node = self.g.addresses.get(a)
            if a not in self.expanded or node is None or node["kind"] in (TAGGED_STOP, CLASSIFIER_STOP):
                continue
            for el in self.expansions.get(a, ()):
                if el in live:
                    continue
                live.add(el)
                if el[0] == "a":
                    q.append(el[1])
        for a in list(self.g.addresses):
            if ("a", a) not in live:
                del self.g.addresses[a]
                self.expanded.discard(a)
                self.expansions.pop(a, None)
        for t in list(self.g.txs):
            if ("t", t) not in live:
                del self.g.txs[t]
        for k in list(self.g.edges):
            if ("e", *k) not in live:
                del self.g.edges[k]
        for a, els in self.expansions.items():
            self.expansions[a] = {el for el in els if el in live}

    def _limit_hit(self, t0: float) -> bool:
        if self.cfg.max_addresses is not None and len(self.g.addresses) >= self.cfg.max_addresses:
            return True
        if self.cfg.max_seconds is not None and time.perf_counter() - t0 >= self.cfg.max_seconds:
            return True
        return False

    def run(self) -> ExplorationGraph:
        t0 = time.perf_counter()
        ow_seeds = 0
        for s in self.seeds:
            if s in self.g.addresses:
                continue
            tag = lookup(self.tagdb, s, self.clusters) if self.tagdb is not None else None
            node = {"kind": _QUEUED, "tags": tag_details(tag), "cluster": self._cluster(s),
                    "seed": True}
            self.g.addresses[s] = node
            self.g.seeds.append(s)
            if not self.store.has_address(s):
                log.warning("SeedNotFound: seed %s has no transactions", s)
            if is_exploration_stop(tag):
                ow_seeds += 1
                if self.cfg.sdd or self.cfg.direction == "forward_only":
                    node["kind"] = SEED
                    continue
                self.backward_only_seeds.add(s)
            self._push(s)

        while self.heap:
            if self._limit_hit(t0):
                self.status = STATUS_LIMIT
                break
            _, _, x = heapq.heappop(self.heap)
            node = self.g.addresses.get(x)
            if node is None or node["kind"] != _QUEUED or x in self.expanded:
                continue
            self.expanded.add(x)
            node["kind"] = EXPLORED
            node.pop("priority", None)
            if node.get("seed"):
                self.explored_seeds.add(x)
            rollback = self._expand(x)
            if rollback:
                self._rollback(rollback)

        for a, n in self.g.addresses.items():
            if n["kind"] == _QUEUED:
                n["kind"] = UNEXPLORED
            n.pop("priority", None)
            if n.get("seed"):
                n["explored"] = a in self.explored_seeds
                n["kind"] = SEED
        runtime = time.perf_counter() - t0
        self.g.stats = {
            "seeds": len(self.seeds),
            "seeds_online_wallets": ow_seeds,
            "explored_seeds": len(self.explored_seeds),
            "components": len(self.g.components()),
            "addresses": len(self.g.addresses),
            "txes": len(self.g.txs),
            "unexplored": sum(1 for n in self.g.addresses.values()
                              if n["kind"] == UNEXPLORED or (n.get("seed") and not n["explored"]
                                                             and self.status == STATUS_LIMIT)),
            "tagged": sum(1 for n in self.g.addresses.values() if n["tags"]),
            "classifier_exchanges": sum(1 for n in self.g.addresses.values()
                                        if n["kind"] == CLASSIFIER_STOP),
            "classifier_calls": self.classifier_calls,
            "status": self.status,
            "runtime": runtime,
        }
        self.g.meta = {"config": {k: v for k, v in self.cfg.to_dict().items()}}
        return self.g


def explore(store: ChainStore, clusters, tagdb, model, seeds, config: ExplorationConfig,
            denylist=()) -> ExplorationGraph:
    """Build the exploration graph; stats land in graph.stats."""
    if not seeds:
        raise ValueError("at least one seed is required")
    if config.classifier_enabled and model is None:
        raise ValueError("classifier enabled but no model supplied")
    return _Explorer(store, clusters, tagdb, model, seeds, config, denylist).run()
