"""Relation extraction: directed paths between seeds and tagged entities."""
from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, field

from .explorer import ORACLE, ExplorationGraph
from .tagdb import SERVICE_CATEGORIES, lookup

SEED_TO_ENTITY = "seed_to_entity"
ENTITY_TO_SEED = "entity_to_seed"
EXPLORATION = "exploration"
MI_ON_SEEDS = "mi-clustering-on-seeds"

ORACLE_SUBTYPE = "C&C signaling"


class SeedMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Relation:
    seed: str
    seed_cluster: str
    target: str
    target_tag: tuple[str, str]
    role: str
    direction: str
    path: tuple[str, ...]
    path_value: int
    discovery: str = EXPLORATION

    @property
    def tag(self) -> str:
        return f"{self.target_tag[0]}:{self.target_tag[1]}"

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.seed_cluster, self.tag, self.direction)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "seed_cluster": self.seed_cluster, "target": self.target,
                "tag": self.tag, "role": self.role, "direction": self.direction,
                "path": list(self.path), "path_value": self.path_value,
                "discovery": self.discovery}


@dataclass
class RelationReport:
    seeds: list[str]
    relations: list[Relation] = field(default_factory=list)     # one per key
    annex: list[Relation] = field(default_factory=list)         # every (seed, target, tag, direction)
    campaign_tags: list[str] = field(default_factory=list)

    def keys(self) -> set[tuple[str, str, str]]:
        return {r.key for r in self.relations}

    def tags(self) -> list[str]:
        """Distinct related tags, '*' marking those found only by clustering on seeds."""
        by_tag: dict[str, set[str]] = {}
        for r in self.annex:
            by_tag.setdefault(r.tag, set()).add(r.discovery)
        return sorted(t if EXPLORATION in d else t + "*" for t, d in by_tag.items())

    def write_table(self, path, family: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            tags = self.tags()
            w.writerow([family, len(tags), *tags])

    def to_dict(self) -> dict:
        return {"seeds": sorted(self.seeds), "campaign_tags": self.campaign_tags,
                "relations": [r.to_dict() for r in self.relations],
                "annex": [r.to_dict() for r in self.annex]}

    def write_annex(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")


def _tag_key(d: dict) -> str:
    return f"{d['category']}:{d['label']}"


def apply_oracles(graph: ExplorationGraph, oracles: dict, store) -> ExplorationGraph:
    """Copy of the graph with every oracle-positive address tagged malware:<family>."""
    g = graph.copy()
    for addr in sorted(g.addresses):
        node = g.addresses[addr]
        for family in sorted(oracles):
            res = oracles[family](store, addr)
            if not res.is_signaling:
                continue
            tag = {"role": "oracle", "category": "malware", "label": family,
                   "subtype": ORACLE_SUBTYPE, "provenance": "oracle"}
            if tag not in node["tags"]:
                node["tags"].append(tag)
            node.setdefault("oracle", {})[family] = [e.to_dict() for e in res.evidence]
            if not node.get("seed"):
                node["kind"] = ORACLE
    return g


def _bfs(start: str, adj: dict[str, list[str]]) -> dict[str, str | None]:
    """Parent pointers of a breadth-first search with sorted neighbor order."""
    parent: dict[str, str | None] = {start: None}
    q = deque([start])
    while q:
        u = q.popleft()
        for v in adj.get(u, ()):
            if v not in parent:
                parent[v] = u
                q.append(v)
    return parent


def _path_to(parent: dict, node: str) -> list[str]:
    out = []
    while node is not None:
        out.append(node)
        node = parent[node]
    return out[::-1]


def _node_tags(graph: ExplorationGraph, addr: str, tagdb, clusters) -> list[dict]:
    tags = list(graph.addresses[addr]["tags"])
    if tagdb is not None:
        t = lookup(tagdb, addr, clusters)
        if t is not None:
            for role, rec in (("owner", t.owner), ("beneficiary", t.beneficiary)):
                if rec is None:
                    continue
                d = {"role": role, "category": rec.category, "label": rec.label,
                     "subtype": rec.subtype, "provenance": t.provenance}
                if all(_tag_key(x) != _tag_key(d) for x in tags):
                    tags.append(d)
    return tags


def campaign_tags(graph: ExplorationGraph, tagdb=None, clusters=None, families=()) -> set[str]:
    """Tags that describe the campaign itself: non-service seed tags and oracle families."""
    keys = {f"malware:{f}" for f in families}
    for s in graph.seeds:
        for d in _node_tags(graph, s, tagdb, clusters):
            if d["category"] not in SERVICE_CATEGORIES:
                keys.add(_tag_key(d))
    return keys


def find_relations(graph: ExplorationGraph, tagdb=None, oracles: dict | None = None,
                   store=None, clusters=None) -> RelationReport:
    """Every tagged node reachable from a seed along, or against, edge direction."""
    if oracles:
        if store is None:
            raise ValueError("oracles need the chain store")
        graph = apply_oracles(graph, oracles, store)
    families = sorted(oracles) if oracles else sorted(
        {d["label"] for n in graph.addresses.values() for d in n["tags"] if d.get("role") == "oracle"})
    camp = campaign_tags(graph, tagdb, clusters, families)
    seed_set = set(graph.seeds)

    targets: dict[str, list[dict]] = {}
    for addr in sorted(graph.addresses):
        if addr in seed_set:
            continue
        tags = [d for d in _node_tags(graph, addr, tagdb, clusters) if _tag_key(d) not in camp]
        if tags:
            targets[addr] = tags

    out_adj = graph.out_neighbors()
    in_adj = graph.in_neighbors()
    annex: list[Relation] = []
    for seed in sorted(seed_set):
        sc = str(graph.addresses[seed].get("cluster") or seed)
        for d in _node_tags(graph, seed, tagdb, clusters):
            if _tag_key(d) not in camp:
                annex.append(Relation(seed, sc, seed, (d["category"], d["label"]), d["role"],
                                      SEED_TO_ENTITY, (), 0, MI_ON_SEEDS))
        for direction, adj in ((SEED_TO_ENTITY, out_adj), (ENTITY_TO_SEED, in_adj)):
            parent = _bfs(seed, adj)
            for target in sorted(parent):
                if target not in targets or target == seed:
                    continue
                path = _path_to(parent, target)
                if direction == ENTITY_TO_SEED:
                    path = path[::-1]
                last = (path[-2], path[-1])
                value = graph.edges[last]["satoshis"]
                for d in targets[target]:
                    annex.append(Relation(seed, sc, target, (d["category"], d["label"]),
                                          d["role"], direction, tuple(path), value))

    best: dict[tuple, Relation] = {}
    for r in annex:
        cur = best.get(r.key)
        rank = (r.discovery == MI_ON_SEEDS, len(r.path), r.path, r.seed, r.target)
        if cur is None or rank < (cur.discovery == MI_ON_SEEDS, len(cur.path), cur.path,
                                  cur.seed, cur.target):
            best[r.key] = r
    annex.sort(key=lambda r: (r.seed, r.target, r.tag, r.direction, r.path))
    return RelationReport(sorted(seed_set), [best[k] for k in sorted(best)], annex, sorted(camp))


def diff_reports(a: RelationReport, b: RelationReport) -> dict:
    if sorted(a.seeds) != sorted(b.seeds):
        raise SeedMismatch("reports were produced from different seed sets")
    ka, kb = a.keys(), b.keys()
    return {"added": sorted(kb - ka), "removed": sorted(ka - kb)}


def relation_keys_without_seed_cluster(report: RelationReport) -> set[tuple[str, str]]:
    return {(r.tag, r.direction) for r in report.relations}
