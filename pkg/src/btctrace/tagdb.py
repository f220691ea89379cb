"""Tag database: import, per-address disambiguation and cluster propagation."""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass
from typing import Iterable
from urllib.parse import urlparse

log = logging.getLogger(__name__)

CATEGORY_CLASS = {
    "sextortion": "abuse", "miscabuse": "abuse", "terrorism": "abuse", "theft": "abuse",
    "scam": "abuse", "ponzi": "abuse", "state-sponsored": "abuse", "drugtrafficking": "abuse",
    "mining": "service", "exchange": "service", "gambling": "service", "onlinewallet": "service",
    "defi": "service", "mixer": "service", "service": "service", "tormarket": "service",
    "payment": "service",
    "mixuser": "individual", "username": "individual",
    "ransomware": "malware", "clipper": "malware", "malware": "malware",
    "bankingtrojan": "malware", "cryptojacking": "malware", "webskimming": "malware",
    "donation": "benign", "miscbenign": "benign", "usgov": "benign",
}
CATEGORY_ALIASES = {"user": "username"}
CLASSES = ("malware", "abuse", "service", "individual", "benign")

SERVICE_CATEGORIES = frozenset({
    "exchange", "onlinewallet", "mixer", "tormarket", "gambling",
    "payment", "mining", "service", "defi",
})

TRUST_LEVELS = ("trusted", "crowd")
ALIAS_MAX_DISTANCE = 2

CSV_FIELDS = ["address", "class", "category", "label", "subtype", "urls", "trust"]


class TagError(Exception):
    pass


class MalformedRow(TagError):
    def __init__(self, row_no: int, reason: str):
        super().__init__(f"row {row_no}: {reason}")
        self.row_no = row_no
        self.reason = reason


class UnknownCategory(TagError):
    def __init__(self, row_no: int, category: str):
        super().__init__(f"row {row_no}: unknown category {category!r}")
        self.row_no = row_no
        self.category = category


@dataclass(frozen=True, order=True)
class TagRecord:
    address: str
    cls: str
    category: str
    label: str
    subtype: str = ""
    urls: tuple[str, ...] = ()
    trust: str = "trusted"

    @property
    def is_service(self) -> bool:
        return self.category in SERVICE_CATEGORIES

    @property
    def key(self) -> str:
        return f"{self.category}:{self.label}"


@dataclass(frozen=True)
class ResolvedTag:
    owner: TagRecord
    beneficiary: TagRecord | None = None
    provenance: str = "direct"

    def records(self) -> list[TagRecord]:
        return [self.owner] + ([self.beneficiary] if self.beneficiary else [])

    def keys(self) -> list[str]:
        return [r.key for r in self.records()]

    def describe(self) -> str:
        if self.beneficiary is None:
            return self.owner.key
        return f"{self.owner.key}/{self.beneficiary.key}"


@dataclass(frozen=True)
class Unresolvable:
    reason: str
    records: tuple[TagRecord, ...] = ()


def make_tag(address: str, category: str, label: str, subtype: str = "",
             urls: Iterable[str] = (), trust: str = "trusted") -> TagRecord:
    category = CATEGORY_ALIASES.get(category, category)
    if category not in CATEGORY_CLASS:
        raise UnknownCategory(0, category)
    return TagRecord(address, CATEGORY_CLASS[category], category, label, subtype,
                     tuple(urls), trust)


def is_exploration_stop(tag: ResolvedTag | None) -> bool:
    return tag is not None and tag.owner.category in SERVICE_CATEGORIES


# -- import --------------------------------------------------------------------

def parse_rows(rows: Iterable[dict], start: int = 2) -> dict[str, list[TagRecord]]:
    out: dict[str, list[TagRecord]] = {}
    for row_no, row in enumerate(rows, start=start):
        if None in row or any(row.get(k) is None for k in ("address", "category", "label")):
            raise MalformedRow(row_no, "wrong number of columns")
        addr = row["address"].strip()
        category = row["category"].strip().lower()
        category = CATEGORY_ALIASES.get(category, category)
        if category not in CATEGORY_CLASS:
            raise UnknownCategory(row_no, category)
        cls = (row.get("class") or "").strip().lower()
        if cls != CATEGORY_CLASS[category]:
            raise MalformedRow(row_no, f"class {cls!r} does not match category {category!r}")
        label = row["label"].strip()
        if not addr or not label:
            raise MalformedRow(row_no, "address and label must be non-empty")
        trust = (row.get("trust") or "trusted").strip().lower()
        if trust not in TRUST_LEVELS:
            raise MalformedRow(row_no, f"trust must be one of {TRUST_LEVELS}")
        urls = tuple(u for u in (row.get("urls") or "").split("|") if u)
        rec = TagRecord(addr, cls, category, label, (row.get("subtype") or "").strip(), urls, trust)
        out.setdefault(addr, []).append(rec)
    return out


def import_tags(path) -> dict[str, list[TagRecord]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return {}
        missing = set(CSV_FIELDS) - set(reader.fieldnames)
        if missing:
            raise MalformedRow(1, f"missing columns {sorted(missing)}")
        return parse_rows(reader)


def write_tags(path, records: Iterable[TagRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in sorted(records):
            w.writerow([r.address, r.cls, r.category, r.label, r.subtype, "|".join(r.urls), r.trust])


# -- disambiguation ------------------------------------------------------------

def _effective_trust(rec: TagRecord, source_trust: dict[str, str]) -> str:
    for url in rec.urls:
        host = urlparse(url).hostname or url
        level = source_trust.get(host)
        if level:
            return level
    return rec.trust


def _more_informative(rec: TagRecord) -> tuple:
    # Smaller sorts first: subtype present, longer label, more sources, then canonical order.
    return (not rec.subtype, -len(rec.label), -len(rec.urls), rec)


def _merge_mining(recs: list[TagRecord]) -> TagRecord:
    labels = sorted({lbl for r in recs for lbl in r.label.split(",")})
    urls = sorted({u for r in recs for u in r.urls})
    subtypes = sorted({r.subtype for r in recs if r.subtype})
    trust = "trusted" if any(r.trust == "trusted" for r in recs) else "crowd"
    return TagRecord(recs[0].address, "service", "mining", ",".join(labels),
                     subtypes[0] if subtypes else "", tuple(urls), trust)


def disambiguate_address(tags: list[TagRecord], source_trust: dict[str, str] | None = None
                         ) -> ResolvedTag | Unresolvable:
    """Reduce all tags of one address to a single resolved tag, if possible."""
    if not tags:
        return Unresolvable("no tags")
    source_trust = source_trust or {}
    groups: dict[tuple[str, str], list[TagRecord]] = {}
    for rec in sorted(tags):
        groups.setdefault((rec.category, rec.label), []).append(rec)
    recs = [min(g, key=_more_informative) for _, g in sorted(groups.items())]

    if len(recs) > 1:
        trusted = [r for r in recs if _effective_trust(r, source_trust) != "crowd"]
        if trusted:
            recs = trusted
    if len(recs) > 1 and all(r.category == "mining" for r in recs):
        recs = [_merge_mining(recs)]
    if len(recs) == 1:
        return ResolvedTag(recs[0])

    services = [r for r in recs if r.is_service]
    others = [r for r in recs if not r.is_service]
    if len(services) == 1 and len(others) == 1:
        return ResolvedTag(services[0], others[0])
    if len(services) > 1:
        return Unresolvable("multiple service tags", tuple(recs))
    return Unresolvable("conflicting non-service tags", tuple(recs))


# -- cluster propagation -------------------------------------------------------

def _norm_label(label: str) -> str:
    return re.sub(r"[\s._\-:/,]+", "", label.lower())


def edit_distance(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def are_aliases(a: TagRecord, b: TagRecord, max_distance: int = ALIAS_MAX_DISTANCE) -> bool:
    return (a.category == b.category
            and edit_distance(_norm_label(a.label), _norm_label(b.label)) <= max_distance)


def _merge_aliases(recs: list[TagRecord], max_distance: int) -> TagRecord | None:
    """Single representative if every pair is an alias pair, else None."""
    uniq = sorted(set(recs))
    for i, a in enumerate(uniq):
        for b in uniq[i + 1:]:
            if not are_aliases(a, b, max_distance):
                return None
    return min(uniq, key=lambda r: (-len(r.label), r.label, r))


class TagDatabase:
    def __init__(self, alias_max_distance: int = ALIAS_MAX_DISTANCE):
        self.direct: dict[str, ResolvedTag] = {}
        self.cluster_tags: dict[int, ResolvedTag] = {}
        self.unresolved: list[tuple[str, Unresolvable]] = []
        self.alias_max_distance = alias_max_distance
        self.alias_merges: list[tuple[int, tuple[str, ...]]] = []

    def __len__(self) -> int:
        return len(self.direct)

    def add(self, tag: ResolvedTag) -> None:
        self.direct[tag.owner.address] = tag

    def records(self) -> list[TagRecord]:
        return [r for addr in sorted(self.direct) for r in self.direct[addr].records()]

    def write_review(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS + ["reason"])
            for scope, unres in self.unresolved:
                for r in unres.records:
                    w.writerow([r.address, r.cls, r.category, r.label, r.subtype,
                                "|".join(r.urls), r.trust, f"{scope}: {unres.reason}"])


def build_tag_db(raw: dict[str, list[TagRecord]], source_trust: dict[str, str] | None = None,
                 alias_max_distance: int = ALIAS_MAX_DISTANCE) -> TagDatabase:
    db = TagDatabase(alias_max_distance)
    for addr in sorted(raw):
        res = disambiguate_address(raw[addr], source_trust)
        if isinstance(res, Unresolvable):
            db.unresolved.append((f"address {addr}", res))
        else:
            db.add(res)
    return db


def _resolve_cluster(tags: list[ResolvedTag], max_distance: int
                     ) -> tuple[TagRecord, TagRecord | None] | Unresolvable:
    owners = {t.owner for t in tags}
    benefs = {t.beneficiary for t in tags if t.beneficiary is not None}
    services = sorted({r for r in owners if r.is_service}, key=lambda r: r.key)
    others = sorted({r for r in owners if not r.is_service} | benefs)
    service_keys = sorted({r.key for r in services})
    if len(service_keys) > 1:
        return Unresolvable("multiple service tags in cluster", tuple(sorted(owners | benefs)))
    other = None
    if others:
        by_key = {r.key: r for r in others}
        other = _merge_aliases(list(by_key.values()), max_distance)
        if other is None:
            return Unresolvable("conflicting non-service tags in cluster",
                                tuple(sorted(owners | benefs)))
    if services:
        return services[0], other
    return other, None


def propagate_to_clusters(db: TagDatabase, clusters) -> TagDatabase:
    """Attach a propagated tag to every cluster whose direct tags agree."""
    by_cluster: dict[int, list[ResolvedTag]] = {}
    for addr in sorted(db.direct):
        by_cluster.setdefault(clusters.cluster_of(addr), []).append(db.direct[addr])
    db.cluster_tags = {}
    for cid in sorted(by_cluster):
        tags = by_cluster[cid]
        res = _resolve_cluster(tags, db.alias_max_distance)
        if isinstance(res, Unresolvable):
            db.unresolved.append((f"cluster {cid}", res))
            continue
        owner, benef = res
        distinct = {r.key for t in tags for r in t.records()}
        if len(distinct) > len([x for x in (owner, benef) if x]):
            db.alias_merges.append((cid, tuple(sorted(distinct))))
        db.cluster_tags[cid] = ResolvedTag(owner, benef, "cluster-propagated")
    return db


def lookup(db: TagDatabase, address: str, clusters=None) -> ResolvedTag | None:
    tag = db.direct.get(address)
    if tag is not None:
        return tag
    if clusters is None or not db.cluster_tags:
        return None
    return db.cluster_tags.get(clusters.cluster_of(address))
