import random
import warnings

import pytest
from hypothesis import given, settings, strategies as st

from btctrace.chainstore import ChainStore
from btctrace.classifier import StaticClassifier
from btctrace.clustering import build_clusters
from btctrace.evaluation import (back_only_relation_fixture, filter_fixture, random_chain,
                                 tags_to_db, two_seed_fixture, two_seed_tagdb)
from btctrace.explorer import (CLASSIFIER_STOP, EXPLORED, SEED, TAGGED_STOP, UNEXPLORED,
                               ClassifierCache, ExplorationConfig, ExplorationGraph,
                               classify_address, compute_priority, explore)
from btctrace.tagdb import make_tag

from _util import mk_tx

NO_CLASSIFIER = ExplorationConfig(classifier_enabled=False)


def run_two_seed(**cfg):
    store, meta = two_seed_fixture()
    cm = build_clusters(store)
    g = explore(store, cm, two_seed_tagdb(meta), StaticClassifier(meta["classifier_exchanges"]),
                meta["seeds"], ExplorationConfig(**cfg))
    return g, meta


def test_two_seed_back_and_forth():
    g, meta = run_two_seed()
    assert sorted(g.addresses) == meta["baf_addresses"]
    assert sorted(g.txs) == meta["baf_txs"]
    assert g.address_kind("b") == CLASSIFIER_STOP
    assert g.address_kind("c") == TAGGED_STOP
    assert {a for a in "defi"} <= set(g.addresses)
    assert g.stats["classifier_exchanges"] == 1 and g.stats["tagged"] == 1


def test_two_seed_forward_only():
    g, meta = run_two_seed(direction="forward_only")
    assert sorted(g.addresses) == meta["fwd_addresses"]
    assert sorted(g.txs) == meta["fwd_txs"]
    assert not {a for a in "defi"} & set(g.addresses)


def test_two_seed_sdd_gives_same_graph():
    g, _ = run_two_seed()
    g_sdd, _ = run_two_seed(sdd=True)
    assert set(g.addresses) == set(g_sdd.addresses)
    assert set(g.txs) == set(g_sdd.txs) and set(g.edges) == set(g_sdd.edges)


def test_isolated_seed():
    store = ChainStore([mk_tx(1, [], [("A", 5)])])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = explore(store, None, None, None, ["lonely"], NO_CLASSIFIER)
    assert list(g.addresses) == ["lonely"] and not g.txs and not g.edges
    d = g.to_dict()
    assert len(d["nodes"]) == 1 and d["edges"] == []
    assert g.stats["explored_seeds"] == 1 and g.stats["components"] == 1


def test_requires_seeds_and_model():
    store = ChainStore([mk_tx(1, [], [("A", 5)])])
    with pytest.raises(ValueError):
        explore(store, None, None, None, [], NO_CLASSIFIER)
    with pytest.raises(ValueError):
        explore(store, None, None, None, ["A"], ExplorationConfig())


def test_classify_examples():
    db = tags_to_db([make_tag("M", "mixer", "bitcoinfog"), make_tag("C", "clipper", "clipsa")])
    cache = ClassifierCache()
    d = classify_address("M", db, None, None, cache)
    assert d.action == "tag-stop" and d.tag.owner.label == "bitcoinfog"
    d = classify_address("C", db, None, None, cache)
    assert d.action == "trace" and d.tag.owner.label == "clipsa"
    assert classify_address("U", db, None, None, cache).action == "trace"


def _pair_store():
    # X and Y co-spend, so they share a cluster
    return ChainStore([mk_tx(0, [], [("X", 10), ("Y", 10)]),
                       mk_tx(1, [("X", 10), ("Y", 10)], [("Z", 19)], height=2)])


@pytest.mark.parametrize("scope, first, calls_first", [("cluster", "Y", 1), ("address", "Y", 1),
                                                        ("cluster", "X", 2)])
def test_cluster_sibling_uses_cache(scope, first, calls_first):
    store = _pair_store()
    cm = build_clusters(store)
    model = StaticClassifier(["Y"])
    cache = ClassifierCache()
    assert classify_address(first, None, cm, model, cache, scope=scope).action == "classifier-stop"
    assert model.calls == calls_first
    other = "X" if first == "Y" else "Y"
    assert classify_address(other, None, cm, model, cache, scope=scope).action == "classifier-stop"
    assert model.calls == calls_first


def test_address_scope_is_order_dependent():
    cm = build_clusters(_pair_store())
    model = StaticClassifier(["Y"])
    assert classify_address("X", None, cm, model, ClassifierCache(), scope="address").action == "trace"
    assert classify_address("X", None, cm, model, ClassifierCache(), scope="cluster").action == \
        "classifier-stop"


def test_priority_formula():
    assert compute_priority(0) == 1.0
    assert compute_priority(9) == 0.1


def _priority_store(a_slots, b_slots):
    """s pays A and B; A and B then spend in transactions of the given sizes."""
    txs = [mk_tx(0, [], [("s", 10**8)]),
           mk_tx(1, [("s", 10**8)], [("A", 10**7), ("B", 8 * 10**7)], height=2)]
    for n, (who, slots) in enumerate((("A", a_slots), ("B", b_slots))):
        outs = [(f"{who}o{k}", 1000 + k) for k in range(slots - 4)]
        txs.append(mk_tx(2 + n, [(who, 10**7)], outs, height=3))
    return ChainStore(txs)


@pytest.mark.parametrize("a_slots, b_slots, first", [(10, 10000, "A"), (10000, 10, "B")])
def test_fewest_slots_pop_first(a_slots, b_slots, first):
    store = _priority_store(a_slots, b_slots)
    g = explore(store, None, None, None, ["s"], ExplorationConfig(classifier_enabled=False,
                                                                   max_addresses=4))
    assert g.stats["status"] == "LimitReached"
    other = "B" if first == "A" else "A"
    assert g.address_kind(first) == EXPLORED
    assert g.address_kind(other) == UNEXPLORED


def test_dot_colours():
    g, _ = run_two_seed()
    dot = g.to_dot()
    for a in "sg":
        assert f'"{a}" [shape=circle, style=filled, fillcolor="gray"' in dot
    for a in "bc":
        assert f'"{a}" [shape=circle, style=filled, fillcolor="black"' in dot
    assert dot.count("shape=box") == len(g.txs)


def test_export_deterministic(tmp_path):
    g1, _ = run_two_seed()
    g2, _ = run_two_seed()
    for fmt in ("json", "dot"):
        g1.export(tmp_path / f"a.{fmt}", fmt)
        g2.export(tmp_path / f"b.{fmt}", fmt)
        assert (tmp_path / f"a.{fmt}").read_bytes() == (tmp_path / f"b.{fmt}").read_bytes()
    again = ExplorationGraph.load(tmp_path / "a.json")
    assert again.to_json() == g1.to_json()


def test_filters():
    store, meta = filter_fixture()
    g = explore(store, build_clusters(store), None, None, meta["seeds"], NO_CLASSIFIER)
    assert meta["dust"]["txid"] not in g.txs
    assert meta["coinjoin"]["txid"] not in g.txs
    assert meta["near_dust_txid"] in g.txs
    assert not set(meta["coinjoin_participants"]) & set(g.addresses)
    off = explore(store, build_clusters(store), None, None, meta["seeds"],
                  ExplorationConfig(classifier_enabled=False, dust_filter_enabled=False,
                                    coinjoin_filter_enabled=False))
    assert meta["dust"]["txid"] in off.txs and meta["coinjoin"]["txid"] in off.txs


def test_denylist():
    g, meta = run_two_seed()
    store, _ = two_seed_fixture()
    t6 = meta["txids"]["T6"]
    g2 = explore(store, build_clusters(store), two_seed_tagdb(meta),
                 StaticClassifier(meta["classifier_exchanges"]), meta["seeds"],
                 ExplorationConfig(), denylist=[t6])
    assert t6 in g.txs and t6 not in g2.txs and "i" not in g2.addresses


def _online_wallet_store():
    return ChainStore([mk_tx(0, [], [("P", 10**6)]),
                       mk_tx(1, [("P", 10**6)], [("W", 9 * 10**5)], height=2),
                       mk_tx(2, [("W", 9 * 10**5)], [("R", 8 * 10**5)], height=3)])


@pytest.mark.parametrize("cfg, expected", [
    ({}, {"W", "P"}),
    ({"sdd": True}, {"W"}),
    ({"direction": "forward_only"}, {"W"}),
])
def test_online_wallet_seed(cfg, expected):
    store = _online_wallet_store()
    db = tags_to_db([make_tag("W", "onlinewallet", "blockchaininfo")])
    g = explore(store, build_clusters(store), db, None, ["W"],
                ExplorationConfig(classifier_enabled=False, **cfg))
    assert set(g.addresses) == expected
    assert g.stats["seeds_online_wallets"] == 1


def test_backwards_only():
    store, meta = back_only_relation_fixture()
    g = explore(store, build_clusters(store), tags_to_db(meta["tags"]), None, meta["seeds"],
                ExplorationConfig(direction="backwards_only", classifier_enabled=False))
    assert {"U", "X", "E"} <= set(g.addresses) and "Y" not in g.addresses
    assert g.address_kind("E") == TAGGED_STOP


def _rollback_store():
    # s pays x; x later co-spends with y, which the classifier flags
    return ChainStore([mk_tx(0, [], [("s", 10**6)]), mk_tx(3, [], [("y", 10**6)]),
                       mk_tx(1, [("s", 10**6)], [("x", 9 * 10**5)], height=2),
                       mk_tx(2, [("x", 9 * 10**5), ("y", 10**6)], [("z", 18 * 10**5)], height=3)])


@pytest.mark.parametrize("scope", ["cluster", "address"])
def test_rollback_prunes_expansion_of_reclassified_node(scope):
    store = _rollback_store()
    cm = build_clusters(store)
    g = explore(store, cm, None, StaticClassifier(["y"]), ["s"],
                ExplorationConfig(classifier_scope=scope))
    assert set(g.addresses) == {"s", "x"}
    assert g.address_kind("x") == CLASSIFIER_STOP
    assert set(g.txs) == {mk_tx(0, [], []).txid, mk_tx(1, [], []).txid}
    assert all("z" not in e and "y" not in e for e in g.edges)


def test_address_scope_rollback_reports_cluster_reclassification():
    store = _rollback_store()
    g = explore(store, build_clusters(store), None, StaticClassifier(["y"]), ["s"],
                ExplorationConfig(classifier_scope="address"))
    assert g.addresses["x"]["classified_by"] == "classifier-cluster"


# -- properties ---------------------------------------------------------------

def random_setup(seed, max_tx=400):
    rng = random.Random(seed)
    store = random_chain(rng, rng.randint(1, max_tx), coinjoin_rate=0.05)
    cm = build_clusters(store)
    addrs = store.addresses()
    seeds = rng.sample(addrs, min(len(addrs), rng.randint(1, 3)))
    pos = rng.sample(addrs, len(addrs) // 20)
    tagged = rng.sample(addrs, len(addrs) // 20)
    tags = [make_tag(a, rng.choice(["exchange", "clipper", "mixer", "ransomware", "onlinewallet"]),
                     f"l{i}") for i, a in enumerate(tagged)]
    return store, cm, tags_to_db(tags, cm), pos, seeds, rng


def graph_sets(g):
    return set(g.addresses), set(g.txs), set(g.edges)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_subgraph_dominance(seed, sdd):
    store, cm, db, pos, seeds, _ = random_setup(seed)
    full = graph_sets(explore(store, cm, db, StaticClassifier(pos), seeds,
                              ExplorationConfig(sdd=sdd)))
    for d in ("forward_only", "backwards_only"):
        part = graph_sets(explore(store, cm, db, StaticClassifier(pos), seeds,
                                  ExplorationConfig(direction=d, sdd=sdd)))
        assert all(p <= f for p, f in zip(part, full))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["back_and_forth", "forward_only",
                                                  "backwards_only"]),
       st.sampled_from(["cluster", "address"]), st.one_of(st.none(), st.integers(1, 60)))
def test_graph_invariants(seed, direction, scope, limit):
    store, cm, db, pos, seeds, _ = random_setup(seed)
    cfg = ExplorationConfig(direction=direction, classifier_scope=scope, max_addresses=limit)
    g = explore(store, cm, db, StaticClassifier(pos), seeds, cfg)
    # bipartite, one edge per (address, tx) pair and direction
    for (src, dst), e in g.edges.items():
        assert (src in g.addresses) != (src in g.txs)
        assert (dst in g.addresses) != (dst in g.txs)
        assert e["txid"] in (src, dst)
    # every component holds a seed
    for comp in g.components():
        assert comp & set(g.seeds)
    # stops are frontier nodes: every tx touches an expanded address
    touching = {}
    for (src, dst) in g.edges:
        tx, addr = (dst, src) if src in g.addresses else (src, dst)
        touching.setdefault(tx, set()).add(addr)
    for tx in g.txs:
        kinds = {g.address_kind(a) for a in touching.get(tx, ())}
        expanded = {a for a in touching.get(tx, ())
                    if g.address_kind(a) == EXPLORED
                    or (g.address_kind(a) == SEED and g.addresses[a]["explored"])}
        assert expanded, kinds
    # determinism
    again = explore(store, cm, db, StaticClassifier(pos), seeds, cfg)
    assert again.to_json() == g.to_json() and again.to_dot() == g.to_dot()
    if limit is None:
        assert g.stats["status"] == "Complete"
