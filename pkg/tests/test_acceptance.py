"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""
import hashlib
import json
import random

import networkx as nx
import numpy as np
import pytest

from btctrace.classifier import (ForestParams, ModelClassifier, StaticClassifier, cross_validate,
                                 evaluate, fit_model, load_model, predict_raw)
from btctrace.cli import main
from btctrace.clustering import build_clusters, detect_coinjoin
from btctrace.evaluation import (EPSILONS, ChainBuilder, economy_chain, economy_dataset,
                                 filter_fixture, plant_cerber, plant_glupteba, random_chain,
                                 relation_rich_fixture, run_ablation, run_epsilon_study,
                                 tags_to_db, two_seed_fixture, two_seed_tagdb)
from btctrace.explorer import ExplorationConfig, explore
from btctrace.oracles import GluptebaKeys, cerber_oracle, glupteba_oracle, pony_oracle
from btctrace.relations import find_relations
from btctrace.tagdb import make_tag

KEY = bytes(range(32))


# -- 1 ------------------------------------------------------------------------

def test_criterion_01_two_seed_reproduction(criterion):
    c = criterion(1, "two-seed example reproduction")
    store, meta = two_seed_fixture()
    cm = build_clusters(store)
    db = two_seed_tagdb(meta)
    graphs, reports = {}, {}
    for d in ("back_and_forth", "forward_only"):
        graphs[d] = explore(store, cm, db, StaticClassifier(meta["classifier_exchanges"]),
                            meta["seeds"], ExplorationConfig(direction=d))
        reports[d] = find_relations(graphs[d], db, clusters=cm)
    baf, fwd = graphs["back_and_forth"], graphs["forward_only"]
    ok = (sorted(baf.addresses) == meta["baf_addresses"] and sorted(baf.txs) == meta["baf_txs"]
          and sorted(fwd.addresses) == meta["fwd_addresses"] and sorted(fwd.txs) == meta["fwd_txs"]
          and all(r.tags() == ["exchange:poloniex"] for r in reports.values())
          and all("b" not in {x.target for x in r.annex} for r in reports.values()))
    c.check(ok, f"back-and-forth {len(baf.addresses)} addresses, forward-only "
                f"{len(fwd.addresses)}, relation tags {reports['forward_only'].tags()}",
            limit_s=1.0)


# -- 2 ------------------------------------------------------------------------

def test_criterion_02_subgraph_dominance(criterion):
    c = criterion(2, "subgraph dominance")
    violations = []
    n_chains = 200
    for k in range(n_chains):
        rng = random.Random(10_000 + k)
        store = random_chain(rng, rng.randint(1, 2000), coinjoin_rate=0.03)
        cm = build_clusters(store)
        addrs = store.addresses()
        seeds = rng.sample(addrs, min(len(addrs), rng.randint(1, 3)))
        positives = rng.sample(addrs, len(addrs) // 20)
        tags = [make_tag(a, rng.choice(["exchange", "mixer", "clipper", "onlinewallet"]), f"l{i}")
                for i, a in enumerate(rng.sample(addrs, len(addrs) // 20))]
        db = tags_to_db(tags, cm)
        sets = {}
        for d in ("back_and_forth", "forward_only"):
            g = explore(store, cm, db, StaticClassifier(positives), seeds,
                        ExplorationConfig(direction=d))
            sets[d] = (set(g.addresses), set(g.txs), set(g.edges))
        if not all(f <= b for f, b in zip(sets["forward_only"], sets["back_and_forth"])):
            violations.append(k)
    c.check(not violations, f"{n_chains} chains, {len(violations)} violations {violations[:5]}",
            limit_s=120)


# -- 3 ------------------------------------------------------------------------

def test_criterion_03_clustering_oracle(criterion):
    c = criterion(3, "clustering oracle equivalence")
    mismatches, coinjoins, leaks = 0, 0, 0
    n_chains = 100
    for k in range(n_chains):
        rng = random.Random(20_000 + k)
        store = random_chain(rng, rng.randint(1, 1000), coinjoin_rate=0.1)
        cm = build_clusters(store)
        g = nx.Graph()
        g.add_nodes_from(store.addresses())
        for tx in store:
            if tx.is_coinbase or detect_coinjoin(tx):
                continue
            ins = tx.input_addresses()
            g.add_edges_from((ins[0], a) for a in ins[1:])
        brute = sorted(sorted(comp) for comp in nx.connected_components(g))
        ours = sorted(sorted(m) for m in cm.clusters())
        mismatches += ours != brute
        # a coinjoin may only join addresses already linked by some other transaction
        for tx in store:
            if detect_coinjoin(tx):
                coinjoins += 1
                ins = tx.input_addresses()
                leaks += any(cm.cluster_of(a) == cm.cluster_of(ins[0]) and
                             not nx.has_path(g, a, ins[0]) for a in ins[1:])
    c.check(mismatches == 0 and leaks == 0 and coinjoins > 0,
            f"{n_chains} chains, {mismatches} mismatches, {coinjoins} coinjoins, {leaks} merged")


# -- 4 ------------------------------------------------------------------------

def test_criterion_04_oracle_ground_truth(criterion):
    c = criterion(4, "oracle ground truth")
    planted = [{"kind": k, "count": 20}
               for k in ("cerber_cycle", "pony_pair_series", "glupteba_opreturn")]
    eco = economy_chain(1, 6000, 4, 16000, 200_000, planted, KEY)
    store = eco.store
    keys = GluptebaKeys((KEY,))
    oracles = {"cerber_cycle": cerber_oracle, "pony_pair_series": pony_oracle,
               "glupteba_opreturn": lambda s, a: glupteba_oracle(s, a, keys)}
    signalers = {kind: {p["address"] for p in eco.planted if p["kind"] == kind} for kind in oracles}
    planted_addrs = set().union(*signalers.values())
    background = [a for a in store.addresses() if a not in planted_addrs]
    recall = {k: sum(oracles[k](store, a).is_signaling for a in signalers[k]) / len(signalers[k])
              for k in oracles}
    fp = {k: sum(oracles[k](store, a).is_signaling for a in background) for k in oracles}
    pony_rate = fp["pony_pair_series"] / len(background)
    ok = (len(background) >= 10_000 and all(len(v) >= 20 for v in signalers.values())
          and all(r == 1.0 for r in recall.values()) and fp["cerber_cycle"] == 0
          and fp["glupteba_opreturn"] == 0 and pony_rate <= 0.001)
    c.check(ok, f"{len(background)} background addresses, recall {recall}, "
                f"cerber FP {fp['cerber_cycle']}, glupteba FP {fp['glupteba_opreturn']}, "
                f"pony FP rate {pony_rate:.5f}", limit_s=120)


# -- 5 ------------------------------------------------------------------------

def _payload_store(payload):
    b = ChainBuilder(50)
    g = b.address()
    b.coinbase(g, 10**8, 1)
    b.tx([(g, 10**8)], [("data", payload, 0), (b.address(), 10**8 - 1000)], 2)
    return b.store(), g


def test_criterion_05_exactness_probes(criterion):
    c = criterion(5, "exactness probes")
    b = ChainBuilder(40)
    ok_c = plant_cerber(b, 10, cycles=1)
    bad_c = plant_cerber(b, 20, cycles=1, return_delta=-1)
    store = b.store()
    cerber_ok = cerber_oracle(store, ok_c["address"]).is_signaling and \
        not cerber_oracle(store, bad_c["address"]).is_signaling

    b = ChainBuilder(41)
    p = plant_glupteba(b, 10, KEY)
    keys = GluptebaKeys((KEY,))
    base_ok = glupteba_oracle(b.store(), p["address"], keys).is_signaling
    raw = bytes.fromhex(p["payload"])
    ct_len = len(raw) - 12 - 16
    survivors = 0
    for bit in range(ct_len * 8):
        flipped = bytearray(raw)
        flipped[12 + bit // 8] ^= 1 << (bit % 8)
        s, g = _payload_store(flipped.hex())
        survivors += glupteba_oracle(s, g, keys, strict=True).is_signaling
    s, g = _payload_store(p["payload"][:54])
    gate_ok = not glupteba_oracle(s, g, keys, strict=True).is_signaling
    s, g = _payload_store(p["payload"])
    full_ok = glupteba_oracle(s, g, keys, strict=True).is_signaling
    ok = cerber_ok and base_ok and full_ok and survivors == 0 and gate_ok
    c.check(ok, f"cerber 1-satoshi flip {cerber_ok}, {ct_len * 8} ciphertext bit flips with "
                f"{survivors} survivors, 54-hex rejected {gate_ok}")


# -- 6 and 8 share the trained model ---------------------------------------------

@pytest.fixture(scope="module")
def trained():
    eco = economy_chain(5, 3000, 5, 20000, 150_000)
    cm = build_clusters(eco.store)
    ds = economy_dataset(eco, cm, 3000, seed=1).split(0.2, seed=1)
    Xtr, ytr = ds.train()
    model = fit_model(Xtr, ytr, ForestParams(), seed=1)
    return ds, model


def test_criterion_06_classifier(criterion, trained, tmp_path):
    c = criterion(6, "classifier")
    ds, model = trained
    n_pos, n_neg = int(ds.y.sum()), int(len(ds.y) - ds.y.sum())
    Xte, yte = ds.test()
    held = evaluate(model, Xte, yte)
    cv = cross_validate(ds.X, ds.y, 5, ForestParams(), seed=2)
    model.save(tmp_path / "m.json")
    again = load_model(tmp_path / "m.json")
    rng = np.random.default_rng(6)
    rows = ds.X[rng.integers(0, len(ds.y), 1000)] * rng.uniform(0.5, 2.0, size=(1000, ds.X.shape[1]))
    identical = all(predict_raw(model, v) == predict_raw(again, v) for v in rows)
    p = model.params
    ok = (min(n_pos, n_neg) >= 1000 and (p.n_trees, p.max_depth, p.threshold) == (600, 40, 0.5)
          and held["f1"] >= 0.95 and len(cv["folds"]) == 5 and identical)
    folds = ", ".join(f"{f['f1']:.3f}" for f in cv["folds"])
    c.check(ok, f"{n_pos}/{n_neg} per class, held-out F1 {held['f1']:.4f}, CV fold F1 [{folds}], "
                f"save/load identical on 1000 vectors {identical}")


# -- 7 ------------------------------------------------------------------------

def test_criterion_07_epsilon_study(criterion):
    c = criterion(7, "epsilon-study shape")
    store, meta = relation_rich_fixture()
    cm = build_clusters(store)
    db = tags_to_db(meta["tags"], cm)
    res = run_epsilon_study(store, cm, db, StaticClassifier(meta["exchanges"]), meta["seeds"],
                            repeats=20)
    curve = {(r["mode"], r["epsilon"]): r["mean_f1"] for r in res["curve"]}
    points = (0.0,) + EPSILONS
    worst_rise = max(curve[(m, b)] - curve[(m, a)]
                     for m in ("inject_cfp", "inject_cfn") for a, b in zip(points, points[1:]))
    ok = (curve[("inject_cfp", 0.0)] == 1.0 == curve[("inject_cfn", 0.0)]
          and worst_rise <= 0.02
          and curve[("inject_cfp", 0.4)] <= curve[("inject_cfn", 0.4)])
    c.check(ok, f"{res['baseline_relations']} baseline relations, F1 at 0.40 cfp "
                f"{curve[('inject_cfp', 0.4)]:.3f} cfn {curve[('inject_cfn', 0.4)]:.3f}, "
                f"largest step rise {worst_rise:+.3f}", limit_s=600)


# -- 8 ------------------------------------------------------------------------

def test_criterion_08_ablation(criterion, trained):
    c = criterion(8, "ablation direction")
    _, model = trained
    eco = economy_chain(11, 15000, 5, 50000, 200_000,
                        [{"kind": "ransomware_cashout", "count": 3, "victims": 20}])
    cm = build_clusters(eco.store)
    seeds = [p["address"] for p in eco.planted]
    res = run_ablation(eco.store, cm, tags_to_db([]), ModelClassifier(model, eco.store, cm), seeds)
    e, d = res["enabled"], res["disabled"]
    ok = (d["addresses"] > e["addresses"] and d["runtime"] > e["runtime"]
          and d["status"] == "LimitReached" and not e["limit_hit"])
    c.check(ok, f"enabled {e['addresses']} addresses in {e['runtime']:.2f} s, disabled "
                f"{d['addresses']} addresses in {d['runtime']:.2f} s ({d['status']})")


# -- 9 ------------------------------------------------------------------------

def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _pipeline(root, spec_path):
    """Every CLI stage once; returns {file name: digest} for all artifacts."""
    root.mkdir()
    run = lambda *a: main([str(x) for x in a])
    assert run("synth", "--spec", spec_path, "--seed", 12, "--out-dir", root / "synth") == 0
    m = json.loads((root / "synth" / "manifest.json").read_text())
    (root / "pos.txt").write_text("\n".join(x["hot"] for x in m["exchanges"]) + "\n")
    (root / "neg.txt").write_text("\n".join(u[0] for u in m["users"]) + "\n")
    cashout = [p["address"] for p in m["planted"] if p["kind"] == "ransomware_cashout"]
    (root / "seeds.txt").write_text("\n".join(cashout) + "\n")
    (root / "exchanges.txt").write_text(
        "\n".join(a for x in m["exchanges"] for a in x["members"]) + "\n")
    ch = root / "chain.jsonl"
    steps = [
        ("ingest", "--chain", root / "synth" / "chain.jsonl", "--out", ch),
        ("cluster", "--chain", ch, "--out", root / "clusters.csv"),
        ("tagdb", "--tags", root / "synth" / "tags.csv", "--chain", ch, "--out", root / "tags.csv",
         "--review", root / "review.csv"),
        ("train", "--chain", ch, "--positives", root / "pos.txt", "--negatives", root / "neg.txt",
         "--seed", 3, "--trees", 30, "--target-size", 300, "--cv", 3, "--out", root / "model.json",
         "--metrics", root / "metrics.json", "--roc", root / "roc.csv",
         "--features", root / "features.csv", "--mi", root / "mi.csv"),
        ("explore", "--chain", ch, "--model", root / "model.json", "--seeds", root / "seeds.txt",
         "--out", root / "graph.json", "--dot", root / "graph.dot"),
        ("relations", "--graph", root / "graph.json", "--chain", ch, "--tags", root / "tags.csv",
         "--oracle", "cerber", "--report", root / "report.csv", "--annex", root / "annex.json"),
        ("eval", "epsilon", "--chain", ch, "--tags", root / "tags.csv", "--seeds", root / "seeds.txt",
         "--exchanges", root / "exchanges.txt", "--seed", 4, "--repeats", 3,
         "--out", root / "curve.csv"),
        ("eval", "directions", "--chain", ch, "--tags", root / "tags.csv",
         "--seeds", root / "seeds.txt", "--model", root / "model.json",
         "--out", root / "directions.json"),
    ]
    for argv in steps:
        assert run(*argv) == 0, argv
    return {str(p.relative_to(root)): _digest(p) for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(".manifest.json")}


def test_criterion_09_determinism(criterion, tmp_path):
    c = criterion(9, "determinism")
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_users": 150, "n_exchanges": 3, "n_events": 1200,
                                "horizon_blocks": 10000,
                                "planted": [{"kind": "ransomware_cashout", "victims": 4},
                                            {"kind": "cerber_cycle", "count": 2}]}))
    a = _pipeline(tmp_path / "a", spec)
    b = _pipeline(tmp_path / "b", spec)
    differing = sorted(k for k in a if a[k] != b.get(k))
    c.check(not differing and set(a) == set(b) and len(a) >= 18,
            f"{len(a)} artifacts compared by sha256, differing {differing}")


# -- 10 -----------------------------------------------------------------------

def test_criterion_10_dust_and_coinjoin(criterion):
    c = criterion(10, "dust and CoinJoin filtering")
    store, meta = filter_fixture()
    cm = build_clusters(store)
    g = explore(store, cm, None, None, meta["seeds"], ExplorationConfig(classifier_enabled=False))
    dust, cj, near = meta["dust"]["txid"], meta["coinjoin"]["txid"], meta["near_dust_txid"]
    parts = [meta["seeds"][0]] + meta["coinjoin_participants"]
    merged = len({cm.cluster_of(p) for p in parts}) < len(parts)
    flags_ok = cm.flags[dust].is_dust and cm.flags[cj].is_coinjoin and \
        not (near in cm.flags and cm.flags[near].is_dust)
    ok = dust not in g.txs and cj not in g.txs and near in g.txs and not merged and flags_ok
    c.check(ok, f"dust in graph {dust in g.txs}, coinjoin in graph {cj in g.txs}, "
                f"99-output tx kept {near in g.txs}, coinjoin merged clusters {merged}")
