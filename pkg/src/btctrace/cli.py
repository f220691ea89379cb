"""Command-line entry point: one subcommand per pipeline stage.

Exit status: 0 success, 1 usage error, 2 data error. Every command writes
`<main output>.manifest.json` with input/output digests and timings.
Relative output paths resolve under $BTCTRACE_OUT_DIR when it is set.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

from . import __version__
from .chainstore import ChainError, IngestOptions, ingest_chain
from .classifier import (DatasetConflict, ForestParams, ModelClassifier, StaticClassifier,
                         assemble_dataset, cross_validate, evaluate, export_roc, fit_model,
                         load_model, roc_points)
from .clustering import DUST_MIN_OUTPUTS, build_clusters
from .evaluation import (SynthChainSpec, ablation_json, compare_directions, generate_chain,
                         run_ablation, run_epsilon_study, write_curve)
from .explorer import DIRECTIONS, ExplorationConfig, ExplorationGraph, explore
from .features import InsufficientData, export_matrix, export_ranking, rank_features_mi
from .oracles import MalformedHex, load_registry, make_oracle
from .relations import find_relations
from .tagdb import TagError, build_tag_db, import_tags, propagate_to_clusters, write_tags

log = logging.getLogger("btctrace")

OUT_DIR_ENV = "BTCTRACE_OUT_DIR"
DATA_ERRORS = (ChainError, TagError, InsufficientData, DatasetConflict, MalformedHex,
               json.JSONDecodeError, FileNotFoundError, KeyError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: usage error: {message}", file=sys.stderr)
        raise SystemExit(1)


# -- helpers ---------------------------------------------------------------------

def out_path(path: str) -> str:
    base = os.environ.get(OUT_DIR_ENV)
    if base and not os.path.isabs(path):
        os.makedirs(base, exist_ok=True)
        return os.path.join(base, path)
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def read_address_list(path) -> list[str]:
    """One address per line; blank lines and '#' comments are ignored."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line)
    return out


def write_manifest(main_output: str, command: str, args: argparse.Namespace, inputs, outputs,
                   timings: dict) -> str:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "tool": "btctrace", "version": __version__, "command": command, "config": config,
        "inputs": {p: sha256_file(p) for p in inputs if p and os.path.isfile(p)},
        "outputs": {p: sha256_file(p) for p in outputs if p and os.path.isfile(p)},
        "timings": timings,
    }
    path = main_output + ".manifest.json"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def verify_manifest(path) -> list[str]:
    """Outputs whose current digest differs from the recorded one."""
    with open(path, encoding="utf-8") as fh:
        m = json.load(fh)
    return sorted(p for p, d in m["outputs"].items() if not os.path.isfile(p) or sha256_file(p) != d)


def _load_tags(path, clusters):
    if not path:
        return build_tag_db({})
    db = build_tag_db(import_tags(path))
    if clusters is not None:
        propagate_to_clusters(db, clusters)
    return db


def _direction(value: str) -> str:
    d = value.replace("-", "_")
    if d not in DIRECTIONS:
        raise argparse.ArgumentTypeError(f"--direction must be one of "
                                         f"{', '.join(x.replace('_', '-') for x in DIRECTIONS)}")
    return d


def _classifier_from_args(args, store, clusters):
    if getattr(args, "model", None) and getattr(args, "no_classifier", False):
        raise UsageError("--model and --no-classifier are mutually exclusive")
    if getattr(args, "no_classifier", False):
        return None
    if getattr(args, "model", None):
        return ModelClassifier(load_model(args.model), store, clusters)
    if getattr(args, "exchanges", None):
        return StaticClassifier(read_address_list(args.exchanges))
    raise UsageError("one of --model or --no-classifier is required")


def _explore_config(args, classifier) -> ExplorationConfig:
    return ExplorationConfig(direction=args.direction, sdd=args.sdd,
                             max_addresses=args.max_addresses, max_seconds=args.max_seconds,
                             classifier_enabled=classifier is not None,
                             dust_filter_enabled=not args.no_dust_filter,
                             coinjoin_filter_enabled=not args.no_coinjoin_filter,
                             classifier_scope=args.classifier_scope)


# -- commands --------------------------------------------------------------------

def cmd_ingest(args) -> list[str]:
    store = ingest_chain(args.chain, IngestOptions(strict_timestamps=args.strict_timestamps))
    out = out_path(args.out)
    store.export(out)
    print(f"{len(store)} transactions, {len(store.addresses())} addresses")
    return [out]


def cmd_cluster(args) -> list[str]:
    store = ingest_chain(args.chain)
    clusters = build_clusters(store, args.dust_threshold)
    out = out_path(args.out)
    clusters.export_csv(out)
    flags = clusters.flags.values()
    print(f"{len(clusters.clusters())} clusters; {sum(f.is_coinjoin for f in flags)} coinjoin, "
          f"{sum(f.is_dust for f in flags)} dust transactions")
    return [out]


def cmd_tagdb(args) -> list[str]:
    trust = {}
    if args.trust:
        with open(args.trust, encoding="utf-8") as fh:
            trust = json.load(fh)
    db = build_tag_db(import_tags(args.tags), trust, args.alias_distance)
    if args.chain:
        propagate_to_clusters(db, build_clusters(ingest_chain(args.chain)))
    out = out_path(args.out)
    write_tags(out, db.records())
    outputs = [out]
    if args.review:
        review = out_path(args.review)
        db.write_review(review)
        outputs.append(review)
    print(f"{len(db)} tagged addresses, {len(db.cluster_tags)} tagged clusters, "
          f"{len(db.unresolved)} sent to review")
    return outputs


def cmd_train(args) -> list[str]:
    store = ingest_chain(args.chain)
    clusters = build_clusters(store)
    ds = assemble_dataset(store, clusters, read_address_list(args.positives),
                          read_address_list(args.negatives), args.target_size, args.seed)
    ds.split(args.test_fraction, args.seed)
    params = ForestParams(n_trees=args.trees, max_depth=args.depth, threshold=args.threshold)
    X_tr, y_tr = ds.train()
    model = fit_model(X_tr, y_tr, params, args.seed)
    out = out_path(args.out)
    model.save(out)
    outputs = [out]
    X_te, y_te = ds.test()
    metrics = {"holdout": evaluate(model, X_te, y_te), "n_train": int(len(y_tr)),
               "n_test": int(len(y_te))}
    if args.cv:
        metrics["cv"] = cross_validate(ds.X, ds.y, args.cv, params, args.seed)
    if args.metrics:
        p = out_path(args.metrics)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(metrics, sort_keys=True, indent=1) + "\n")
        outputs.append(p)
    if args.roc:
        p = out_path(args.roc)
        vec = model.normalizer.transform(X_te)
        export_roc(p, roc_points(y_te, model.predict_proba(vec)))
        outputs.append(p)
    if args.features:
        p = out_path(args.features)
        export_matrix(p, ds.addresses, ds.X)
        outputs.append(p)
    if args.mi:
        p = out_path(args.mi)
        export_ranking(p, rank_features_mi(ds.X, ds.y))
        outputs.append(p)
    print(f"held-out F1 {metrics['holdout']['f1']:.4f} on {len(y_te)} addresses")
    return outputs


def cmd_explore(args) -> list[str]:
    if not args.model and not args.no_classifier:
        raise UsageError("explore requires --model or --no-classifier")
    store = ingest_chain(args.chain)
    clusters = build_clusters(store)
    classifier = _classifier_from_args(args, store, clusters)
    tagdb = _load_tags(args.tags, clusters)
    seeds = read_address_list(args.seeds)
    if not seeds:
        raise ValueError(f"{args.seeds}: no seed addresses")
    denylist = read_address_list(args.denylist) if args.denylist else ()
    g = explore(store, clusters, tagdb, classifier, seeds, _explore_config(args, classifier),
                denylist)
    out = out_path(args.out)
    g.export(out, "json")
    outputs = [out]
    if args.dot:
        p = out_path(args.dot)
        g.export(p, "dot")
        outputs.append(p)
    s = g.stats
    print(f"{s['status']}: {s['addresses']} addresses, {s['txes']} txes, "
          f"{s['tagged']} tagged, {s['classifier_exchanges']} classifier exchanges")
    args._stats = s
    return outputs


def _parse_oracle_flag(value: str) -> tuple[str, dict]:
    family, _, params_file = value.partition(":")
    params = {}
    if params_file:
        with open(params_file, encoding="utf-8") as fh:
            params = json.load(fh)
    return family, params


def cmd_relations(args) -> list[str]:
    graph = ExplorationGraph.load(args.graph)
    oracles = {}
    if args.oracles:
        oracles.update(load_registry(args.oracles))
    for flag in args.oracle or ():
        family, params = _parse_oracle_flag(flag)
        oracles[family] = make_oracle(family, params)
    store = clusters = None
    if args.chain:
        store = ingest_chain(args.chain)
        clusters = build_clusters(store)
    elif oracles:
        raise UsageError("--oracle needs --chain")
    tagdb = _load_tags(args.tags, clusters) if args.tags else None
    report = find_relations(graph, tagdb, oracles or None, store, clusters)
    family = args.family or (",".join(sorted(oracles)) if oracles else "campaign")
    out = out_path(args.report)
    report.write_table(out, family)
    outputs = [out]
    if args.annex:
        p = out_path(args.annex)
        report.write_annex(p)
        outputs.append(p)
    print(f"{len(report.relations)} relations, {len(report.tags())} distinct tags")
    return outputs


def cmd_eval(args) -> list[str]:
    store = ingest_chain(args.chain)
    clusters = build_clusters(store)
    tagdb = _load_tags(args.tags, clusters)
    seeds = read_address_list(args.seeds)
    out = out_path(args.out)
    if args.experiment == "epsilon":
        classifier = _classifier_from_args(args, store, clusters)
        if classifier is None:
            raise UsageError("the epsilon study needs --model or --exchanges")
        res = run_epsilon_study(store, clusters, tagdb, classifier, seeds, repeats=args.repeats,
                                seed=args.seed)
        write_curve(out, res["curve"])
    elif args.experiment == "ablation":
        if not args.model:
            raise UsageError("the ablation needs --model")
        classifier = ModelClassifier(load_model(args.model), store, clusters)
        res = run_ablation(store, clusters, tagdb, classifier, seeds, args.limit)
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(ablation_json(res))
    else:
        classifier = _classifier_from_args(args, store, clusters)
        cfg = ExplorationConfig(classifier_enabled=classifier is not None)
        res = compare_directions(store, clusters, tagdb, classifier, seeds, cfg)
        slim = {k: v for k, v in res.items() if k not in ("graphs", "reports")}
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(slim, sort_keys=True, indent=1) + "\n")
    print(f"wrote {out}")
    return [out]


def cmd_synth(args) -> list[str]:
    with open(args.spec, encoding="utf-8") as fh:
        spec = SynthChainSpec.from_dict({**json.load(fh), "seed": args.seed})
    out_dir = out_path(args.out_dir)
    manifest = generate_chain(spec, out_dir)
    print(f"{len(manifest.get('planted', []))} planted structures in {out_dir}")
    return [os.path.join(out_dir, f) for f in ("chain.jsonl", "tags.csv", "manifest.json")]


# -- parser ----------------------------------------------------------------------

def _add_explore_flags(p):
    p.add_argument("--direction", type=_direction, default="back_and_forth",
                   help="back-and-forth (default), forward-only or backwards-only")
    p.add_argument("--sdd", action="store_true",
                   help="do not follow deposits into seeds; use for victim-paid seeds "
                        "such as ransomware or clipper addresses")
    p.add_argument("--max-addresses", type=int)
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--no-dust-filter", action="store_true")
    p.add_argument("--no-coinjoin-filter", action="store_true")
    p.add_argument("--classifier-scope", choices=("cluster", "address"), default="cluster",
                   help="cluster (default): one verdict per multi-input cluster, positive if any "
                        "member is; address: classify visited addresses only, order-dependent")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="btctrace", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"btctrace {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a chain file and write its canonical form")
    p.add_argument("--chain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strict-timestamps", action="store_true")
    p.set_defaults(func=cmd_ingest, inputs=("chain",))

    p = sub.add_parser("cluster", help="multi-input clustering")
    p.add_argument("--chain", required=True)
    p.add_argument("--out", required=True, help="address,cluster_id CSV")
    p.add_argument("--dust-threshold", type=int, default=DUST_MIN_OUTPUTS)
    p.set_defaults(func=cmd_cluster, inputs=("chain",))

    p = sub.add_parser("tagdb", help="disambiguate raw tags and propagate to clusters")
    p.add_argument("--tags", required=True)
    p.add_argument("--chain", help="propagate tags over this chain's clusters")
    p.add_argument("--trust", help="JSON map of source host to trusted|crowd")
    p.add_argument("--alias-distance", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--review")
    p.set_defaults(func=cmd_tagdb, inputs=("tags", "chain", "trust"))

    p = sub.add_parser("train", help="train the exchange classifier")
    p.add_argument("--chain", required=True)
    p.add_argument("--positives", required=True, help="exchange seed addresses")
    p.add_argument("--negatives", required=True, help="non-exchange seed addresses")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trees", type=int, default=600)
    p.add_argument("--depth", type=int, default=40)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--target-size", type=int)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--cv", type=int, default=0, help="also run k-fold cross-validation")
    p.add_argument("--metrics")
    p.add_argument("--roc")
    p.add_argument("--features", help="write the raw feature matrix CSV")
    p.add_argument("--mi", help="write the mutual-information feature ranking CSV")
    p.set_defaults(func=cmd_train, inputs=("chain", "positives", "negatives"))

    p = sub.add_parser("explore", help="explore from seeds")
    p.add_argument("--chain", required=True)
    p.add_argument("--tags")
    p.add_argument("--model")
    p.add_argument("--no-classifier", action="store_true")
    p.add_argument("--seeds", required=True)
    p.add_argument("--denylist", help="txids never to expand")
    p.add_argument("--out", required=True)
    p.add_argument("--dot")
    _add_explore_flags(p)
    p.set_defaults(func=cmd_explore, inputs=("chain", "tags", "model", "seeds", "denylist"))

    p = sub.add_parser("relations", help="extract relations from an exploration graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--chain")
    p.add_argument("--tags")
    p.add_argument("--oracle", action="append", help="family[:params.json], repeatable")
    p.add_argument("--oracles", help="oracle registry JSON")
    p.add_argument("--family")
    p.add_argument("--report", required=True)
    p.add_argument("--annex")
    p.set_defaults(func=cmd_relations, inputs=("graph", "chain", "tags", "oracles"))

    p = sub.add_parser("eval", help="run an evaluation experiment")
    p.add_argument("experiment", choices=("epsilon", "ablation", "directions"))
    p.add_argument("--chain", required=True)
    p.add_argument("--tags")
    p.add_argument("--seeds", required=True)
    p.add_argument("--model")
    p.add_argument("--no-classifier", action="store_true")
    p.add_argument("--exchanges", help="ground-truth exchange list used as the classifier")
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--limit", type=int, default=20_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval, inputs=("chain", "tags", "seeds", "model", "exchanges"))

    p = sub.add_parser("synth", help="generate a synthetic chain with planted structures")
    p.add_argument("--spec", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth, inputs=("spec",))
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.experiment == "epsilon" and args.seed is None:
        parser.error("eval epsilon requires --seed")
    t0 = time.perf_counter()
    try:
        outputs = args.func(args)
    except UsageError as e:
        print(f"btctrace {args.command}: usage error: {e}", file=sys.stderr)
        return 1
    except DATA_ERRORS as e:
        print(f"btctrace {args.command}: data error: {e}", file=sys.stderr)
        return 2
    inputs = [getattr(args, k, None) for k in args.inputs]
    timings = {"total_seconds": round(time.perf_counter() - t0, 6)}
    if getattr(args, "_stats", None):
        timings["exploration_seconds"] = round(args._stats.get("runtime", 0.0), 6)
        del args._stats
    write_manifest(outputs[0], args.command, args, inputs, outputs, timings)
    return 0


if __name__ == "__main__":
    sys.exit(main())
