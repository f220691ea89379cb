"""Per-address feature extraction, z-score normalization and MI ranking."""
from __future__ import annotations

import bisect
import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .chainstore import ChainStore, get_address_context, tx_fee
from .clustering import detect_coinjoin

log = logging.getLogger(__name__)

FEATURE_NAMES = (
    "type", "equiv_addrs",
    "lifetime", "timespan_d", "timespan_w", "activity", "activity_d", "activity_w",
    "idle_time", "daily_d_rate", "daily_w_rate", "yearly_d_txes", "yearly_w_txes",
    "balance", "deposited", "withdrawn", "txes", "txes_out", "txes_in", "addr_as_change",
    "outputs", "inputs", "utxos", "tx_size_mean", "tx_weight_mean", "tx_fee_mean",
    "ins_age_mean", "coinbase", "coinjoin", "coinjoin_out", "coinjoin_in", "tx_ratio",
    "outs_per_tx", "ins_per_tx", "outs_per_out", "ins_per_out", "outs_per_in", "ins_per_in",
    "profit_rate", "expense_rate", "d_per_tx", "w_per_tx",
)
N_FEATURES = len(FEATURE_NAMES)
FEATURE_INDEX = {n: i for i, n in enumerate(FEATURE_NAMES)}

TYPE_CODES = {"pubkeyhash": 1, "scripthash": 2, "multisig": 3, "segwit": 4, "other": 5}

# Features that scale linearly with transaction values; everything else is a count or time.
AMOUNT_FEATURES = frozenset({
    "balance", "deposited", "withdrawn", "tx_fee_mean",
    "profit_rate", "expense_rate", "d_per_tx", "w_per_tx",
})

SECONDS_PER_DAY = 86400
SECONDS_PER_YEAR = 365.25 * SECONDS_PER_DAY


_warned_size = False


class InsufficientData(Exception):
    pass


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def _utc_day(ts: int) -> int:
    return datetime.fromtimestamp(ts, tz=timezone.utc).toordinal()


def _span(txs) -> int:
    if not txs:
        return 0
    return max(t.timestamp for t in txs) - min(t.timestamp for t in txs)


def extract_features(store: ChainStore, clusters, address: str) -> np.ndarray:
    """42-element float vector in canonical order.

    `clusters` may be None; CoinJoin flags are then recomputed per transaction.
    """
    deposits, withdrawals, rec = get_address_context(store, address)
    f = dict.fromkeys(FEATURE_NAMES, 0.0)
    f["type"] = TYPE_CODES.get(rec.addr_type, TYPE_CODES["other"])
    f["equiv_addrs"] = rec.equiv_count
    all_txs = store.address_txs(address)
    if not all_txs:
        return np.array([f[n] for n in FEATURE_NAMES], dtype=float)

    def is_cj(tx):
        if clusters is not None and tx.txid in clusters.flags:
            return clusters.flags[tx.txid].is_coinjoin
        return detect_coinjoin(tx)

    n_txes = len(all_txs)
    n_dep, n_wd = len(deposits), len(withdrawals)
    lifetime = _span(all_txs)
    life_den = max(lifetime, 1)

    f["lifetime"] = lifetime
    f["timespan_d"] = _span(deposits)
    f["timespan_w"] = _span(withdrawals)
    days = {_utc_day(t.timestamp) for t in all_txs}
    f["activity"] = len(days)
    f["activity_d"] = len({_utc_day(t.timestamp) for t in deposits})
    f["activity_w"] = len({_utc_day(t.timestamp) for t in withdrawals})
    f["idle_time"] = (max(days) - min(days) + 1) - len(days)
    f["daily_d_rate"] = n_dep * SECONDS_PER_DAY / life_den
    f["daily_w_rate"] = n_wd * SECONDS_PER_DAY / life_den
    f["yearly_d_txes"] = n_dep * SECONDS_PER_YEAR / life_den
    f["yearly_w_txes"] = n_wd * SECONDS_PER_YEAR / life_den

    out_slots = [s for t in deposits for s in t.outputs if s.address == address]
    in_slots = [(t, s) for t in withdrawals for s in t.inputs if s.address == address]
    deposited = sum(s.value for s in out_slots)
    withdrawn = sum(s.value for _, s in in_slots)
    f["deposited"] = deposited
    f["withdrawn"] = withdrawn
    f["balance"] = deposited - withdrawn
    f["txes"] = n_txes
    f["txes_out"] = n_dep
    f["txes_in"] = n_wd
    both = set(store.deposit_txids(address)) & set(store.withdrawal_txids(address))
    f["addr_as_change"] = _ratio(len(both), n_txes)
    f["outputs"] = len(out_slots)
    f["inputs"] = len(in_slots)
    f["utxos"] = max(len(out_slots) - len(in_slots), 0)

    sizes = [t.size for t in all_txs if t.size is not None]
    weights = [t.weight for t in all_txs if t.weight is not None]
    global _warned_size
    if len(sizes) < n_txes and not _warned_size:
        log.warning("transactions without size/weight metadata count as 0 in size features")
        _warned_size = True
    f["tx_size_mean"] = _ratio(sum(sizes), n_txes)
    f["tx_weight_mean"] = _ratio(sum(weights), n_txes)
    f["tx_fee_mean"] = _ratio(sum(tx_fee(t) for t in all_txs), n_txes)

    # Age of consumed inputs: spend height minus the height of the funding output.
    dep_keys = [store.chrono_key(t) for t in deposits]
    ages = []
    for t, s in in_slots:
        if s.prev is not None and s.prev in store:
            ages.append(t.block_height - store.tx(s.prev).block_height)
            continue
        i = bisect.bisect_left(dep_keys, store.chrono_key(t))
        if i > 0:
            ages.append(t.block_height - deposits[i - 1].block_height)
    f["ins_age_mean"] = _ratio(sum(ages), len(ages))

    f["coinbase"] = sum(1 for t in all_txs if t.is_coinbase)
    f["coinjoin"] = sum(1 for t in all_txs if is_cj(t))
    f["coinjoin_out"] = sum(1 for t in deposits if is_cj(t))
    f["coinjoin_in"] = sum(1 for t in withdrawals if is_cj(t))
    f["tx_ratio"] = _ratio(n_wd, n_dep)

    f["outs_per_tx"] = _ratio(sum(len(t.outputs) for t in all_txs), n_txes)
    f["ins_per_tx"] = _ratio(sum(len(t.inputs) for t in all_txs), n_txes)
    f["outs_per_out"] = _ratio(sum(len(t.outputs) for t in deposits), n_dep)
    f["ins_per_out"] = _ratio(sum(len(t.inputs) for t in deposits), n_dep)
    f["outs_per_in"] = _ratio(sum(len(t.outputs) for t in withdrawals), n_wd)
    f["ins_per_in"] = _ratio(sum(len(t.inputs) for t in withdrawals), n_wd)

    f["profit_rate"] = deposited / life_den
    f["expense_rate"] = withdrawn / life_den
    f["d_per_tx"] = _ratio(deposited, n_txes)
    f["w_per_tx"] = _ratio(withdrawn, n_txes)
    return np.array([f[n] for n in FEATURE_NAMES], dtype=float)


def feature_matrix(store: ChainStore, clusters, addresses) -> np.ndarray:
    rows = [extract_features(store, clusters, a) for a in addresses]
    return np.vstack(rows) if rows else np.zeros((0, N_FEATURES))


def export_matrix(path, addresses, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", *FEATURE_NAMES])
        for addr, row in zip(addresses, matrix):
            w.writerow([addr, *(repr(float(v)) for v in row)])


# -- normalization -------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationParams:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        mean = np.array(self.mean)
        std = np.array(self.std)
        safe = np.where(std > 0, std, 1.0)
        return np.where(std > 0, (x - mean) / safe, 0.0)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        return cls(tuple(float(v) for v in d["mean"]), tuple(float(v) for v in d["std"]))


def fit_normalizer(matrix) -> NormalizationParams:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] < 2:
        raise InsufficientData("normalization needs at least 2 rows")
    return NormalizationParams(tuple(m.mean(axis=0).tolist()), tuple(m.std(axis=0).tolist()))


# -- mutual information ranking ------------------------------------------------

def equal_frequency_bins(x, bins: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    edges = np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1])
    return np.searchsorted(np.unique(edges), x, side="right")


def mutual_information(a, b) -> float:
    """Plug-in MI estimate in nats between two discrete sequences."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = len(a)
    if n == 0:
        return 0.0
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1)
    pxy = joint / n
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])).sum())
    return max(mi, 0.0)


def entropy(a) -> float:
    _, counts = np.unique(np.asarray(a), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def rank_features_mi(matrix, labels, bins: int = 20,
                     names=FEATURE_NAMES) -> list[tuple[str, float]]:
    m = np.asarray(matrix, dtype=float)
    y = np.asarray(labels)
    if m.ndim != 2 or m.shape[0] < 2 or bins < 2:
        raise InsufficientData("MI ranking needs at least 2 rows and 2 bins")
    if len(y) != m.shape[0] or not set(np.unique(y).tolist()) <= {0, 1}:
        raise InsufficientData("labels must be binary and match the matrix rows")
    scores = [(names[j], mutual_information(equal_frequency_bins(m[:, j], bins), y))
              for j in range(m.shape[1])]
    return sorted(scores, key=lambda p: (-p[1], p[0]))


def export_ranking(path, ranking) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature", "mi"])
        for name, mi in ranking:
            w.writerow([name, f"{mi:.10f}"])


def all_finite(vec) -> bool:
    return all(math.isfinite(v) for v in vec)
