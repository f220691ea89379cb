"""Operation oracles that recognise C&C signaling addresses of specific malware families."""
from __future__ import annotations

import binascii
import ipaddress
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .chainstore import ChainStore, get_address_context, tx_fee

log = logging.getLogger(__name__)

PONY_MAX_INPUTS = 3
PONY_MAX_OUTPUTS = 2
PONY_MAX_GAP_SECONDS = 3600
PONY_RATIO_THRESHOLD = 0.5
GLUPTEBA_MIN_HEX = 56
IV_HEX = 24
TAG_HEX = 32
CERBER_PREFIX_LEN = 6

NON_PUBLIC_NETS = tuple(ipaddress.ip_network(n) for n in (
    "0.0.0.0/8", "10.0.0.0/8", "100.64.0.0/10", "127.0.0.0/8", "169.254.0.0/16",
    "172.16.0.0/12", "192.168.0.0/16", "224.0.0.0/4", "240.0.0.0/4",
))

_HOSTNAME_RE = re.compile(
    r"^(?=.{1,253}$)([a-z0-9](?:[a-z0-9-]{0,61}[a-z0-9])?)(\.[a-z0-9](?:[a-z0-9-]{0,61}[a-z0-9])?)*$",
    re.IGNORECASE)


class MalformedHex(ValueError):
    pass


@dataclass
class Evidence:
    payload: str
    txids: tuple[str, ...]
    timestamp: int

    def to_dict(self) -> dict:
        return {"payload": self.payload, "txids": list(self.txids), "timestamp": self.timestamp}


@dataclass
class OracleResult:
    is_signaling: bool
    evidence: list[Evidence] = field(default_factory=list)
    ratio: float | None = None

    def to_dict(self) -> dict:
        d = {"is_signaling": self.is_signaling, "evidence": [e.to_dict() for e in self.evidence]}
        if self.ratio is not None:
            d["ratio"] = self.ratio
        return d


# -- Cerber --------------------------------------------------------------------

def cerber_oracle(store: ChainStore, address: str) -> OracleResult:
    """Round trip addr -> temporary -> addr through single-input single-output transactions.

    Every qualifying cycle is collected as evidence; the verdict matches stopping
    at the first one.
    """
    _, withdrawals, _ = get_address_context(store, address)
    evidence = []
    for tx in withdrawals:
        if not (len(tx.inputs) == len(tx.outputs) == 1):
            continue
        o = tx.outputs[0].address
        if o is None:
            continue
        o_wd = store.withdrawal_txids(o)
        o_dep = store.deposit_txids(o)
        if not (len(o_wd) == len(o_dep) == 1):
            continue
        tx_r = store.tx(o_wd[0])
        if not (len(tx_r.inputs) == len(tx_r.outputs) == 1):
            continue
        if tx_r.outputs[0].address != address:
            continue
        r_val = tx_fee(tx_r) + tx_r.out_value
        if tx.out_value == r_val:
            evidence.append(Evidence(o[:CERBER_PREFIX_LEN], (tx.txid, tx_r.txid), tx.timestamp))
    return OracleResult(bool(evidence), evidence)


# -- Pony / Skidmap ------------------------------------------------------------

@dataclass(frozen=True)
class PonyCodecParams:
    """Each value contributes its low 16 bits, big-endian, as two IPv4 octets."""
    mask_bits: int = 16

    def decode(self, v1: int, v2: int) -> ipaddress.IPv4Address | None:
        mask = (1 << self.mask_bits) - 1
        a, b = v1 & mask, v2 & mask
        return ipaddress.IPv4Address(bytes(((a >> 8) & 255, a & 255, (b >> 8) & 255, b & 255)))

    def encode(self, ip) -> tuple[int, int]:
        raw = ipaddress.IPv4Address(ip).packed
        return raw[0] * 256 + raw[1], raw[2] * 256 + raw[3]


DEFAULT_CODEC = PonyCodecParams()


def decode_ip(v1: int, v2: int, codec: PonyCodecParams = DEFAULT_CODEC):
    return codec.decode(v1, v2)


def is_public(ip) -> bool:
    ip = ipaddress.IPv4Address(ip)
    return not any(ip in net for net in NON_PUBLIC_NETS)


def pony_oracle(store: ChainStore, address: str, codec: PonyCodecParams = DEFAULT_CODEC,
                ratio_threshold: float = PONY_RATIO_THRESHOLD) -> OracleResult:
    """Pairs of small deposits less than an hour apart encode IPv4 addresses."""
    deposit_ids = set(store.deposit_txids(address))
    evidence: list[Evidence] = []
    tx1 = None
    tx1_value = 0
    for tx in store.address_txs(address):
        if tx.txid in deposit_ids:
            if len(tx.inputs) <= PONY_MAX_INPUTS and len(tx.outputs) <= PONY_MAX_OUTPUTS:
                value = next(s.value for s in tx.outputs if s.address == address)
                if tx1 is not None:
                    delta = tx.timestamp - tx1.timestamp
                    if delta <= PONY_MAX_GAP_SECONDS:
                        ip = codec.decode(tx1_value, value)
                        if ip and is_public(ip):
                            evidence.append(Evidence(str(ip), (tx1.txid, tx.txid), tx.timestamp))
                    tx1 = None
                else:
                    tx1, tx1_value = tx, value
            else:
                tx1 = None
        else:
            tx1 = None
    n_dep = len(deposit_ids)
    ratio = 2 * len(evidence) / n_dep if n_dep else 0.0
    return OracleResult(n_dep > 0 and ratio >= ratio_threshold, evidence, ratio)


# -- Glupteba ------------------------------------------------------------------

@dataclass(frozen=True)
class GluptebaKeys:
    keys: tuple[bytes, ...]

    def __post_init__(self):
        if not self.keys:
            raise ValueError("at least one key is required")
        for k in self.keys:
            if len(k) != 32:
                raise ValueError("keys must be exactly 32 bytes")

    @classmethod
    def from_hex(cls, hex_keys) -> "GluptebaKeys":
        return cls(tuple(bytes.fromhex(k) for k in hex_keys))


def split_payload(data: str) -> tuple[bytes, bytes, bytes]:
    """(iv, ciphertext, tag) from a hex payload."""
    if len(data) % 2 or not re.fullmatch(r"[0-9a-fA-F]*", data):
        raise MalformedHex(f"payload is not valid hex: {data[:16]}...")
    iv = binascii.unhexlify(data[:IV_HEX])
    tag = binascii.unhexlify(data[-TAG_HEX:])
    ct = binascii.unhexlify(data[IV_HEX:-TAG_HEX])
    return iv, ct, tag


def aes_gcm_decrypt(iv: bytes, ct: bytes, tag: bytes, key: bytes) -> bytes | None:
    try:
        return AESGCM(key).decrypt(iv, ct + tag, None)
    except InvalidTag:
        return None


def aes_gcm_encrypt_payload(plaintext: bytes, key: bytes, iv: bytes) -> str:
    sealed = AESGCM(key).encrypt(iv, plaintext, None)
    return (iv + sealed).hex()


def _looks_like_hostname(plain: bytes) -> bool:
    try:
        text = plain.decode("utf-8")
    except UnicodeDecodeError:
        return False
    return bool(_HOSTNAME_RE.match(text))


def glupteba_oracle(store: ChainStore, address: str, keys: GluptebaKeys,
                    strict: bool = False) -> OracleResult:
    """Authenticated decryption of an OP_RETURN payload under a known key.

    strict=True accepts any non-empty plaintext; the default also requires the
    plaintext to look like a hostname.
    """
    _, withdrawals, _ = get_address_context(store, address)
    for tx in withdrawals:
        for o in tx.outputs:
            data = o.data
            if not data or len(data) < GLUPTEBA_MIN_HEX:
                continue
            try:
                iv, ct, tag = split_payload(data)
            except MalformedHex as e:
                log.warning("%s output %d: %s", tx.txid, o.slot_index, e)
                continue
            for key in keys.keys:
                plain = aes_gcm_decrypt(iv, ct, tag, key)
                if not plain:
                    continue
                if not strict and not _looks_like_hostname(plain):
                    log.info("%s: decrypted payload rejected by hostname check", tx.txid)
                    continue
                text = plain.decode("utf-8", errors="replace")
                return OracleResult(True, [Evidence(text, (tx.txid,), tx.timestamp)])
    return OracleResult(False)


# -- registry ------------------------------------------------------------------

Oracle = Callable[[ChainStore, str], OracleResult]

FAMILY_ORACLES = {"cerber": "cerber", "pony": "pony", "skidmap": "pony", "glupteba": "glupteba"}


def make_oracle(family: str, params: dict | None = None) -> Oracle:
    """Bind an oracle for a family name with its parameters.

    params: {"keys": [hex, ...]} for glupteba, optional {"strict": bool};
    {"mask_bits": int, "ratio_threshold": float} for pony.
    """
    params = params or {}
    kind = FAMILY_ORACLES.get(family.lower())
    if kind == "cerber":
        return cerber_oracle
    if kind == "pony":
        codec = PonyCodecParams(int(params.get("mask_bits", 16)))
        thr = float(params.get("ratio_threshold", PONY_RATIO_THRESHOLD))
        return lambda store, addr: pony_oracle(store, addr, codec, thr)
    if kind == "glupteba":
        keys = GluptebaKeys.from_hex(params.get("keys", []))
        strict = bool(params.get("strict", False))
        return lambda store, addr: glupteba_oracle(store, addr, keys, strict)
    raise KeyError(f"no oracle registered for family {family!r}")


def load_registry(path) -> dict[str, Oracle]:
    """Registry file: {family: {"oracle": id, "params": {...} | "params_file": path}}."""
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    out = {}
    for family, entry in sorted(cfg.items()):
        params = entry.get("params") or {}
        if "params_file" in entry:
            with open(entry["params_file"], encoding="utf-8") as pf:
                params = json.load(pf)
        out[family] = make_oracle(entry.get("oracle", family), params)
    return out
