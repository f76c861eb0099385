"""Flow record I/O, synthetic traffic generation and client partitioning.

Flow record format: one JSON object per line::

    {"flow_id":"f1","label":2,"packets":[[0.000000000,100,1],[0.100000000,200,-1]]}

``label`` may be null. Each packet is ``[timestamp_seconds, length_bytes,
direction]`` with direction 1 (forward) or -1 (backward). Timestamps are
written with exactly nine fractional digits.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write
from .errors import FormatError, InvalidProfile, ParseError
from .flows import Flow, SubflowSet, validate_flow


# --------------------------------------------------------------------------
# flow records
# --------------------------------------------------------------------------

def _parse_line(text: str, lineno: int) -> Flow:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("record is not an object", lineno)
    missing = {"flow_id", "label", "packets"} - obj.keys()
    if missing:
        raise ParseError(f"missing field(s) {sorted(missing)}", lineno)
    flow_id, label, packets = obj["flow_id"], obj["label"], obj["packets"]
    if not isinstance(flow_id, str):
        raise ParseError("flow_id must be a string", lineno)
    if label is not None and (isinstance(label, bool) or not isinstance(label, int) or label < 0):
        raise ParseError("label must be a non-negative integer or null", lineno)
    if not isinstance(packets, list):
        raise ParseError("packets must be an array", lineno)
    if not packets:
        raise ParseError("flow has no packets", lineno)
    try:
        arr = np.array(packets, dtype=np.float64).reshape(len(packets), -1)
    except (ValueError, TypeError):
        raise ParseError("packets must be [timestamp, length, direction] triples", lineno) from None
    if arr.shape[1] != 3:
        raise ParseError("packets must be [timestamp, length, direction] triples", lineno)
    ts, ln, dr = arr[:, 0], arr[:, 1], arr[:, 2]
    if not np.all(np.isfinite(ts)) or np.any(ts < 0):
        raise ParseError("timestamps must be finite and non-negative", lineno)
    if np.any(ln != np.round(ln)) or np.any(ln < 1):
        raise ParseError("lengths must be integers >= 1", lineno)
    if np.any((dr != 1) & (dr != -1)):
        raise ParseError("direction must be 1 or -1", lineno)
    return validate_flow(Flow(flow_id, label, ts, ln.astype(np.int64), dr.astype(np.int8)))


def read_flow_records(path) -> list[Flow]:
    flows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if text.strip():
                flows.append(_parse_line(text, lineno))
    return flows


def format_flow_record(flow: Flow) -> str:
    label = "null" if flow.label is None else str(int(flow.label))
    packets = ",".join(
        f"[{t:.9f},{n},{d}]"
        for t, n, d in zip(flow.timestamps.tolist(), flow.lengths.tolist(), flow.directions.tolist())
    )
    return f'{{"flow_id":{json.dumps(flow.flow_id)},"label":{label},"packets":[{packets}]}}'


def write_flow_records(flows: Sequence[Flow], path) -> None:
    with atomic_write(path) as fh:
        for flow in flows:
            fh.write(format_flow_record(flow))
            fh.write("\n")


# --------------------------------------------------------------------------
# synthetic traffic
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticClassProfile:
    class_id: int
    fwd_len_mean: float
    fwd_len_std: float
    bwd_len_mean: float
    bwd_len_std: float
    iat_mean: float
    iat_std: float
    fwd_ratio: float
    burst_period: int

    def validate(self):
        problems = []
        if min(self.fwd_len_mean, self.bwd_len_mean, self.iat_mean) <= 0:
            problems.append("means must be positive")
        if min(self.fwd_len_std, self.bwd_len_std, self.iat_std) < 0:
            problems.append("stds must be non-negative")
        if not 0 < self.fwd_ratio < 1:
            problems.append("fwd_ratio must lie in (0, 1)")
        if self.burst_period < 1:
            problems.append("burst_period must be >= 1")
        if problems:
            raise InvalidProfile(f"class {self.class_id}: " + "; ".join(problems))


# Five service-like classes; means are kept apart so the classes stay
# learnable, with overlapping tails so the task is not trivial.
DEFAULT_PROFILES = (
    SyntheticClassProfile(0, 1300.0, 150.0, 150.0, 60.0, 0.0015, 0.0006, 0.70, 50),
    SyntheticClassProfile(1, 250.0, 80.0, 1250.0, 180.0, 0.0010, 0.0004, 0.25, 80),
    SyntheticClassProfile(2, 700.0, 200.0, 500.0, 150.0, 0.0040, 0.0015, 0.50, 10),
    SyntheticClassProfile(3, 400.0, 150.0, 900.0, 250.0, 0.0025, 0.0010, 0.45, 25),
    SyntheticClassProfile(4, 900.0, 200.0, 300.0, 100.0, 0.0030, 0.0010, 0.60, 5),
)


def _synth_flow(rng: np.random.Generator, profile: SyntheticClassProfile, num_packets: int,
                flow_id: str, label) -> Flow:
    forward = rng.random(num_packets) < profile.fwd_ratio
    fwd_len = rng.normal(profile.fwd_len_mean, profile.fwd_len_std, num_packets)
    bwd_len = rng.normal(profile.bwd_len_mean, profile.bwd_len_std, num_packets)
    lengths = np.maximum(np.rint(np.where(forward, fwd_len, bwd_len)), 1).astype(np.int64)

    # gap j precedes packet j+1; the regime flips every burst_period packets
    j = np.arange(1, num_packets)
    slow = (j // profile.burst_period) % 2 == 1
    mean = np.where(slow, 3.0 * profile.iat_mean, profile.iat_mean)
    std = np.where(slow, 3.0 * profile.iat_std, profile.iat_std)
    gaps = np.maximum(rng.normal(0.0, 1.0, num_packets - 1) * std + mean, 0.0)
    # whole nanoseconds, so the 9-digit text form round-trips exactly
    ns = np.concatenate([[0], np.cumsum(np.rint(gaps * 1e9).astype(np.int64))])
    return Flow(flow_id, label, ns / 1e9, lengths, np.where(forward, 1, -1).astype(np.int8))


def generate_synthetic_dataset(profiles: Sequence[SyntheticClassProfile] = DEFAULT_PROFILES,
                               flows_per_class: int = 30,
                               packets_per_flow_range: tuple[int, int] = (1000, 1300),
                               seed: int = 0,
                               id_prefix: str = "flow",
                               labelled: bool = True) -> list[Flow]:
    """Draw ``flows_per_class`` flows from every profile, class by class.

    With ``labelled=False`` the class index is still used for generation but
    dropped from the resulting flows.
    """
    if len(profiles) < 2:
        raise InvalidProfile("at least two class profiles are required")
    for p in profiles:
        p.validate()
    lo, hi = packets_per_flow_range
    if lo < 100 or hi < lo:
        raise InvalidProfile(f"packets_per_flow_range {packets_per_flow_range} must satisfy 100 <= min <= max")
    rng = np.random.default_rng(seed)
    flows = []
    for p in profiles:
        for i in range(flows_per_class):
            num_packets = int(rng.integers(lo, hi + 1))
            flows.append(_synth_flow(rng, p, num_packets, f"{id_prefix}-{len(flows):06d}",
                                     p.class_id if labelled else None))
    return flows


# --------------------------------------------------------------------------
# client partitioning
# --------------------------------------------------------------------------

def partition_indices(n: int, num_clients: int, seed: int) -> list[np.ndarray]:
    if num_clients < 1:
        raise ValueError("need at least one client")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, num_clients)


def partition_to_clients(examples, num_clients: int, seed: int) -> list:
    """Shuffle ``examples`` and deal them into ``num_clients`` near-equal shards.

    Works on a :class:`SubflowSet` (returns SubflowSets) or any sequence
    (returns lists).
    """
    parts = partition_indices(len(examples), num_clients, seed)
    if isinstance(examples, SubflowSet):
        return [examples[idx] for idx in parts]
    return [[examples[i] for i in idx] for idx in parts]


# --------------------------------------------------------------------------
# subflow cache files
# --------------------------------------------------------------------------
#
# magic "FSSC1" | flags u8 (bit0 features, bit1 labels) | count u32 |
# subflow_len u16 | num_features u16 | per record: id length u16 + utf-8 id |
# labels int32[count] (if flagged) | values float32[count, len, 2] |
# features float32[count, num_features] (if flagged). Little-endian.

CACHE_MAGIC = b"FSSC1"
_HEADER = struct.Struct("<5sBIHH")


def save_subflow_cache(subflows: SubflowSet, path) -> None:
    has_feat = subflows.features is not None
    nf = subflows.features.shape[1] if has_feat else 0
    length = subflows.values.shape[1]
    with atomic_write(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, (1 if has_feat else 0) | 2, len(subflows), length, nf))
        for fid in subflows.flow_ids:
            raw = str(fid).encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(subflows.labels.astype("<i4").tobytes())
        fh.write(subflows.values.astype("<f4").tobytes())
        if has_feat:
            fh.write(subflows.features.astype("<f4").tobytes())


def load_subflow_cache(path) -> SubflowSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, flags, count, length, nf = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    pos = _HEADER.size
    ids = []
    try:
        for _ in range(count):
            (k,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + k > len(data):
                raise FormatError(f"{path}: truncated id table")
            ids.append(data[pos:pos + k].decode("utf-8"))
            pos += k
    except struct.error:
        raise FormatError(f"{path}: truncated id table") from None

    def take(dtype, shape):
        nonlocal pos
        size = int(np.prod(shape)) * 4
        if pos + size > len(data):
            raise FormatError(f"{path}: truncated payload")
        arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(shape)), offset=pos).reshape(shape)
        pos += size
        return arr

    labels = take("<i4", (count,)) if flags & 2 else np.full(count, -1)
    values = take("<f4", (count, length, 2))
    feats = take("<f4", (count, nf)) if flags & 1 else None
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return SubflowSet(values.copy(), np.array(ids, dtype=object), labels.astype(np.int64),
                      None if feats is None else feats.copy())
