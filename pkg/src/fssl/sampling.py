"""Simple and incremental subflow sampling, plus the subflow encoding.

Each flow is sampled ``passes`` times. Pass ``i`` starts at packet
``i * start_step`` and picks ``subflow_len`` packets separated by the gaps
from :func:`gap_schedule`. A pass that would run past the end of the flow is
dropped; nothing is padded.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .flows import NO_LABEL, Flow, Subflow, SubflowSet


class Method(str, enum.Enum):
    SIMPLE = "simple"
    INCREMENTAL = "incremental"


@dataclass(frozen=True)
class SamplingParams:
    method: Method = Method.INCREMENTAL
    passes: int = 100
    start_step: int = 13
    subflow_len: int = 45
    d: int = 22
    l0: int = 1
    alpha: int = 5
    beta: float = 1.6
    min_flow_packets: int = 100

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        checks = {
            "passes": self.passes >= 1,
            "start_step": self.start_step >= 1,
            "subflow_len": self.subflow_len >= 2,
            "d": self.d >= 1,
            "l0": self.l0 >= 1,
            "alpha": self.alpha >= 1,
            "beta": self.beta >= 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid sampling parameters: {', '.join(bad)}")


@dataclass(frozen=True)
class EncodingParams:
    len_scale: float = 1500.0
    time_scale: float = 10.0

    def __post_init__(self):
        if not (self.len_scale > 0 and self.time_scale > 0):
            raise ValueError("encoding scales must be positive")


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def gap_schedule(params: SamplingParams) -> list[int]:
    """Packet-index gaps between consecutive sampled packets of one pass.

    Incremental sampling widens the gap by ``beta`` after every ``alpha``
    sampled packets: gap_j = round_half_up(l0 + floor(j / alpha) * beta).
    """
    n = params.subflow_len - 1
    if params.method is Method.SIMPLE:
        return [params.d] * n
    # exact rational arithmetic keeps half-way cases from flipping on float noise
    beta = Fraction(str(params.beta))
    return [_round_half_up(params.l0 + (j // params.alpha) * beta) for j in range(1, n + 1)]


def pass_offsets(params: SamplingParams) -> np.ndarray:
    """Offsets of the sampled packets relative to a pass's start index."""
    return np.concatenate([[0], np.cumsum(gap_schedule(params))]).astype(np.int64)


def pass_indices(num_packets: int, params: SamplingParams) -> np.ndarray:
    """Index matrix (valid_passes, subflow_len) of packets picked by each complete pass."""
    if num_packets < params.min_flow_packets:
        return np.zeros((0, params.subflow_len), np.int64)
    offsets = pass_offsets(params)
    starts = np.arange(params.passes, dtype=np.int64) * params.start_step
    starts = starts[starts + offsets[-1] <= num_packets - 1]
    return starts[:, None] + offsets[None, :]


def _encode(flow: Flow, idx: np.ndarray, norm: EncodingParams) -> np.ndarray:
    signed = flow.directions[idx].astype(np.float64) * flow.lengths[idx]
    ts = flow.timestamps[idx]
    out = np.empty(idx.shape + (2,), np.float32)
    out[..., 0] = np.clip(signed / norm.len_scale, -1.0, 1.0)
    out[..., 1] = np.clip((ts - ts[..., :1]) / norm.time_scale, 0.0, 1.0)
    return out


def encode_subflow(flow: Flow, packet_indices: Sequence[int], norm: EncodingParams = EncodingParams()) -> Subflow:
    idx = np.asarray(packet_indices, dtype=np.int64)
    if idx.ndim != 1 or np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= len(flow):
        raise IndexError("packet indices must be strictly increasing and inside the flow")
    return Subflow(_encode(flow, idx, norm), flow.flow_id, flow.label)


def sample_subflows(flow: Flow, params: SamplingParams, norm: EncodingParams = EncodingParams()) -> list[Subflow]:
    idx = pass_indices(len(flow), params)
    values = _encode(flow, idx, norm)
    return [Subflow(v, flow.flow_id, flow.label) for v in values]


def sample_flows(flows: Sequence[Flow], params: SamplingParams, norm: EncodingParams = EncodingParams(),
                 features: dict | None = None) -> SubflowSet:
    """Sample every flow into one column-wise set, in flow order then pass order.

    ``features`` maps flow_id to that flow's statistics vector; when given,
    every subflow carries its source flow's vector as regression target.
    """
    values, ids, labels, feats = [], [], [], []
    for flow in flows:
        idx = pass_indices(len(flow), params)
        if len(idx) == 0:
            continue
        values.append(_encode(flow, idx, norm))
        ids.extend([flow.flow_id] * len(idx))
        labels.append(np.full(len(idx), NO_LABEL if flow.label is None else flow.label, np.int64))
        if features is not None:
            feats.append(np.repeat(np.asarray(features[flow.flow_id], np.float32)[None], len(idx), axis=0))
    if not values:
        nf = None
        if features is not None:
            nf = len(next(iter(features.values()))) if features else 24
        return SubflowSet.empty(params.subflow_len, nf)
    return SubflowSet(
        np.concatenate(values),
        np.array(ids, dtype=object),
        np.concatenate(labels),
        np.concatenate(feats) if features is not None else None,
    )
