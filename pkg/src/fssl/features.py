"""Per-flow statistics used as the pretraining regression target.

24 values: for each direction group (forward, backward, all) and each
quantity (packet length, inter-arrival time within the group) the mean,
population std, min and max. Empty groups and the IAT of groups with fewer
than two packets are all zeros.
"""
from __future__ import annotations

import numpy as np

from .errors import EmptyFlow
from .flows import Flow
from .sampling import EncodingParams

GROUPS = ("fwd", "bwd", "all")
QUANTITIES = ("len", "iat")
STATS = ("mean", "std", "min", "max")
FEATURE_NAMES = tuple(f"{g}_{q}_{s}" for g in GROUPS for q in QUANTITIES for s in STATS)
NUM_FEATURES = len(FEATURE_NAMES)


def _stats(x: np.ndarray) -> list[float]:
    if len(x) == 0:
        return [0.0] * 4
    return [float(x.mean()), float(x.std()), float(x.min()), float(x.max())]


def compute_features(flow: Flow, norm: EncodingParams = EncodingParams()) -> np.ndarray:
    if len(flow) == 0:
        raise EmptyFlow(f"flow {flow.flow_id!r} has no packets")
    masks = (flow.directions > 0, flow.directions < 0, np.ones(len(flow), bool))
    out = []
    for mask in masks:
        lengths = flow.lengths[mask].astype(np.float64)
        ts = flow.timestamps[mask]
        out += [v / norm.len_scale for v in _stats(lengths)]
        iat = np.diff(ts) if len(ts) >= 2 else np.zeros(0)
        out += [v / norm.time_scale for v in _stats(iat)]
    return np.array(out, dtype=np.float64)


def features_by_flow(flows, norm: EncodingParams = EncodingParams()) -> dict:
    return {f.flow_id: compute_features(f, norm) for f in flows}
