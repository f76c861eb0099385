"""Core domain types: packets, flows, subflows and dataset partitions.

Flows are stored column-wise (one numpy array per packet attribute) since
realistic flows run to thousands of packets; ``Flow.packets`` materialises
the row view when it is needed.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import EmptyFlow, NonPositiveLength

NO_LABEL = -1


class Direction(enum.IntEnum):
    FORWARD = 1
    BACKWARD = -1


@dataclass(frozen=True)
class Packet:
    timestamp: float
    length: int
    direction: Direction

    def __post_init__(self):
        if self.length < 1:
            raise NonPositiveLength(f"packet length {self.length} < 1")
        if not self.timestamp >= 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        object.__setattr__(self, "direction", Direction(self.direction))


@dataclass(frozen=True, eq=False)
class Flow:
    """A labelled (or unlabelled) sequence of directional packets."""

    flow_id: str
    label: Optional[int]
    timestamps: np.ndarray
    lengths: np.ndarray
    directions: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        ln = np.asarray(self.lengths, dtype=np.int64)
        dr = np.asarray(self.directions, dtype=np.int8)
        if not (ts.ndim == ln.ndim == dr.ndim == 1 and len(ts) == len(ln) == len(dr)):
            raise ValueError("timestamps, lengths and directions must be 1-D and equally long")
        for name, arr in (("timestamps", ts), ("lengths", ln), ("directions", dr)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_packets(cls, flow_id: str, label: Optional[int], packets: Sequence[Packet]) -> "Flow":
        return cls(
            flow_id,
            label,
            np.array([p.timestamp for p in packets], dtype=np.float64),
            np.array([p.length for p in packets], dtype=np.int64),
            np.array([int(p.direction) for p in packets], dtype=np.int8),
        )

    @property
    def packets(self) -> list[Packet]:
        return [
            Packet(float(t), int(n), Direction(int(d)))
            for t, n, d in zip(self.timestamps, self.lengths, self.directions)
        ]

    def __len__(self) -> int:
        return len(self.timestamps)

    def __eq__(self, other):
        if not isinstance(other, Flow):
            return NotImplemented
        return (
            self.flow_id == other.flow_id
            and self.label == other.label
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.lengths, other.lengths)
            and np.array_equal(self.directions, other.directions)
        )

    def __repr__(self):
        return f"Flow(flow_id={self.flow_id!r}, label={self.label}, packets={len(self)})"


def validate_flow(flow: Flow) -> Flow:
    """Sort packets stably by time and rebase the clock to the first packet.

    A flow that already satisfies both invariants is returned as is.
    """
    if len(flow) == 0:
        raise EmptyFlow(f"flow {flow.flow_id!r} has no packets")
    if np.any(flow.lengths < 1):
        raise NonPositiveLength(f"flow {flow.flow_id!r} has a packet shorter than 1 byte")
    if not np.all(np.isfinite(flow.timestamps)):
        raise ValueError(f"flow {flow.flow_id!r} has non-finite timestamps")
    if not np.all(np.abs(flow.directions) == 1):
        raise ValueError(f"flow {flow.flow_id!r} has a direction other than +1/-1")

    ts = flow.timestamps
    if np.all(ts[1:] >= ts[:-1]) and ts[0] == 0.0:
        return flow
    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    return Flow(
        flow.flow_id,
        flow.label,
        ts - ts[0],
        flow.lengths[order],
        flow.directions[order],
    )


@dataclass(frozen=True, eq=False)
class Subflow:
    """One sampled slice of a flow: ``values[:, 0]`` signed length, ``values[:, 1]`` relative time."""

    values: np.ndarray
    source_flow_id: str
    label: Optional[int] = None


@dataclass(eq=False)
class SubflowSet:
    """Column-wise collection of equally long subflows.

    ``features`` holds the per-example regression target (the source flow's
    statistics) and is None for labelled server-side sets.
    """

    values: np.ndarray  # (n, subflow_len, 2) float32
    flow_ids: np.ndarray  # (n,) object
    labels: np.ndarray  # (n,) int64, NO_LABEL when absent
    features: Optional[np.ndarray] = None  # (n, num_features) float32

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.flow_ids = np.asarray(self.flow_ids, dtype=object)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float32)
        n = len(self.values)
        if len(self.flow_ids) != n or len(self.labels) != n:
            raise ValueError("subflow set columns differ in length")
        if self.features is not None and len(self.features) != n:
            raise ValueError("feature column differs in length")

    @classmethod
    def empty(cls, subflow_len: int = 45, num_features: Optional[int] = None) -> "SubflowSet":
        feats = None if num_features is None else np.zeros((0, num_features), np.float32)
        return cls(np.zeros((0, subflow_len, 2), np.float32), np.array([], dtype=object),
                   np.zeros(0, np.int64), feats)

    @classmethod
    def from_subflows(cls, subflows: Sequence[Subflow], features=None, subflow_len: int = 45) -> "SubflowSet":
        if not subflows:
            nf = None if features is None else np.asarray(features).reshape(0, -1).shape[1]
            return cls.empty(subflow_len, nf)
        return cls(
            np.stack([s.values for s in subflows]),
            np.array([s.source_flow_id for s in subflows], dtype=object),
            np.array([NO_LABEL if s.label is None else s.label for s in subflows]),
            None if features is None else np.asarray(features),
        )

    @classmethod
    def concat(cls, sets: Sequence["SubflowSet"]) -> "SubflowSet":
        sets = list(sets)
        if not sets:
            return cls.empty()
        has_features = [s.features is not None for s in sets]
        if any(has_features) and not all(has_features):
            raise ValueError("cannot concatenate sets with and without features")
        return cls(
            np.concatenate([s.values for s in sets]),
            np.concatenate([s.flow_ids for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.features for s in sets]) if all(has_features) else None,
        )

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            label = int(self.labels[idx])
            return Subflow(self.values[idx], self.flow_ids[idx], None if label == NO_LABEL else label)
        return SubflowSet(
            self.values[idx],
            self.flow_ids[idx],
            self.labels[idx],
            None if self.features is None else self.features[idx],
        )

    def __iter__(self) -> Iterator[Subflow]:
        for i in range(len(self)):
            yield self[i]

    @property
    def model_inputs(self) -> np.ndarray:
        """Batch in channels-first layout (n, 2, subflow_len) as the networks expect."""
        return np.ascontiguousarray(self.values.transpose(0, 2, 1))


@dataclass
class DatasetPartition:
    """Unlabelled client shards plus the labelled server train/test split."""

    client_datasets: list[SubflowSet]
    server_train: SubflowSet
    server_test: SubflowSet
    num_classes: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return sum(len(c) for c in self.client_datasets)
