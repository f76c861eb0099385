"""Pretraining (regression) and retraining (classification) CNNs.

Both share a backbone::

    (2, 45) -> conv1 k5 -> relu -> pool2 -> conv2 k3 -> relu -> pool2 -> flatten -> linear1 -> relu

The pretraining model adds one linear regressor onto the flow statistics;
the classifier adds two linear layers and a softmax.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .errors import ArchitectureMismatch, FormatError, InvalidClassCount
from .nn import Conv1d, Flatten, Linear, MaxPool1d, Network, ReLU, Softmax

BACKBONE = ("conv1", "conv2", "linear1")


class Arch(enum.IntEnum):
    PRETRAIN = 0
    RETRAIN = 1


@dataclass(frozen=True)
class ModelWidths:
    conv1: int = 32
    conv2: int = 64
    kernel1: int = 5
    kernel2: int = 3
    hidden: int = 128
    head_hidden: int = 64
    subflow_len: int = 45

    @property
    def flat(self) -> int:
        length = (self.subflow_len - self.kernel1 + 1) // 2
        return self.conv2 * ((length - self.kernel2 + 1) // 2)


@dataclass(eq=False)
class ModelParams:
    arch: Arch
    entries: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.entries.items()})

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.entries.values())

    def same_layout(self, other: "ModelParams") -> bool:
        return (self.arch == other.arch
                and [(k, v.shape) for k, v in self.entries.items()]
                == [(k, v.shape) for k, v in other.entries.items()])

    def bitwise_equal(self, other: "ModelParams") -> bool:
        return self.same_layout(other) and all(
            v.dtype == other.entries[k].dtype and v.tobytes() == other.entries[k].tobytes()
            for k, v in self.entries.items())

    def __getitem__(self, name):
        return self.entries[name]


def _backbone(w: ModelWidths):
    return [
        Conv1d("conv1", 2, w.conv1, w.kernel1), ReLU("relu1"), MaxPool1d("pool1", 2),
        Conv1d("conv2", w.conv1, w.conv2, w.kernel2), ReLU("relu2"), MaxPool1d("pool2", 2),
        Flatten("flatten"), Linear("linear1", w.flat, w.hidden), ReLU("relu3"),
    ]


def pretrain_network(num_features: int = 24, widths: ModelWidths = ModelWidths()) -> Network:
    return Network(_backbone(widths) + [Linear("regress", widths.hidden, num_features)],
                   (2, widths.subflow_len))


def retrain_network(num_classes: int, widths: ModelWidths = ModelWidths()) -> Network:
    if num_classes < 2:
        raise InvalidClassCount(f"need at least 2 classes, got {num_classes}")
    return Network(_backbone(widths) + [
        Linear("linear2", widths.hidden, widths.head_hidden), ReLU("relu4"),
        Linear("linear3", widths.head_hidden, num_classes), Softmax("softmax"),
    ], (2, widths.subflow_len))


def build_pretrain_model(seed: int, num_features: int = 24, widths: ModelWidths = ModelWidths()):
    net = pretrain_network(num_features, widths)
    return net, ModelParams(Arch.PRETRAIN, net.init_params(np.random.default_rng(seed)))


def build_retrain_model(seed: int, num_classes: int, widths: ModelWidths = ModelWidths()):
    net = retrain_network(num_classes, widths)
    shared = {k: v for k, v in net.param_shapes().items() if k.split(".")[0] in BACKBONE}
    expected = {k: v for k, v in pretrain_network(widths=widths).param_shapes().items()
                if k.split(".")[0] in BACKBONE}
    if shared != expected:
        raise ArchitectureMismatch("classifier backbone does not match the pretraining backbone")
    return net, ModelParams(Arch.RETRAIN, net.init_params(np.random.default_rng(seed)))


def infer_widths(params: ModelParams, subflow_len: int = 45) -> ModelWidths:
    c1, _, k1 = params["conv1.weight"].shape
    c2, _, k2 = params["conv2.weight"].shape
    hidden = params["linear1.weight"].shape[0]
    head = params["linear2.weight"].shape[0] if "linear2.weight" in params.entries else 64
    return ModelWidths(c1, c2, k1, k2, hidden, head, subflow_len)


def network_for(params: ModelParams, subflow_len: int = 45) -> Network:
    """Rebuild the network matching a parameter set (e.g. from a checkpoint)."""
    widths = infer_widths(params, subflow_len)
    if params.arch == Arch.PRETRAIN:
        net = pretrain_network(params["regress.weight"].shape[0], widths)
    else:
        net = retrain_network(params["linear3.weight"].shape[0], widths)
    shapes = net.param_shapes()
    if list(shapes) != list(params.entries) or any(
            tuple(params[k].shape) != tuple(s) for k, s in shapes.items()):
        raise ArchitectureMismatch("parameters do not fit the rebuilt architecture")
    return net


def transfer_backbone(source: ModelParams, dest: ModelParams) -> ModelParams:
    """Copy every shape-matching entry of the pretrained model into the classifier."""
    if source.arch != Arch.PRETRAIN or dest.arch != Arch.RETRAIN:
        raise ArchitectureMismatch(f"expected PRETRAIN -> RETRAIN, got {source.arch.name} -> {dest.arch.name}")
    out = dest.copy()
    for name, value in source.entries.items():
        if name in out.entries and out.entries[name].shape == value.shape:
            out.entries[name] = value.astype(out.entries[name].dtype, copy=True)
    return out


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# "FSSL1" | arch u8 | entry count u32 | per entry: name length u16, name,
# rank u8, dims u32 each, float32 data row-major. Little-endian throughout.

MAGIC = b"FSSL1"


def save_checkpoint(params: ModelParams, path) -> None:
    with atomic_write(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BI", int(params.arch), len(params.entries)))
        for name, value in params.entries.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:5]!r}")
    try:
        arch_id, count = struct.unpack_from("<BI", data, 5)
        arch = Arch(arch_id)
        pos = 10
        entries = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise FormatError(f"{path}: truncated entry name")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = math.prod(shape)
            if pos + 4 * size > len(data):
                raise FormatError(f"{path}: truncated data for {name}")
            entries[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint ({exc})") from None
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return ModelParams(arch, entries)
