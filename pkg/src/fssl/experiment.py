"""Experiment configuration and the preprocess -> pretrain -> retrain -> evaluate pipeline.

Config files are flat ``section.key = value`` lines (``#`` starts a
comment). Every key has a default; see :func:`to_flat` for the full list.

Output directory layout::

    data/{unlabeled,labeled}.jsonl          flow records (synthetic source only)
    preprocess-<method>/client_NNN.fssc     unlabelled client shards
    preprocess-<method>/server_{train,test}.fssc
    <mode>-<method>/pretrain.ckpt, rounds.jsonl, rounds.tsv
    <mode>-<method>/classifier.ckpt, metrics.json, per_class.tsv
    compare.json, compare.tsv               from compare_modes
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ._io import atomic_write
from .errors import ConfigError, StageError
from .features import NUM_FEATURES, features_by_flow
from .federation import (FederationConfig, RetrainConfig, run_pretraining, retrain_server, train_centralized,
                         write_round_log)
from .flows import DatasetPartition, SubflowSet
from .ingest import (generate_synthetic_dataset, load_subflow_cache, partition_to_clients, read_flow_records,
                     save_subflow_cache, write_flow_records)
from .metrics import Metrics, evaluate_model
from .models import ModelWidths, load_checkpoint, save_checkpoint
from .sampling import EncodingParams, Method, SamplingParams, sample_flows

log = logging.getLogger(__name__)

MODES = ("fssl", "centralized")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "files"
    unlabeled_path: str = ""
    labeled_path: str = ""
    unlabeled_flows_per_class: int = 400
    labeled_flows_per_class: int = 30
    packets_min: int = 1000
    packets_max: int = 1300
    num_classes: int = 0  # 0 = one more than the largest label seen


@dataclass(frozen=True)
class RetrainSection:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.001
    train_fraction: float = 2 / 3


@dataclass(frozen=True)
class CompareSection:
    methods: str = ""  # comma-separated; empty = sampling.method only


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    sampling: SamplingParams = SamplingParams()
    encoding: EncodingParams = EncodingParams()
    federation: FederationConfig = FederationConfig()
    retrain: RetrainSection = RetrainSection()
    model: ModelWidths = ModelWidths()
    compare: CompareSection = CompareSection()
    mode: str = "fssl"
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.retrain.train_fraction < 1:
            raise ConfigError("retrain.train_fraction must lie in (0, 1)")
        if self.data.source not in ("synthetic", "files"):
            raise ConfigError(f"data.source must be 'synthetic' or 'files', got {self.data.source!r}")
        if self.model.subflow_len != self.sampling.subflow_len:
            raise ConfigError("model.subflow_len must equal sampling.subflow_len")


# keys that the top-level seed owns
_SKIPPED = {("federation", "seed")}

# scaled-down protocol used by the acceptance experiment: 10 clients, 20
# rounds, 20 sampling passes per flow; everything else at the paper's values
DESK_OVERRIDES = {
    "federation.K": "10",
    "federation.C": "0.8",
    "federation.R": "20",
    "sampling.passes": "20",
    "sampling.method": "incremental",
}
PRESETS = {"paper": {}, "desk": DESK_OVERRIDES}


def _sections(cfg: ExperimentConfig):
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            yield f.name, value


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Method):
        return value.value
    return repr(value) if isinstance(value, float) else str(value)


def to_flat(cfg: ExperimentConfig) -> dict:
    flat = {}
    for section, obj in _sections(cfg):
        for f in fields(obj):
            if (section, f.name) not in _SKIPPED:
                flat[f"{section}.{f.name}"] = _fmt(getattr(obj, f.name))
    for key in ("mode", "seed", "out"):
        flat[key] = _fmt(getattr(cfg, key))
    return flat


def _coerce(text: str, kind, key: str):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if isinstance(kind, type) and issubclass(kind, Method):
            return Method(text.strip().lower())
        return text.strip()
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def from_flat(flat: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Apply ``{"section.key": "text"}`` overrides on top of ``base`` (or the defaults)."""
    base = base or ExperimentConfig()
    sections = dict(_sections(base))
    changes: dict = {name: {} for name in sections}
    top = {}
    top_hints = typing.get_type_hints(ExperimentConfig)
    for key, text in flat.items():
        section, _, name = key.partition(".")
        if not name:
            if key not in ("mode", "seed", "out"):
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(str(text), top_hints[key], key)
            continue
        if section not in sections or (section, name) in _SKIPPED:
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(sections[section]))
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        changes[section][name] = _coerce(str(text), hints[name], key)
    try:
        new_sections = {name: replace(obj, **changes[name]) for name, obj in sections.items()}
        return replace(base, **new_sections, **top)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str) -> dict:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        flat[key.strip()] = value.strip()
    return flat


def load_config(path=None, overrides: Optional[dict] = None, preset: str = "paper") -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = from_flat(PRESETS[preset])
    if path:
        cfg = from_flat(parse_config_text(Path(path).read_text(encoding="utf-8")), cfg)
    if overrides:
        cfg = from_flat(overrides, cfg)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def federation_config(cfg: ExperimentConfig) -> FederationConfig:
    return replace(cfg.federation, seed=cfg.seed)


def retrain_config(cfg: ExperimentConfig) -> RetrainConfig:
    r = cfg.retrain
    return RetrainConfig(r.epochs, r.batch_size, r.lr, cfg.seed)


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------

def preprocess_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / f"preprocess-{cfg.sampling.method.value}"


def run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / f"{cfg.mode}-{cfg.sampling.method.value}"


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

@_stage("datagen")
def stage_datagen(cfg: ExperimentConfig):
    """Generate the unlabelled (client) and labelled (server) synthetic flows."""
    d = cfg.data
    span = (d.packets_min, d.packets_max)
    unlabeled = generate_synthetic_dataset(flows_per_class=d.unlabeled_flows_per_class, packets_per_flow_range=span,
                                           seed=[cfg.seed, 10], id_prefix="u", labelled=False)
    labeled = generate_synthetic_dataset(flows_per_class=d.labeled_flows_per_class, packets_per_flow_range=span,
                                         seed=[cfg.seed, 11], id_prefix="l")
    data_dir = Path(cfg.out) / "data"
    write_flow_records(unlabeled, data_dir / "unlabeled.jsonl")
    write_flow_records(labeled, data_dir / "labeled.jsonl")
    log.info("generated %d unlabelled and %d labelled flows", len(unlabeled), len(labeled))
    return unlabeled, labeled


def _flow_paths(cfg: ExperimentConfig):
    if cfg.data.source == "files":
        return Path(cfg.data.unlabeled_path), Path(cfg.data.labeled_path)
    data_dir = Path(cfg.out) / "data"
    return data_dir / "unlabeled.jsonl", data_dir / "labeled.jsonl"


def load_flows(cfg: ExperimentConfig):
    unl_path, lab_path = _flow_paths(cfg)
    if cfg.data.source == "synthetic" and not (unl_path.exists() and lab_path.exists()):
        return stage_datagen(cfg)
    return read_flow_records(unl_path), read_flow_records(lab_path)


def split_labelled_flows(flows, train_fraction: float, seed):
    """Per-class split of whole flows so no flow contributes to both sides."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in sorted({f.label for f in flows}):
        group = [f for f in flows if f.label == label]
        order = rng.permutation(len(group))
        cut = int(round(train_fraction * len(group)))
        train += [group[i] for i in sorted(order[:cut])]
        test += [group[i] for i in sorted(order[cut:])]
    return train, test


@_stage("preprocess")
def stage_preprocess(cfg: ExperimentConfig, unlabeled=None, labeled=None) -> DatasetPartition:
    """Sample subflows, attach flow statistics, shard clients, split the server set."""
    if unlabeled is None or labeled is None:
        unlabeled, labeled = load_flows(cfg)
    if any(f.label is None for f in labeled):
        raise ValueError("the labelled flow file contains flows without a label")
    feats = features_by_flow(unlabeled, cfg.encoding)
    pool = sample_flows(unlabeled, cfg.sampling, cfg.encoding, features=feats)
    clients = partition_to_clients(pool, cfg.federation.K, [cfg.seed, 20])
    train_flows, test_flows = split_labelled_flows(labeled, cfg.retrain.train_fraction, [cfg.seed, 21])
    server_train = sample_flows(train_flows, cfg.sampling, cfg.encoding)
    server_test = sample_flows(test_flows, cfg.sampling, cfg.encoding)
    num_classes = cfg.data.num_classes or 1 + max(f.label for f in labeled)

    out = preprocess_dir(cfg)
    for k, shard in enumerate(clients):
        save_subflow_cache(shard, out / f"client_{k:03d}.fssc")
    save_subflow_cache(server_train, out / "server_train.fssc")
    save_subflow_cache(server_test, out / "server_test.fssc")
    manifest = {
        "clients": cfg.federation.K,
        "client_sizes": [len(c) for c in clients],
        "num_classes": num_classes,
        "server_train": len(server_train),
        "server_test": len(server_test),
        "server_train_per_class": np.bincount(server_train.labels, minlength=num_classes).tolist(),
        "server_test_per_class": np.bincount(server_test.labels, minlength=num_classes).tolist(),
        "unlabelled_subflows": len(pool),
    }
    with atomic_write(out / "manifest.json") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    log.info("preprocess: %d client subflows over %d clients, %d/%d server train/test",
             len(pool), len(clients), len(server_train), len(server_test))
    return DatasetPartition(clients, server_train, server_test, num_classes, manifest)


def load_partition(cfg: ExperimentConfig) -> DatasetPartition:
    out = preprocess_dir(cfg)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    clients = [load_subflow_cache(out / f"client_{k:03d}.fssc") for k in range(manifest["clients"])]
    return DatasetPartition(clients, load_subflow_cache(out / "server_train.fssc"),
                            load_subflow_cache(out / "server_test.fssc"), manifest["num_classes"], manifest)


@_stage("pretrain")
def stage_pretrain(cfg: ExperimentConfig, partition: Optional[DatasetPartition] = None):
    """Federated (FSSL) or pooled (centralized) pretraining of the regression model."""
    partition = partition or load_partition(cfg)
    fed = federation_config(cfg)
    out = run_dir(cfg)
    if cfg.mode == "fssl":
        params, records = run_pretraining(partition.client_datasets, fed, cfg.model, NUM_FEATURES)
        losses = [r.global_loss for r in records]
        write_round_log(records, out / "rounds.jsonl")
    else:
        pooled = SubflowSet.concat(partition.client_datasets)
        params, losses = train_centralized(pooled, fed, cfg.model, NUM_FEATURES)
        records = []
    with atomic_write(out / "rounds.tsv") as fh:
        fh.write("round\tloss\n")
        for i, loss in enumerate(losses, start=1):
            fh.write(f"{i}\t{loss!r}\n")
    save_checkpoint(params, out / "pretrain.ckpt")
    return params, records


@_stage("retrain")
def stage_retrain(cfg: ExperimentConfig, pretrained=None, partition: Optional[DatasetPartition] = None):
    """Transfer the backbone and fit the classifier on the server's labelled subflows."""
    partition = partition or load_partition(cfg)
    pretrained = pretrained or load_checkpoint(run_dir(cfg) / "pretrain.ckpt")
    params, history = retrain_server(pretrained, partition.server_train, retrain_config(cfg),
                                     partition.num_classes, cfg.model)
    save_checkpoint(params, run_dir(cfg) / "classifier.ckpt")
    return params


def _echo(cfg: ExperimentConfig) -> dict:
    # the output directory is left out so reports compare equal across locations
    flat = to_flat(cfg)
    del flat["out"]
    return flat


def metrics_report(cfg: ExperimentConfig, metrics: Metrics, partition: DatasetPartition) -> dict:
    return {
        "mode": cfg.mode,
        "sampling": cfg.sampling.method.value,
        "seed": cfg.seed,
        "averaging": "macro",
        "evaluation_unit": "subflow",
        "metrics": metrics.to_dict(),
        "counts": {
            "client_subflows": partition.n,
            "server_train": len(partition.server_train),
            "server_test": len(partition.server_test),
        },
        "config": _echo(cfg),
    }


@_stage("evaluate")
def stage_evaluate(cfg: ExperimentConfig, classifier=None, partition: Optional[DatasetPartition] = None) -> Metrics:
    partition = partition or load_partition(cfg)
    classifier = classifier or load_checkpoint(run_dir(cfg) / "classifier.ckpt")
    metrics = evaluate_model(classifier, partition.server_test, partition.num_classes)
    out = run_dir(cfg)
    with atomic_write(out / "metrics.json") as fh:
        json.dump(metrics_report(cfg, metrics, partition), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with atomic_write(out / "per_class.tsv") as fh:
        fh.write("class\tprecision\trecall\tf1\tsupport\n")
        for k, c in enumerate(metrics.per_class):
            fh.write(f"{k}\t{c.precision!r}\t{c.recall!r}\t{c.f1!r}\t{c.support}\n")
    log.info("%s/%s accuracy %.4f", cfg.mode, cfg.sampling.method.value, metrics.accuracy)
    return metrics


def run_pipeline(cfg: ExperimentConfig, partition: Optional[DatasetPartition] = None):
    """Preprocess, pretrain, retrain and evaluate; returns (Metrics, round records)."""
    started = time.perf_counter()
    if partition is None:
        partition = stage_preprocess(cfg)
    pretrained, records = stage_pretrain(cfg, partition)
    classifier = stage_retrain(cfg, pretrained, partition)
    metrics = stage_evaluate(cfg, classifier, partition)
    log.info("pipeline %s/%s finished in %.1fs", cfg.mode, cfg.sampling.method.value, time.perf_counter() - started)
    return metrics, records


def compare_methods(cfg: ExperimentConfig) -> list:
    if not cfg.compare.methods.strip():
        return [cfg.sampling.method]
    try:
        return [Method(m.strip().lower()) for m in cfg.compare.methods.split(",") if m.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def compare_modes(cfg: ExperimentConfig) -> dict:
    """Run FSSL and centralized pretraining on shared preprocessing, per sampling method.

    The gap is centralized accuracy minus FSSL accuracy.
    """
    blocks, gaps = [], {}
    for method in compare_methods(cfg):
        base = replace(cfg, sampling=replace(cfg.sampling, method=method))
        partition = stage_preprocess(base)
        acc = {}
        for mode in MODES:
            metrics, _ = run_pipeline(replace(base, mode=mode), partition)
            acc[mode] = metrics.accuracy
            blocks.append({"mode": mode, "sampling": method.value, "metrics": metrics.to_dict()})
        gaps[method.value] = acc["centralized"] - acc["fssl"]
    report = {"seed": cfg.seed, "blocks": blocks, "accuracy_gap": gaps, "config": _echo(cfg)}
    out = Path(cfg.out)
    with atomic_write(out / "compare.json") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with atomic_write(out / "compare.tsv") as fh:
        fh.write("sampling\tmode\taccuracy\tmacro_precision\tmacro_recall\tmacro_f1\n")
        for b in blocks:
            m = b["metrics"]
            fh.write(f"{b['sampling']}\t{b['mode']}\t{m['accuracy']!r}\t{m['macro']['precision']!r}\t"
                     f"{m['macro']['recall']!r}\t{m['macro']['f1']!r}\n")
    return report
