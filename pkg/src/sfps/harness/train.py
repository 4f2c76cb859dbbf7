"""End-to-end training runs driven by a :class:`RunConfig`."""
from __future__ import annotations

import csv
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..factors import Strategy, cost
from ..network import ModelSpec, init_params
from .checkpoint import load_checkpoint, save_checkpoint
from .cluster import ClusterResult, cluster_snapshot, run_inproc
from .config import RunConfig, load_manifest
from .data import BatchSchedule, Dataset, batch_source, find_cifar10, load_cifar10, synth_dataset

log = logging.getLogger(__name__)

DIRECTIONS = ("push", "pull", "broadcast")


def build_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    spec = cfg.model
    if d.source == "synthetic":
        if d.dim != spec.input_dim or d.classes != spec.num_classes:
            raise ConfigError(
                f"synthetic data is {d.dim}-d with {d.classes} classes, "
                f"model wants {spec.input_dim}-d with {spec.num_classes}"
            )
        return synth_dataset(d.classes, d.dim, d.n, cfg.seed, d.margin)
    path = d.path or find_cifar10()
    if path is None:
        raise ConfigError("CIFAR-10 binaries not found; set data.path or $CIFAR10_DIR")
    ds = load_cifar10(path, train=True, limit=d.limit)
    if ds.features.shape[1] != spec.input_dim or ds.num_classes != spec.num_classes:
        raise ConfigError("CIFAR-10 images do not fit the model's input layer")
    return ds


@dataclass
class RunInputs:
    dataset: Dataset
    schedule: BatchSchedule
    batches: object
    init_state: object


def build_inputs(cfg: RunConfig) -> RunInputs:
    ds = build_dataset(cfg)
    sched = BatchSchedule(len(ds), cfg.workers, cfg.batch_size, cfg.seed)
    return RunInputs(ds, sched, batch_source(ds, sched, cfg.dtype), init_params(cfg.model, cfg.seed, cfg.dtype))


def sfb_floats_note(spec: ModelSpec, P: int, K: int, layer: int) -> dict:
    """Cost-model formula next to what point-to-point broadcast actually sends."""
    prof = spec.profile(layer)
    bias = prof.M if prof.bias else 0
    return {
        "formula": cost(Strategy.SF_BROADCAST, P, K, prof.M, prof.N).floats,
        "unicast": P * (P - 1) * (K * (prof.M + prof.N) + bias),
    }


def iteration_records(result: ClusterResult, spec: ModelSpec, P: int, K: int) -> list[dict]:
    """One metrics record per iteration, aggregated over workers."""
    by_iter = defaultdict(list)
    for reps in result.reports.values():
        for r in reps:
            by_iter[r.iteration].append(r)
    floats = defaultdict(lambda: defaultdict(lambda: dict.fromkeys(DIRECTIONS, 0)))
    for wk in result.workers.values():
        for (t, layer, d), n in wk.floats.items():
            if d == "bcast_in":
                continue  # already counted once by the sender
            key = "broadcast" if d == "bcast_out" else d
            floats[t][layer][key] += n
    decisions = {str(l): Strategy(s).value for l, s in result.strategies.items()}
    sfb = [l for l, s in result.strategies.items() if s is Strategy.SF_BROADCAST]
    records = []
    for t in sorted(by_iter):
        reps = sorted(by_iter[t], key=lambda r: r.worker_id)
        per_layer = {str(l): dict(floats[t][l]) for l in sorted(result.strategies)}
        rec = {
            "iteration": t,
            "time": max(r.end for r in reps),
            "loss": float(np.mean([r.loss for r in reps])),
            "worker_loss": {str(r.worker_id): r.loss for r in reps},
            "floats": per_layer,
            "total_floats": sum(sum(v.values()) for v in per_layer.values()),
            "decisions": decisions,
            "staleness": max(r.staleness for r in reps),
        }
        if sfb:
            rec["sfb_floats"] = {
                str(l): {**sfb_floats_note(spec, P, K, l), "measured": floats[t][l]["broadcast"]} for l in sfb
            }
        records.append(rec)
    return records


def write_jsonl(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def write_curve(records, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "time", "loss", "total_floats", "staleness"])
        for r in records:
            w.writerow([r["iteration"], repr(r["time"]), repr(r["loss"]), r["total_floats"], r["staleness"]])


def write_events(events: dict, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for w, evs in sorted(events.items()):
        p = d / f"worker{w}.events.jsonl"
        write_jsonl(evs, p)
        out.append(p)
    return out


@dataclass
class TrainResult:
    cluster: ClusterResult
    records: list
    first: int
    last: int
    checkpoint_digest: str | None = None

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.records]


def train(cfg: RunConfig) -> TrainResult:
    """Run iterations up to ``cfg.iters`` and write the configured outputs."""
    inputs = build_inputs(cfg)
    first, snapshot = 1, None
    if cfg.resume:
        snapshot, first = load_checkpoint(cfg.resume, cfg.model)
        if len(snapshot["workers"]) != cfg.workers:
            raise ConfigError(f"checkpoint has {len(snapshot['workers'])} workers, config asks for {cfg.workers}")
    if first > cfg.iters:
        raise ConfigError(f"nothing to do: checkpoint resumes at {first}, budget is {cfg.iters}")
    iters = cfg.iters - first + 1
    delays = cfg.delays.function(cfg.seed)
    kw = dict(
        staleness=cfg.staleness, protocol=cfg.protocol, dwbp=cfg.dwbp, shape=cfg.link,
        first=first, snapshot=snapshot,
    )
    if delays is not None:
        kw["delays"] = delays
    args = (cfg.model, inputs.init_state, cfg.solver, cfg.workers, cfg.batch_size, inputs.batches, iters)
    if cfg.transport == "inproc":
        result = run_inproc(*args, **kw)
    else:
        from .nodes import run_tcp_local

        manifest = load_manifest(cfg.manifest) if cfg.manifest else None
        if manifest is not None and manifest.num_workers != cfg.workers:
            raise ConfigError(f"manifest lists {manifest.num_workers} workers, config asks for {cfg.workers}")
        result = run_tcp_local(*args, manifest=manifest, **kw)
    records = iteration_records(result, cfg.model, cfg.workers, cfg.batch_size)
    out = cfg.output
    for p in (out.metrics, out.curve, out.checkpoint):
        if p:
            Path(p).parent.mkdir(parents=True, exist_ok=True)
    if out.metrics:
        write_jsonl(records, out.metrics)
    if out.curve:
        write_curve(records, out.curve)
    if out.events:
        write_events(result.events, out.events)
    digest = None
    if out.checkpoint:
        extra = {"seed": cfg.seed, "workers": cfg.workers, "batch_size": cfg.batch_size}
        digest = save_checkpoint(out.checkpoint, cluster_snapshot(result), cfg.model, cfg.iters + 1, extra)
    return TrainResult(result, records, first, cfg.iters, digest)
