"""Run configuration and cluster manifest files (TOML).

See ``configs/example.toml`` in the repository for an annotated example of
every key.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..comm.transport import LinkShape, NodeAddress, PriorityPolicy, SERVER_ID
from ..errors import ConfigError
from ..network import LayerKind, LayerSpec, ModelSpec
from ..solver import LrPolicy, SolverConfig
from ..worker import Protocol

_LAYER_KEYS = {"type", "units", "channels", "kernel", "stride", "pad", "size", "bias"}


def model_from_dict(d: dict) -> ModelSpec:
    try:
        layers = []
        for i, ld in enumerate(d["layers"], start=1):
            unknown = set(ld) - _LAYER_KEYS
            if unknown:
                raise ConfigError(f"layer {i}: unknown keys {sorted(unknown)}")
            kind = LayerKind(ld["type"])
            kw = {k: v for k, v in ld.items() if k != "type"}
            layers.append(LayerSpec(kind, **kw))
        return ModelSpec(tuple(d["input_shape"]), int(d["classes"]), layers)
    except KeyError as exc:
        raise ConfigError(f"model section missing key {exc}") from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "cifar10"
    path: str | None = None
    limit: int | None = None
    classes: int = 10
    dim: int = 32
    n: int = 2000
    margin: float = 4.0


@dataclass(frozen=True)
class DelayConfig:
    forward_ms: float = 0.0
    backward_ms: float = 0.0
    jitter_ms: float = 0.0

    def function(self, seed: int):
        if not (self.forward_ms or self.backward_ms or self.jitter_ms):
            return None
        fwd, bwd, jit = self.forward_ms / 1e3, self.backward_ms / 1e3, self.jitter_ms / 1e3

        def delay(worker, t, layer, phase):
            base = fwd if phase == "forward" else bwd
            if jit:
                rng = np.random.default_rng([seed, worker, t, layer, phase == "forward"])
                base += jit * rng.random()
            return base

        return delay


@dataclass(frozen=True)
class OutputConfig:
    metrics: str | None = None
    curve: str | None = None
    checkpoint: str | None = None
    events: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    solver: SolverConfig
    workers: int = 1
    batch_size: int = 8
    staleness: int = 0
    protocol: Protocol = Protocol.AUTO
    dwbp: bool = True
    transport: str = "inproc"
    link: LinkShape = field(default_factory=LinkShape)
    data: DataConfig = field(default_factory=DataConfig)
    delays: DelayConfig = field(default_factory=DelayConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    iters: int = 100
    seed: int = 0
    precision: int = 64
    manifest: str | None = None
    resume: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        if self.transport not in ("inproc", "tcp"):
            raise ConfigError(f"transport must be inproc or tcp, got {self.transport!r}")
        if self.workers < 1 or self.batch_size < 1 or self.iters < 1:
            raise ConfigError("workers, batch_size and iters must be positive")
        if self.staleness < 0:
            raise ConfigError("staleness must be >= 0")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.data.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if self.data.source == "cifar10" and self.data.path and not Path(self.data.path).exists():
            raise ConfigError(f"data path {self.data.path} does not exist")
        if self.manifest and not Path(self.manifest).exists():
            raise ConfigError(f"manifest {self.manifest} does not exist")

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _section(d: dict, name: str, cls):
    sec = d.get(name, {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(sec) - names
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys {sorted(unknown)}")
    return cls(**sec)


def config_from_dict(d: dict, base_dir: Path | None = None) -> RunConfig:
    d = dict(d)
    if "model" not in d:
        raise ConfigError("config needs a [model] section")
    model = model_from_dict(d["model"])
    iters = int(d.get("iters", 100))
    solver_d = dict(d.get("solver", {}))
    solver_d.setdefault("total_iters", iters)
    try:
        solver_d["lr_policy"] = LrPolicy(solver_d.get("lr_policy", "fixed"))
        solver = SolverConfig(**solver_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[solver]: {exc}") from None
    cl = d.get("cluster", {})
    known_cl = {"workers", "batch_size", "staleness", "protocol", "dwbp", "transport", "manifest"}
    if set(cl) - known_cl:
        raise ConfigError(f"[cluster] has unknown keys {sorted(set(cl) - known_cl)}")
    data = _section(d, "data", DataConfig)
    if data.path and base_dir is not None and not Path(data.path).is_absolute():
        data = dataclasses.replace(data, path=str(base_dir / data.path))
    manifest = cl.get("manifest")
    if manifest and base_dir is not None and not Path(manifest).is_absolute():
        manifest = str(base_dir / manifest)
    return RunConfig(
        model=model,
        solver=solver,
        workers=int(cl.get("workers", 1)),
        batch_size=int(cl.get("batch_size", 8)),
        staleness=int(cl.get("staleness", 0)),
        protocol=cl.get("protocol", "auto"),
        dwbp=bool(cl.get("dwbp", True)),
        transport=cl.get("transport", "inproc"),
        link=_section(d, "link", LinkShape),
        data=data,
        delays=_section(d, "delays", DelayConfig),
        output=_section(d, "output", OutputConfig),
        iters=iters,
        seed=int(d.get("seed", 0)),
        precision=int(d.get("precision", 64)),
        manifest=manifest,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            d = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(d, path.parent)


@dataclass(frozen=True)
class Manifest:
    nodes: dict  # node_id -> NodeAddress

    @property
    def worker_ids(self) -> list:
        return sorted(n for n in self.nodes if n != SERVER_ID)

    @property
    def num_workers(self) -> int:
        return len(self.worker_ids)


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            d = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"manifest {path} not found") from None
    return manifest_from_dict(d)


def manifest_from_dict(d: dict) -> Manifest:
    nodes = {}
    servers = 0
    for n in d.get("nodes", []):
        role = n.get("role")
        nid = int(n["id"])
        if role == "server":
            servers += 1
            if nid != SERVER_ID:
                raise ConfigError("the server must have id 0")
        elif role != "worker" or nid < 1:
            raise ConfigError(f"node {nid}: workers need role 'worker' and id >= 1")
        if nid in nodes:
            raise ConfigError(f"duplicate node id {nid}")
        nodes[nid] = NodeAddress(nid, str(n.get("host", "127.0.0.1")), int(n["port"]))
    if servers != 1:
        raise ConfigError("manifest needs exactly one server")
    workers = sorted(k for k in nodes if k != SERVER_ID)
    if workers != list(range(1, len(workers) + 1)):
        raise ConfigError("worker ids must be 1..P")
    return Manifest(nodes)


def manifest_to_toml(m: Manifest) -> str:
    lines = []
    for nid in sorted(m.nodes):
        a = m.nodes[nid]
        role = "server" if nid == SERVER_ID else "worker"
        lines += ["[[nodes]]", f"id = {nid}", f'role = "{role}"', f'host = "{a.host}"', f"port = {a.port}", ""]
    return "\n".join(lines)


__all__ = [
    "RunConfig", "DataConfig", "DelayConfig", "OutputConfig", "Manifest",
    "load_config", "config_from_dict", "model_from_dict", "load_manifest", "manifest_from_dict",
    "manifest_to_toml", "PriorityPolicy",
]
