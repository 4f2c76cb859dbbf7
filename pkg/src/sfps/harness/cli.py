"""Command-line entry point: ``sfps <subcommand> ...``."""
from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import logging
import sys
import time

from ..errors import SfpsError
from .bench import bench_comm, parse_range
from .checkpoint import inspect_checkpoint
from .config import RunConfig, load_config, load_manifest


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration (TOML)")
    p.add_argument("--manifest", help="cluster manifest (TOML) for tcp runs")
    p.add_argument("--workers", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--staleness", type=int)
    p.add_argument("--protocol", choices=["auto", "full-ps", "sf-ps", "sfb"])
    p.add_argument("--dwbp", choices=["on", "off"])
    p.add_argument("--transport", choices=["inproc", "tcp"])
    p.add_argument("--bandwidth", type=float, help="link bandwidth in bytes/s (0 = unlimited)")
    p.add_argument("--latency-ms", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--metrics-out", help="JSON-lines metrics path")


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    kw = {}
    for name in ("workers", "batch_size", "staleness", "protocol", "transport", "seed", "manifest"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if getattr(args, "dwbp", None) is not None:
        kw["dwbp"] = args.dwbp == "on"
    if getattr(args, "iters", None) is not None:
        kw["iters"] = args.iters
        if cfg.solver.total_iters == cfg.iters:
            kw["solver"] = dataclasses.replace(cfg.solver, total_iters=args.iters)
    link = {}
    if getattr(args, "bandwidth", None) is not None:
        link["bandwidth"] = args.bandwidth
    if getattr(args, "latency_ms", None) is not None:
        link["latency_ms"] = args.latency_ms
    if link:
        kw["link"] = dataclasses.replace(cfg.link, **link)
    if getattr(args, "metrics_out", None):
        kw["output"] = dataclasses.replace(cfg.output, metrics=args.metrics_out)
    if getattr(args, "resume", None):
        kw["resume"] = args.resume
    return cfg.replace(**kw) if kw else cfg


def cmd_train(args) -> int:
    from .train import train

    cfg = apply_overrides(load_config(args.config), args)
    t0 = time.perf_counter()
    res = train(cfg)
    r = res.records[-1]
    print(
        f"trained iterations {res.first}..{res.last} on {cfg.workers} worker(s): "
        f"final loss {r['loss']:.6g}, {res.cluster.counter.total_floats()} floats moved, "
        f"{time.perf_counter() - t0:.2f}s wall"
    )
    if res.checkpoint_digest:
        print(f"checkpoint {cfg.output.checkpoint} sha256={res.checkpoint_digest}")
    return 0


def _node_setup(args):
    from .train import build_inputs

    cfg = apply_overrides(load_config(args.config), args)
    if not cfg.manifest:
        raise SfpsError("--manifest is required for server and worker nodes")
    manifest = load_manifest(cfg.manifest)
    cfg = cfg.replace(workers=manifest.num_workers)
    return cfg, manifest, build_inputs(cfg)


def cmd_server(args) -> int:
    from .nodes import serve

    cfg, manifest, inputs = _node_setup(args)
    server = asyncio.run(
        serve(manifest, cfg.model, inputs.init_state, cfg.solver, cfg.batch_size, cfg.staleness, cfg.protocol, cfg.link)
    )
    print(f"server done: applied through {server.applied_through}, {server.duplicates} duplicate pushes")
    return 0


def cmd_worker(args) -> int:
    from .nodes import work
    from .train import write_jsonl

    cfg, manifest, inputs = _node_setup(args)
    out = open(cfg.output.metrics, "w") if cfg.output.metrics else sys.stdout

    def on_report(wk, rep):
        rec = dataclasses.asdict(rep)
        rec["floats"] = {
            f"{l}/{d}": n for (t, l, d), n in sorted(wk.floats.items()) if t == rep.iteration
        }
        out.write(json.dumps(rec, sort_keys=True) + "\n")
        out.flush()

    try:
        wk = asyncio.run(
            work(
                manifest, args.id, cfg.model, inputs.init_state, cfg.solver, cfg.batch_size, cfg.staleness,
                cfg.protocol, cfg.dwbp, inputs.batches, 1, cfg.iters, cfg.delays.function(cfg.seed),
                cfg.link, on_report=on_report,
            )
        )
    finally:
        if out is not sys.stdout:
            out.close()
    if args.events_out:
        write_jsonl(wk.events, args.events_out)
    return 0


def cmd_bench(args) -> int:
    if args.out:
        with open(args.out, "w") as f:
            bench_comm(parse_range(args.P), parse_range(args.K), args.M, args.N, f)
    else:
        bench_comm(parse_range(args.P), parse_range(args.K), args.M, args.N, sys.stdout)
    return 0


def cmd_inspect(args) -> int:
    info = inspect_checkpoint(args.path)
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sfps", description="desk-scale data-parallel training with a parameter server")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run a whole cluster and write metrics")
    _run_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("server", help="run the parameter server node of a manifest")
    _run_flags(p)
    p.set_defaults(fn=cmd_server)

    p = sub.add_parser("worker", help="run one worker node of a manifest")
    _run_flags(p)
    p.add_argument("--id", type=int, required=True, help="worker id (1..P)")
    p.add_argument("--events-out", help="event log path (JSON-lines)")
    p.set_defaults(fn=cmd_worker)

    p = sub.add_parser("bench-comm", help="print per-iteration communication costs as CSV")
    p.add_argument("--P", default="2-16", help="cluster sizes, e.g. 4 or 2,4,8 or 2-64")
    p.add_argument("--K", default="32,256", help="batch sizes, same syntax")
    p.add_argument("--M", type=int, default=4096)
    p.add_argument("--N", type=int, default=4096)
    p.add_argument("--out", help="write CSV here instead of stdout")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("checkpoint-inspect", help="verify a checkpoint and print its header")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except SfpsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
