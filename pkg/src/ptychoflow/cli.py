"""Command-line entry point. Exit codes: 0 success, 1 runtime failure, 2 usage or config error."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time
from dataclasses import fields, replace
from pathlib import Path

from . import __version__

log = logging.getLogger("ptychoflow")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or configuration (exit 2)."""


class JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        doc = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc)


def setup_logging(level: str = "info"):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLogFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    logging.getLogger("httpx").setLevel(logging.WARNING)


def load_config(path: str | None) -> dict:
    """TOML (``.toml``) or JSON config file; ``None`` gives an empty config."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        if p.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            return tomllib.loads(p.read_text())
        return json.loads(p.read_text())
    except ValueError as exc:
        raise UsageError(f"cannot parse config {p}: {exc}") from exc


def _read_json_arg(value: str | None, what: str):
    """Inline JSON, or ``@file`` / a path to a JSON file."""
    if value is None:
        return None
    path = Path(value[1:] if value.startswith("@") else value)
    if value.startswith("@") or (not value.lstrip().startswith(("{", "[", '"')) and path.suffix == ".json"):
        if not path.is_file():
            raise UsageError(f"{what} file not found: {path}")
        value = path.read_text()
    try:
        return json.loads(value)
    except ValueError as exc:
        raise UsageError(f"{what} is not valid JSON: {exc}") from exc


def _override(obj, overrides: dict):
    names = {f.name for f in fields(obj)}
    bad = set(overrides) - names
    if bad:
        raise UsageError(f"unknown config keys for {type(obj).__name__}: {sorted(bad)}")
    try:
        return replace(obj, **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _wait_forever(stop: threading.Event):
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, lambda *_: stop.set())
        except ValueError:  # not the main thread
            pass
    while not stop.wait(0.5):
        pass


# commands


def cmd_simulate(args, cfg: dict) -> int:
    from .simlab import SimulationConfig, simulate
    from .xfer import write_dataset

    sc = _override(SimulationConfig(), cfg.get("simulate", cfg.get("sim", {})))
    flags = {k: v for k, v in (("n", args.n), ("step_nm", args.step_nm), ("scan", args.scan), ("phantom_seed", args.seed)) if v is not None}
    sc = _override(sc, flags)
    if sc.n < 1:
        raise UsageError("n must be >= 1")
    if sc.scan not in ("spiral", "grid"):
        raise UsageError(f"scan must be 'spiral' or 'grid', not {sc.scan!r}")
    try:
        sim = simulate(sc)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    manifest = write_dataset(out, [f.to_body() for f in sim.frames], sim.index_meta())
    if args.truth:
        from .recon import write_complex

        write_complex(out.parent / f"{out.name}_truth_phase.bin", sim.phantom.truth_phase.data.astype(complex))
    print(json.dumps({"dataset": str(out), "frames": len(sim.frames), "files": len(manifest.entries)}))
    return EXIT_OK


def cmd_serve(args, cfg: dict) -> int:
    from .simlab import serve_frames
    from .xfer import read_dataset

    ds_dir = Path(args.dataset)
    if not (ds_dir / "index.json").is_file():
        raise UsageError(f"not a dataset directory: {ds_dir}")
    ds = read_dataset(ds_dir)
    server = serve_frames(ds.frames, args.rate, args.listen, live=args.live)
    print(json.dumps({"frame_server": server.address, "frames": len(ds.frames)}), flush=True)
    stop = threading.Event()
    try:
        _wait_forever(stop)
    finally:
        server.stop()
    return EXIT_OK


def cmd_endpoint_start(args, cfg: dict) -> int:
    from .endpoint import Endpoint, EndpointConfig
    from .service import ServiceHandle
    from .wire import parse_addr

    ec = _override(EndpointConfig(), cfg.get("endpoint", {}))
    ec = _override(ec, {k: v for k, v in (("workers", args.workers), ("listen_addr", args.listen)) if v is not None})
    host, port = parse_addr(ec.listen_addr)
    endpoint = Endpoint(ec, state_path=args.state)
    handle = ServiceHandle(endpoint, host, port)  # OSError on a taken port -> exit 1
    handle.start()
    print(json.dumps({"endpoint": handle.url, "workers": ec.workers}), flush=True)
    stop = threading.Event()
    try:
        _wait_forever(stop)
    finally:
        handle.stop()
    return EXIT_OK


def _client(args):
    from .service import HttpClient

    return HttpClient(args.url)


def cmd_endpoint_register(args, cfg: dict) -> int:
    print(json.dumps({"function_id": _client(args).register(args.name), "name": args.name}))
    return EXIT_OK


def cmd_endpoint_run(args, cfg: dict) -> int:
    client = _client(args)
    payload = _read_json_arg(args.payload, "payload")
    task_id = client.run(args.function, payload)
    if not args.wait:
        print(json.dumps({"task_id": task_id}))
        return EXIT_OK
    status = client.wait(task_id, args.timeout)
    print(json.dumps(status))
    return EXIT_OK if status["state"] == "succeeded" else EXIT_RUNTIME


def cmd_endpoint_status(args, cfg: dict) -> int:
    print(json.dumps(_client(args).status(args.task_id)))
    return EXIT_OK


def _edge_bootstrap(args):
    from .nn import load_checkpoint
    from .trainer import Hyper

    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        return load_checkpoint(args.checkpoint)
    from .demo import bootstrap_checkpoint

    return bootstrap_checkpoint(Hyper(), args.input_scale)


def cmd_edge_start(args, cfg: dict) -> int:
    from .edge import EdgeService, StitchCanvas
    from .wire import ConnectError

    boot = _edge_bootstrap(args)
    canvas = None
    if args.dataset:
        idx = json.loads((Path(args.dataset) / "index.json").read_text())
        canvas = StitchCanvas.for_probe(
            tuple(idx["object_shape"]), idx["pixel_nm"], idx["probe_fwhm_nm"], idx["geometry"]["frame_dim"]
        )
    svc = EdgeService(boot, args.listen, max_attempts=args.max_attempts).start()
    print(json.dumps({"edge_model_addr": svc.model_addr}), flush=True)
    try:
        result = svc.run_scan(args.frames, args.out, canvas)
    except ConnectError as exc:
        log.error("frame server unreachable: %s", exc)
        return EXIT_RUNTIME
    finally:
        svc.stop()
    print(json.dumps({"report": str(result.report_path), "frames": result.stats["frames"], "fps": result.stats["fps"]}))
    return EXIT_OK


def cmd_flow_run(args, cfg: dict) -> int:
    from .flow import ComputeProvider, FlowValidationError, bundled_flow_text, load_flow, parse_flow, run_flow, transfer_provider
    from .service import HttpClient

    if args.definition == "bundled":
        text = bundled_flow_text()
    else:
        p = Path(args.definition)
        if not p.is_file():
            raise UsageError(f"flow definition not found: {p}")
        text = p.read_text()
    try:
        flow_def = parse_flow(text)
    except FlowValidationError as exc:
        raise UsageError(f"invalid flow {args.definition}: {exc}") from exc
    flow_input = _read_json_arg(args.input, "input") if args.input else {}
    providers = {
        "local://transfer": transfer_provider,
        "local://compute": ComputeProvider(lambda url: HttpClient(url)),
    }
    run = run_flow(flow_def, flow_input, providers, runs_dir=args.runs_dir)
    print(json.dumps({"run_id": run.run_id, "status": run.status, "states": run.states, "end_state": run.end_state}))
    return EXIT_OK if run.status == "succeeded" else EXIT_RUNTIME


def cmd_trainer_run(args, cfg: dict) -> int:
    from .nn import load_checkpoint
    from .trainer import ContinuousTrainer, Hyper

    hyper = _override(Hyper(), {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.get("trainer", {}).items()})
    warm = load_checkpoint(args.warm_start, hyper.spec) if args.warm_start else None
    trainer = ContinuousTrainer(
        args.watch, args.work, args.edge, hyper, min_new=args.min_new, poll_interval=args.poll, bootstrap=warm
    )
    if args.once:
        report = trainer.poll_once()
        print(json.dumps(report.to_dict() if report else {"cycle": None}))
        return EXIT_OK
    trainer.start()
    stop = threading.Event()
    try:
        _wait_forever(stop)
    finally:
        trainer.stop()
    return EXIT_OK


def cmd_demo(args, cfg: dict) -> int:
    from .demo import DemoConfig, DemoError, run_demo

    try:
        dc = DemoConfig.from_dict(cfg.get("demo", cfg))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad demo config: {exc}") from exc
    t0 = time.monotonic()
    try:
        report = run_demo(dc, args.out)
    except DemoError as exc:
        log.error("demo failed in %s: %s", exc.component, exc)
        print(json.dumps({"failed_component": exc.component, "error": str(exc)}))
        return EXIT_RUNTIME
    log.info("demo finished in %.1f s", time.monotonic() - t0)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptychoflow", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    p.add_argument("--config", help="TOML or JSON config file")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a simulated scan dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--step-nm", type=float)
    s.add_argument("--scan", choices=["spiral", "grid"])
    s.add_argument("--seed", type=int, help="phantom seed")
    s.add_argument("--truth", action="store_true", help="also write the ground-truth phase next to the dataset")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("serve", help="stream a dataset's frames over the wire protocol")
    s.add_argument("--dataset", required=True)
    s.add_argument("--listen", default="127.0.0.1:8460")
    s.add_argument("--rate", type=float, default=50.0)
    s.add_argument("--live", action="store_true")
    s.set_defaults(func=cmd_serve)

    ep = sub.add_parser("endpoint", help="compute endpoint service and client").add_subparsers(dest="action", required=True)
    s = ep.add_parser("start")
    s.add_argument("--workers", type=int)
    s.add_argument("--listen")
    s.add_argument("--state", help="persist registry and tasks to this JSON file")
    s.set_defaults(func=cmd_endpoint_start)
    for name, func in (("register", cmd_endpoint_register), ("run", cmd_endpoint_run), ("status", cmd_endpoint_status)):
        s = ep.add_parser(name)
        s.add_argument("--url", default="http://127.0.0.1:8470")
        if name == "register":
            s.add_argument("name")
        elif name == "run":
            s.add_argument("function", help="catalog name or function id")
            s.add_argument("--payload", help="JSON text or @file")
            s.add_argument("--wait", action="store_true")
            s.add_argument("--timeout", type=float)
        else:
            s.add_argument("task_id")
        s.set_defaults(func=func)

    ed = sub.add_parser("edge", help="edge inference node").add_subparsers(dest="action", required=True)
    s = ed.add_parser("start")
    s.add_argument("--frames", required=True, help="frame server host:port")
    s.add_argument("--listen", default="127.0.0.1:8480", help="model deployment host:port")
    s.add_argument("--out", default="edge")
    s.add_argument("--checkpoint")
    s.add_argument("--input-scale", type=float, default=1.0, help="amplitude scale for the untrained bootstrap model")
    s.add_argument("--dataset", help="dataset directory used to size the stitch canvas")
    s.add_argument("--max-attempts", type=int, default=5)
    s.set_defaults(func=cmd_edge_start)

    fl = sub.add_parser("flow", help="flow engine").add_subparsers(dest="action", required=True)
    s = fl.add_parser("run")
    s.add_argument("--def", dest="definition", required=True, help="flow JSON file, or 'bundled'")
    s.add_argument("--input", help="JSON text or @file")
    s.add_argument("--runs-dir", default="runs")
    s.set_defaults(func=cmd_flow_run)

    tr = sub.add_parser("trainer", help="continuous trainer").add_subparsers(dest="action", required=True)
    s = tr.add_parser("run")
    s.add_argument("--watch", required=True, help="directory receiving pair_<i>.bin files")
    s.add_argument("--work", default="trainer")
    s.add_argument("--edge", help="edge deployment host:port")
    s.add_argument("--warm-start")
    s.add_argument("--min-new", type=int, default=32)
    s.add_argument("--poll", type=float, default=2.0)
    s.add_argument("--once", action="store_true", help="one poll, at most one cycle")
    s.set_defaults(func=cmd_trainer_run)

    s = sub.add_parser("demo", help="end-to-end desk-scale run")
    s.add_argument("--out", default="demo_out")
    s.set_defaults(func=cmd_demo)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on usage errors, 0 for --help
        return int(exc.code or 0)
    setup_logging(args.log_level)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:
        log.exception("%s failed: %s", args.command, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
