"""One-command end-to-end run: beamline simulator, endpoint, trainer and edge node."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import ScanPosition, extract_patch, illumination_mask
from .edge import EdgeService, StitchCanvas
from .endpoint import Endpoint, EndpointConfig
from .flow import ComputeProvider, bundled_flow_text, parse_flow, run_flow, transfer_provider
from .nn import ModelCheckpoint, Network, AdamState, new_checkpoint_id, save_checkpoint
from .recon import aligned_phase_rmse, read_complex, write_complex
from .service import HttpClient, ServiceHandle
from .simlab import SimulationConfig, simulate, serve_frames
from .trainer import ContinuousTrainer, Hyper
from .xfer import frame_relpath, write_dataset

log = logging.getLogger(__name__)


class DemoError(RuntimeError):
    def __init__(self, component: str, message: str):
        self.component = component
        super().__init__(f"{component}: {message}")


@dataclass(frozen=True)
class DemoConfig:
    sim: SimulationConfig = SimulationConfig(
        n=200, scan="grid", step_nm=600.0, probe_fwhm_nm=1500.0, probe_defocus_rad=9.0, phantom_seed=7
    )
    first_run_frames: int = 100
    recon_iterations: int = 60
    recon_alpha: float = 0.5
    hyper: Hyper = Hyper(epochs=30)
    frame_rate_hz: float = 50.0
    workers: int = 1
    endpoint_port: int = 0
    edge_port: int = 0
    frame_port: int = 0
    stage_timeout_s: float = 1500.0

    def __post_init__(self):
        ports = [p for p in (self.endpoint_port, self.edge_port, self.frame_port) if p]
        if len(ports) != len(set(ports)):
            raise ValueError("endpoint, edge and frame ports must be distinct")
        if not 10 <= self.first_run_frames <= self.sim.n:
            raise ValueError("first_run_frames must be between 10 and the scan size")

    @classmethod
    def from_dict(cls, d: dict) -> DemoConfig:
        d = dict(d)
        base = cls()
        sim = replace(base.sim, **d.pop("sim", {}))
        hyper = Hyper.from_dict({**asdict(base.hyper), **d.pop("hyper", {})})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown demo config keys: {sorted(unknown)}")
        return cls(sim=sim, hyper=hyper, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DemoReport:
    recon_rmse_rad: float
    best_val_loss_per_cycle: list[float]
    edge_fps: float
    canvas_correlation: float
    stitch_oracle_rmse_rad: float
    dataset_sizes: list[int] = field(default_factory=list)
    deployed_checkpoint_id: int = 0
    edge_active_checkpoint_id: int = 0
    split_membership_sha256: str = ""
    flow_runs: list[dict] = field(default_factory=list)
    edge_inference_fps: float = 0.0
    wall_time_s: float = 0.0
    stage_seconds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def pearson(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    if mask is not None:
        a, b = a[mask], b[mask]
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / denom) if denom > 0 else 0.0


def stitch_oracle(truth_phase: np.ndarray, centers, canvas: StitchCanvas, positions) -> StitchCanvas:
    """Stitch ground-truth patches (no network) to isolate blending error."""
    dim = canvas.window.shape[0]
    for c, pos in zip(centers, positions):
        canvas.stitch(extract_patch(truth_phase, c, dim), pos)
    return canvas


def bootstrap_checkpoint(hyper: Hyper, input_scale: float) -> ModelCheckpoint:
    net = Network(hyper.spec, seed=hyper.seed)
    return ModelCheckpoint.from_network(
        net, AdamState.for_params(net.named_params()), checkpoint_id=new_checkpoint_id(), input_scale=input_scale
    )


def run_demo(config: DemoConfig, out_root: str | Path) -> DemoReport:
    """Run the full pipeline under ``out_root`` and write ``demo_report.json`` there."""
    t_start = time.monotonic()
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    stages: dict[str, float] = {}
    handles: list = []

    def stage(name, t0):
        stages[name] = round(time.monotonic() - t0, 3)
        log.info("demo stage %s done in %.1f s", name, stages[name])

    try:
        # 1. beamline: simulate and lay out the dataset
        t0 = time.monotonic()
        sim = simulate(config.sim)
        beam_ds = out / "beamline" / "dataset"
        bodies = [f.to_body() for f in sim.frames]
        write_dataset(beam_ds, bodies, sim.index_meta())
        truth = sim.phantom.truth_phase.data
        write_complex(out / "beamline" / "truth_phase.bin", truth.astype(np.complex128))
        stage("simulate", t0)

        # 2. services
        t0 = time.monotonic()
        try:
            frame_server = serve_frames(bodies, config.frame_rate_hz, f"127.0.0.1:{config.frame_port}")
        except OSError as exc:
            raise DemoError("frame-server", str(exc)) from exc
        handles.append(frame_server)
        try:
            svc = ServiceHandle(
                Endpoint(EndpointConfig(config.workers, max(64, config.workers))), port=config.endpoint_port
            ).start()
        except (OSError, RuntimeError) as exc:
            raise DemoError("endpoint", str(exc)) from exc
        handles.append(svc)
        scale = float(max(np.sqrt(b.pixels.max()) for b in bodies))
        boot = bootstrap_checkpoint(config.hyper, scale)
        save_checkpoint(boot, out / "trainer" / "bootstrap.pnnc")
        try:
            edge = EdgeService(boot, f"127.0.0.1:{config.edge_port}").start()
        except OSError as exc:
            raise DemoError("edge", str(exc)) from exc
        handles.append(edge)
        trainer = ContinuousTrainer(
            out / "cluster" / "recon", out / "trainer", edge.model_addr, config.hyper, min_new=32, poll_interval=1.0
        ).start()
        handles.append(trainer)
        stage("startup", t0)

        canvas_shape = sim.phantom.object.data.shape
        dim = config.sim.frame_dim

        def new_canvas() -> StitchCanvas:
            return StitchCanvas.for_probe(canvas_shape, sim.pixel_nm, config.sim.probe_fwhm_nm, dim)

        # live edge pass during acquisition with the bootstrap model
        live: dict = {}
        live_thread = threading.Thread(
            target=lambda: live.update(
                result=edge.run_scan(frame_server.address, out / "edge" / "live", new_canvas(), config.stage_timeout_s)
            ),
            daemon=True,
        )
        live_thread.start()

        # 3. flows: transfer + reconstruct, first part of the scan then all of it
        flow_def = parse_flow(bundled_flow_text())
        client = HttpClient(svc.url)
        providers = {
            "local://transfer": transfer_provider,
            "local://compute": ComputeProvider(lambda _url: client, timeout=config.stage_timeout_s),
        }
        cluster_ds = out / "cluster" / "dataset"
        flow_runs = []
        for k, count in enumerate((config.first_run_frames, config.sim.n), 1):
            t0 = time.monotonic()
            items = ["index.json"] + [frame_relpath(i) for i in range(count)]
            flow_input = {
                "src": str(beam_ds),
                "dest": str(cluster_ds),
                "items": items,
                "endpoint": svc.url,
                "function": "ptycho_reconstruct",
                "payload": {
                    "dataset": str(cluster_ds),
                    "out_dir": str(out / "cluster" / f"recon_out{k}"),
                    "pairs_dir": str(out / "cluster" / "recon" / f"run{k}"),
                    "limit": count,
                    "config": {"iterations": config.recon_iterations, "alpha": config.recon_alpha, "seed": k},
                },
            }
            run = run_flow(flow_def, flow_input, providers, runs_dir=out / "runs")
            if run.status != "succeeded":
                raise DemoError("flow", f"run {run.run_id} failed: {run.error}")
            flow_runs.append({"run_id": run.run_id, "states": run.states, "end_state": run.end_state, "frames": count})
            stage(f"flow{k}", t0)
            t0 = time.monotonic()
            if not trainer.wait_for_cycles(k, config.stage_timeout_s):
                raise DemoError("trainer", f"cycle {k} did not finish in time")
            stage(f"train{k}", t0)

        live_thread.join(config.stage_timeout_s)
        trainer.stop()
        best = trainer.best
        if not trainer.deploys or not trainer.deploys[-1].ok:
            raise DemoError("trainer", "final checkpoint was not deployed")

        # 4. final edge pass with the deployed model
        t0 = time.monotonic()
        final = edge.run_scan(frame_server.address, out / "edge" / "final", new_canvas(), config.stage_timeout_s)
        stage("edge-final", t0)

        # 5. metrics
        rendered = final.node.canvas.render()
        cover = final.node.canvas.coverage()
        corr = pearson(rendered, truth, cover)
        recon_obj = read_complex(sorted((out / "cluster" / "recon_out2").glob("object_iter*.bin"), key=_iter_no)[-1])
        probe = sim.probe.probe.data
        mask = illumination_mask(canvas_shape, sim.centers, np.abs(probe) ** 2)
        recon_rmse = aligned_phase_rmse(recon_obj, truth, mask)
        positions = list(sim.path)
        oracle = stitch_oracle(truth, sim.centers, new_canvas(), positions)
        oracle_rmse = float(np.sqrt(np.mean((oracle.render() - truth)[mask] ** 2)))
        membership = json.dumps(trainer.index.membership(), sort_keys=True)
        report = DemoReport(
            recon_rmse_rad=recon_rmse,
            best_val_loss_per_cycle=[r.best_val_loss for r in trainer.reports],
            edge_fps=final.stats["fps"],
            canvas_correlation=corr,
            stitch_oracle_rmse_rad=oracle_rmse,
            dataset_sizes=[r.dataset_size for r in trainer.reports],
            deployed_checkpoint_id=best.checkpoint_id,
            edge_active_checkpoint_id=final.stats["active_checkpoint_id"],
            split_membership_sha256=hashlib.sha256(membership.encode()).hexdigest(),
            flow_runs=flow_runs,
            edge_inference_fps=final.stats["inference_fps"],
            wall_time_s=round(time.monotonic() - t_start, 2),
            stage_seconds=stages,
        )
        (out / "demo_report.json").write_text(json.dumps(report.to_dict(), indent=1))
        return report
    finally:
        for h in reversed(handles):
            try:
                h.stop()
            except Exception:
                log.exception("teardown of %s failed", type(h).__name__)


def _iter_no(p: Path) -> int:
    return int(p.stem.removeprefix("object_iter"))
