"""Run drivers that tie the optimizer to configuration and file output."""

from __future__ import annotations

import logging
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import spec_metadata
from .io import (CsvLog, load_checkpoint, save_checkpoint, snapshot_fields, write_metadata,
                 write_vtk)
from .optimizer import (OptimizationError, Workspace, analyze, final_continuation,
                        make_checkpoint, optimize, threshold_export)

log = logging.getLogger(__name__)


@dataclass
class RunArtifacts:
    out_dir: str
    log: str | None = None
    checkpoint: str | None = None
    metadata: str | None = None
    snapshots: list = field(default_factory=list)
    result: object = None
    error: Exception | None = None

    @property
    def ok(self):
        return self.error is None


def prepare_output_dir(path):
    """Create the output directory and check that it is writable."""
    path = os.fspath(path)
    if os.path.exists(path) and not os.path.isdir(path):
        raise NotADirectoryError(f"output path {path} exists and is not a directory")
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write-test")
    with open(probe, "w") as fh:
        fh.write("")
    os.unlink(probe)
    return path


def _metadata(spec, **extra):
    meta = {"tool": "darcytopo", "version": __version__, "python": platform.python_version(),
            "numpy": np.__version__}
    meta.update(spec_metadata(spec))
    meta.update(extra)
    return meta


def run_optimize(spec, out_dir, snapshot_every=0, resume=None, workers=1, linear=None,
                 newton=None, stop_after=None):
    """Optimize and write log, snapshots, checkpoint and metadata to ``out_dir``.

    Solver failures are caught and reported in ``RunArtifacts.error``; the
    files written up to that point are kept.
    """
    out = prepare_output_dir(out_dir)
    art = RunArtifacts(out, log=os.path.join(out, "log.csv"),
                       checkpoint=os.path.join(out, "checkpoint.npz"),
                       metadata=os.path.join(out, "metadata.json"))
    ckpt = load_checkpoint(resume) if resume else None
    t_start = time.time()
    ws = Workspace(spec, workers, linear, newton)
    spec = ws.spec
    csv_log = CsvLog(art.log)
    if os.path.exists(art.log):
        os.unlink(art.log)
    if ckpt is not None:
        for rec in ckpt["history"]:
            csv_log.write_row(rec)
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(spec_metadata(spec)["config"])

    def snapshot(tag, fields, cont=None):
        mat = ws.materials(fields["gamma_physical"], cont) if cont is not None else None
        cells, points = snapshot_fields(ws, fields["gamma"], fields["gamma_physical"],
                                        fields["state"], mat)
        path = os.path.join(out, f"{tag}.vtk")
        write_vtk(path, ws.mesh, cells, points, title=f"{spec.name} {tag}")
        art.snapshots.append(path)

    def callback(rec, checkpoint, fields):
        csv_log.write_row(rec)
        save_checkpoint(art.checkpoint, checkpoint)
        it = rec.iteration + 1
        end_of_stage = it % spec.stage_length == 0 or it == spec.iterations
        if (snapshot_every and it % snapshot_every == 0) or end_of_stage:
            snapshot(f"iter_{rec.iteration:04d}", fields, fields["continuation"])

    try:
        res = optimize(spec, callback=callback, resume=ckpt, workspace=ws, stop_after=stop_after)
    except OptimizationError as exc:
        art.error = exc
        write_metadata(art.metadata, _metadata(spec, status="failed", error=str(exc),
                                               wall_seconds=time.time() - t_start))
        log.error("optimization failed: %s", exc)
        return art
    art.result = res
    final = {"gamma": res.gamma_full, "gamma_physical": res.gamma_physical, "state": res.state}
    snapshot("final", final, final_continuation(spec, res.iteration - 1))
    np.save(os.path.join(out, "design.npy"), res.gamma_full)
    if res.iteration == 0 or stop_after is None or stop_after >= spec.iterations:
        save_checkpoint(art.checkpoint, make_checkpoint(res.gamma, res.state, res.mma,
                                                        res.history, res.iteration))
    write_metadata(art.metadata, _metadata(
        spec, status="completed", iterations=res.iteration, final_f=res.f, final_g=res.g,
        wall_seconds=time.time() - t_start))
    return art


def load_design(path):
    """Design vector from a ``.npy`` file or a checkpoint ``.npz``."""
    path = os.fspath(path)
    if path.endswith(".npz"):
        return load_checkpoint(path)["gamma"]
    return np.load(path)


def run_analyze(spec, design, out_dir=None, threshold=None, workers=1):
    """Solve the state once for a design; optionally write a snapshot."""
    gamma = load_design(design) if isinstance(design, (str, os.PathLike)) else design
    ev, ws = analyze(spec, gamma, threshold=threshold, workers=workers)
    summary = {"f": ev.f, "newton_steps": ev.report.iterations,
               "residual_reduction": ev.report.reduction, "alpha": ws.spec.alpha}
    if threshold is not None:
        _, frac = threshold_export(ev.gamma_physical[ws.design_index], threshold, ws.volumes)
        summary["solid_fraction"] = frac
    if out_dir is not None:
        out = prepare_output_dir(out_dir)
        full = np.asarray(gamma, dtype=float)
        if full.shape != (ws.mesh.n_elements,):
            full = ws.design_field(full).full()
        cells, points = snapshot_fields(ws, full, ev.gamma_physical, ev.state)
        write_vtk(os.path.join(out, "analysis.vtk"), ws.mesh, cells, points)
        write_metadata(os.path.join(out, "analysis.json"), _metadata(ws.spec, **summary))
    return summary, ev, ws
