"""Stage functions shared by the command line: simulate, transfer, end-to-end runs."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .fem import assemble
from .infer import FitOptions, PanelDataset, fit_model, model_selection
from .mesh import TriangleMesh, cylinder_mesh, grid_panel_mesh, load_mesh, save_mesh
from .model import InvalidParameterError, ModelSpec, ParamVector, build_precision, common_indices
from .preprocess import preprocess_cloud
from .sample import derive_seed, factorize, sample_field, thickness_histogram

log = logging.getLogger(__name__)

# stream keys for derive_seed; fixed so that seeds never depend on stage order
STREAM_SIMULATE = 1
STREAM_SAMPLE = 2


class InvalidTransferError(ValueError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    wall_clock_s: float = 0.0
    status: str = "ok"

    def add_inputs(self, *paths):
        for p in paths:
            p = Path(p)
            files = sorted(p.glob("*")) if p.is_dir() else [p]
            for f in files:
                if f.is_file():
                    self.inputs[str(f)] = sha256_file(f)

    def add_outputs(self, *paths):
        for p in paths:
            p = Path(p)
            files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
            for f in files:
                if f.exists() and f.name != "manifest.json":
                    self.outputs[str(f)] = sha256_file(f)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def simulate_panels(spec: ModelSpec, params: ParamVector, mesh: TriangleMesh, n_panels: int, seed: int):
    """Independent draws on copies of one panel mesh; nonstationary specs use panel k's effects."""
    fem = assemble(mesh)
    out = []
    factor = None
    for k in range(n_panels):
        if factor is None or not spec.stationary:
            Q = build_precision(spec, params, fem, mesh, panel=min(k, spec.n_panels - 1), wrt=[]).Q
            factor = factorize(Q)
        s = sample_field(factor, derive_seed(seed, STREAM_SIMULATE, k), mesh)
        out.append(PanelDataset(mesh, s.w, k))
    return out


def transfer_precision(fit_params: ParamVector, mesh: TriangleMesh, panel: int | None = None):
    """Precision of the fitted model on a new mesh.

    Stationary fits carry over unchanged.  Nonstationary fits use the Fourier
    effects of ``panel``, or their average over panels when ``panel`` is
    None, evaluated at the target vertices' z coordinate.
    """
    spec = fit_params.spec
    fem = assemble(mesh)
    if spec.stationary:
        return build_precision(spec, fit_params, fem, mesh, wrt=[]).Q
    if panel is not None and not 0 <= panel < spec.n_panels:
        raise InvalidTransferError(f"panel {panel} not in fit (n_panels={spec.n_panels})")
    ncommon = len(common_indices(spec))
    effects = fit_params.flat[ncommon:].reshape(spec.n_panels, 16)
    chosen = effects.mean(axis=0) if panel is None else effects[panel]
    one = ParamVector(spec.with_panels(1), np.concatenate([fit_params.flat[:ncommon], chosen]))
    try:
        return build_precision(one.spec, one, fem, mesh, panel=0, wrt=[]).Q
    except InvalidParameterError as exc:
        raise InvalidTransferError(f"fitted profile invalid on target mesh: {exc}") from None


def transfer(fit_params: ParamVector, mesh: TriangleMesh, n_samples: int, seed: int, notional: float, out_dir, panel=None):
    """Sample the fitted model on ``mesh``; write per-sample CSVs and a thickness histogram.

    Only central-window vertices are written and pooled.  Returns the list of
    written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    factor = factorize(transfer_precision(fit_params, mesh, panel))
    window = mesh.central_vertices()
    written = []
    pooled = []
    for k in range(n_samples):
        s = sample_field(factor, derive_seed(seed, STREAM_SAMPLE, k), mesh)
        thick = notional + s.u1 + s.u2
        path = out_dir / f"sample_{k:04d}.csv"
        sio.write_sample_csv(path, mesh, s.u1, s.u2, thick, window)
        written.append(path)
        pooled.append(thick[window])
    if pooled:
        centres, counts = thickness_histogram(np.concatenate(pooled))
        path = out_dir / "thickness_histogram.csv"
        sio.write_histogram_csv(path, centres, counts)
        written.append(path)
    return written


def build_mesh(cfg: dict) -> TriangleMesh:
    kind = cfg.get("kind", "panel")
    if kind == "panel":
        return grid_panel_mesh(int(cfg["nx"]), int(cfg["ny"]), float(cfg.get("spacing", 1.0)))
    if kind == "cylinder":
        mesh, _ = cylinder_mesh(
            float(cfg["radius"]),
            float(cfg["length"]),
            int(cfg["n_theta"]),
            int(cfg["n_z"]),
            float(cfg.get("pad_fraction", 0.25)),
        )
        return mesh
    raise ValueError(f"unknown mesh kind {kind!r}")


def _resolve(base: Path, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def end_to_end(config: dict, out_dir, seed: int = 0, threads: int = 1, base_dir=".") -> int:
    """Run the configured stages in order; returns a process exit code.

    Recognised stages (all optional): ``mesh``, ``simulate``, ``preprocess``,
    ``select``, ``fit``, ``transfer``.  A failing stage leaves a ``FAILED``
    marker and the artifacts of earlier stages.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(base_dir)
    stages = config.get("stages", {})
    unknown = set(stages) - {"mesh", "simulate", "preprocess", "select", "fit", "transfer"}
    if unknown:
        raise ValueError(f"unknown stages {sorted(unknown)}")
    manifest = RunManifest("run", list(sys.argv), config, seed, started=time.strftime("%Y-%m-%dT%H:%M:%S"))
    t0 = time.perf_counter()
    opts = FitOptions(threads=threads)
    state: dict = {}
    current = None
    try:
        if "mesh" in stages:
            current = "mesh"
            save_mesh(build_mesh(stages["mesh"]), out / "mesh.txt")
        data_dir = _resolve(base, config["data"]) if "data" in config else None
        if "simulate" in stages:
            current = "simulate"
            cfg = stages["simulate"]
            spec, params = sio.load_model_config(_resolve(base, cfg["model"]))
            manifest.add_inputs(_resolve(base, cfg["model"]))
            params = params or ParamVector.default(spec)
            mesh = build_mesh({"kind": "panel", **cfg.get("mesh", {"nx": 30, "ny": 30})})
            data_dir = out / "panels"
            data_dir.mkdir(exist_ok=True)
            for ds in simulate_panels(spec, params, mesh, int(cfg.get("n_panels", 1)), seed):
                sio.write_panel_csv(data_dir / f"panel_{ds.panel_id:02d}.csv", ds, {"simulated_from": spec.label})
        if "preprocess" in stages:
            current = "preprocess"
            cfg = stages["preprocess"]
            data_dir = out / "panels"
            data_dir.mkdir(exist_ok=True)
            for k, src in enumerate(cfg["inputs"]):
                src = _resolve(base, src)
                manifest.add_inputs(src)
                grid = preprocess_cloud(
                    sio.read_point_cloud(src),
                    cfg.get("resolution", 300),
                    cfg.get("cutoff", 0.5),
                    cfg.get("window"),
                    cfg.get("rotation_deg", 0.0),
                )
                sio.write_panel_csv(data_dir / f"panel_{k:02d}.csv", grid.to_dataset(k), grid.settings)
        datasets = None
        if "select" in stages or "fit" in stages:
            current = "select" if "select" in stages else "fit"
            if data_dir is None:
                raise ValueError("no panel data: give 'data' or a simulate/preprocess stage")
            datasets, files = sio.read_panel_dir(data_dir)
            manifest.add_inputs(*files)
        if "select" in stages:
            current = "select"
            cfg = stages["select"]
            models = sio.load_model_list([str(_resolve(base, m)) if m != "all" else m for m in cfg.get("models", ["all"])])
            table = model_selection([s for s, _ in models], datasets, opts, cfg.get("surrogate_side"))
            sio.write_selection_csv(out / "selection.csv", table)
            if table.winner is not None:
                state["fit"] = table.rows[table.winner]["fit"]
                sio.save_fit(out / "best_fit.json", state["fit"])
        if "fit" in stages:
            current = "fit"
            cfg = stages["fit"]
            spec, theta0 = sio.load_model_config(_resolve(base, cfg["model"]))
            fit = fit_model(spec, datasets, opts, cfg.get("surrogate_side"), theta0=theta0)
            sio.save_fit(out / "fit.json", fit)
            state["fit"] = fit
        if "transfer" in stages:
            current = "transfer"
            cfg = stages["transfer"]
            if "fit" in cfg:
                fit = sio.load_fit(_resolve(base, cfg["fit"]))
            elif "fit" in state:
                fit = state["fit"]
            else:
                raise ValueError("transfer needs a fit from an earlier stage or a 'fit' file")
            mcfg = cfg.get("mesh", {"kind": "cylinder", "radius": 50, "length": 100, "n_theta": 64, "n_z": 21})
            mesh = load_mesh(_resolve(base, mcfg)) if isinstance(mcfg, str) else build_mesh(mcfg)
            transfer(fit.params, mesh, int(cfg.get("n_samples", 1)), seed, float(cfg.get("notional", 3.5)), out / "transfer", cfg.get("panel"))
        code = 0
    except Exception as exc:  # noqa: BLE001 - reported through marker and exit code
        log.error("stage %s failed: %s", current, exc)
        (out / "FAILED").write_text(f"stage: {current}\nerror: {exc}\n\n{traceback.format_exc()}")
        manifest.status = f"failed in {current}: {exc}"
        code = 1
    manifest.add_outputs(out)
    manifest.wall_clock_s = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    return code
